"""Reference child process for :class:`~litevla.sim.ExternalProcessBackend`.

Usage: ``python -m litevla.serve_policy <policy container> [--delay-ms N]``

Reads one request line per decision on stdin and answers with one
``ACTION <v> <w>`` line on stdout. A request it cannot decode gets an
``ERROR`` line, which the caller's parser rejects (fail-safe).
"""

from __future__ import annotations

import argparse
import sys
import time

from .container import load
from .model_io import policy_from_model
from .parser import format_action
from .policy import GoalInstruction, Observation, greedy_decode
from .sim import decode_request_line


def serve(params, vocab, decode, stdin=sys.stdin.buffer, stdout=sys.stdout.buffer, delay_s: float = 0.0) -> int:
    H, W = params.image_shape
    n = 0
    for line in stdin:
        try:
            image, goal_id = decode_request_line(line, H, W)
            obs = Observation(image.clip(0.0, 1.0), GoalInstruction(f"goal {goal_id}", goal_id))
        except ValueError as exc:
            stdout.write(f"ERROR {exc}\n".encode())
            stdout.flush()
            continue
        if delay_s:
            time.sleep(delay_s)
        stdout.write(format_action(greedy_decode(params, obs, decode, vocab)).encode())
        stdout.flush()
        n += 1
    return n


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m litevla.serve_policy")
    p.add_argument("model")
    p.add_argument("--delay-ms", type=float, default=0.0, help="sleep before each reply")
    args = p.parse_args(argv)
    params, vocab, decode = policy_from_model(load(args.model))
    serve(params, vocab, decode, delay_s=args.delay_ms / 1e3)
    return 0


if __name__ == "__main__":
    sys.exit(main())
