"""``litevla`` command line: one subcommand per pipeline stage.

Failures exit nonzero and print one JSON object to stderr with keys
``error_class`` and ``message``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import bridge, container, model_io, pipeline
from .config import ConfigError, load_config, set_dotted
from .quantizer import quantize_policy
from .sim import run_latency_bench

log = logging.getLogger("litevla")

EXIT_CONTRACT = 1
EXIT_USAGE = 2
EXIT_INPUT = 3


class CommandFailed(Exception):
    def __init__(self, error_class: str, message: str, code: int = EXIT_CONTRACT):
        super().__init__(message)
        self.error_class = error_class
        self.code = code


def _write_report(path: str | None, payload: dict) -> None:
    if path:
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def _envelope(cfg: dict, command: str, **body) -> dict:
    return {"command": command, "seed": cfg["seed"], "config": cfg, **body}


def cmd_gen_data(args, cfg) -> None:
    data = pipeline.gen_data(cfg)
    vocab = pipeline.vocab_from_config(cfg)
    n = container.save(args.out, model_io.dataset_to_model(data, vocab, {"litevla.seed": cfg["seed"]}))
    print(f"wrote {len(data)} samples ({n} bytes) to {args.out}")


def cmd_train(args, cfg) -> None:
    dataset, vocab = model_io.dataset_from_model(container.load(args.data))
    if vocab != pipeline.vocab_from_config(cfg):
        raise CommandFailed("config", "dataset vocabulary differs from the configured vocabulary")
    outcome = pipeline.train_policy(cfg, dataset)
    model = model_io.policy_to_model(
        outcome.params,
        vocab,
        pipeline.decode_from_config(cfg),
        extra={"litevla.seed": cfg["seed"], "litevla.train.config": json.dumps(cfg, sort_keys=True)},
    )
    n = container.save(args.out, model)
    curves = {k: [v[0], v[-1]] for k, v in outcome.loss_curves.items()}
    print(f"wrote FP32 policy ({n} bytes) to {args.out}; loss first/last per stage: {curves}")
    _write_report(args.report, _envelope(cfg, "train", loss_curves=outcome.loss_curves, dataset_size=outcome.dataset_size))


def cmd_quantize(args, cfg) -> None:
    src = container.load(args.model)
    params, vocab, decode = model_io.policy_from_model(src)
    _, summary = quantize_policy(params)
    extra = {k: mv for k, mv in src.metadata.items() if k.startswith("litevla.seed") or k.startswith("litevla.train.")}
    model = model_io.policy_to_model(params, vocab, decode, quantized=True, extra=extra)
    n = container.save(args.out, model)
    fp_bytes = Path(args.model).stat().st_size
    for line in summary.lines():
        print(line)
    print(f"wrote quantized policy ({n} bytes, FP32 file {fp_bytes} bytes) to {args.out}")


def cmd_inspect(args, cfg) -> None:
    data = Path(args.container).read_bytes()
    report = container.validate_container(data)
    arch = report.model.metadata.get("general.architecture") if report.model is not None else None
    if arch is not None and arch.value == model_io.ARCH:
        report = container.validate_container(data, model_io.REQUIRED_POLICY_KEYS)
    for c in report.checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
    if report.model is not None:
        for key, mv in report.model.metadata.items():
            shown = mv.value if not (isinstance(mv.value, str) and len(mv.value) > 60) else mv.value[:57] + "..."
            print(f"  kv {key} [{mv.type.name}] = {shown!r}")
        for t in report.model.tensors:
            print(f"  tensor {t.name} {t.dtype.name} {list(t.shape)} {len(t.payload())} bytes")
    _write_report(args.report, _envelope(cfg, "inspect", **report.to_dict()))
    if not report.ok:
        raise CommandFailed("container", "container failed validation", EXIT_INPUT)


def cmd_eval_loop(args, cfg) -> None:
    spec = args.backend or f"toy:{args.model}"
    backend = pipeline.make_backend(spec, cfg)
    overrides = {}
    if args.goal_shift is not None:
        overrides["goal_shift_time"] = args.goal_shift
    try:
        result = pipeline.evaluate(backend, cfg, args.episodes, **overrides)
    finally:
        if hasattr(backend, "close"):
            backend.close()
    print(f"backend {spec}: success {result['success_rate']:.1%} over {result['episodes']} episodes, "
          f"mean steps {result['mean_steps']:.1f}, fail-safe activations {result['failsafe_activations']}")
    _write_report(args.report, _envelope(cfg, "eval-loop", backend=spec, **result))


def cmd_bench_latency(args, cfg) -> None:
    backend = pipeline.make_backend(args.backend, cfg)
    try:
        report = run_latency_bench(backend, cfg["bench"]["runs"], cfg["bench"]["warmup"], seed=cfg["seed"], vocab=pipeline.vocab_from_config(cfg))
    finally:
        if hasattr(backend, "close"):
            backend.close()
    print(report.table(), end="")
    payload = _envelope(cfg, "bench-latency", backend=args.backend, backend_config=getattr(backend, "config", {}), report=report.to_dict())
    _write_report(args.report, payload)


def cmd_compare_quant(args, cfg) -> None:
    fp, vocab, _ = model_io.policy_from_model(container.load(args.fp))
    q, vocab_q, _ = model_io.policy_from_model(container.load(args.quant))
    if vocab != vocab_q:
        raise CommandFailed("config", "containers use different vocabularies")
    result = pipeline.compare_quantized(fp, q, cfg, vocab, args.observations, args.episodes)
    print(f"greedy agreement {result['agreement']:.4f} over {result['observations']} observations "
          f"(threshold {result['agreement_threshold']:.2f}, artifact-chosen)")
    print(f"closed-loop success FP32 {result['success_fp']:.1%}, quantized {result['success_quantized']:.1%}, "
          f"delta {result['success_delta_pp']:+.1f} pp (max drop {result['max_success_drop_pp']:.0f} pp, artifact-chosen)")
    if result["disagreements"]:
        print(f"{len(result['disagreements'])} disagreeing observations listed in the report")
    _write_report(args.report, _envelope(cfg, "compare-quant", **result))
    if not result["passed"]:
        raise CommandFailed("threshold", "quantized policy missed an agreement or success threshold")


def cmd_serve_bridge(args, cfg) -> None:
    port = args.port if args.port is not None else bridge.bridge_port()
    bus = bridge.Bus()
    peer = (args.peer_host, args.peer_port) if args.peer_port else None
    udp = bridge.UdpBridge(bus, in_topic=args.topic, out_topic=args.topic if peer else None, bind=(args.host, port), peer=peer)
    udp.start()
    print(f"bridging topic {args.topic!r} on udp://{udp.address[0]}:{udp.address[1]}", flush=True)
    deadline = time.monotonic() + args.duration if args.duration else None
    try:
        while deadline is None or time.monotonic() < deadline:
            time.sleep(0.05)
    except KeyboardInterrupt:
        pass
    finally:
        udp.close()
    print(f"received {udp.received}, rejected {udp.rejected}, sent {udp.sent}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="litevla", description="Local VLA pipeline: data, training, quantization, evaluation.")
    p.add_argument("--config", help="JSON config file (merged over built-in defaults)")
    p.add_argument("--seed", type=int, help="global seed (overrides the config file)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=JSON", help="override one config value, e.g. train.epochs=10")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="roll out the scripted expert and write a dataset container")
    s.add_argument("--out", required=True)
    s.add_argument("--episodes", type=int)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train the FP32 policy")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("quantize", help="write a Q4B32 copy of a policy container")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("inspect", help="validate a container and list its contents")
    s.add_argument("container")
    s.add_argument("--report")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("eval-loop", help="closed-loop episodes over held-out seeds")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--model")
    g.add_argument("--backend")
    s.add_argument("--episodes", type=int)
    s.add_argument("--goal-shift", type=float, help="teleport the active target at this time (s)")
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval_loop)

    s = sub.add_parser("bench-latency", help="end-to-end decision latency benchmark")
    s.add_argument("--backend", required=True, help="toy:<file> | delay:<ms>[:<file>] | expert | external:<cmd>")
    s.add_argument("--runs", type=int)
    s.add_argument("--warmup", type=int)
    s.add_argument("--report")
    s.set_defaults(func=cmd_bench_latency)

    s = sub.add_parser("compare-quant", help="FP32 vs quantized agreement and success delta")
    s.add_argument("--fp", required=True)
    s.add_argument("--quant", required=True)
    s.add_argument("--observations", type=int)
    s.add_argument("--episodes", type=int)
    s.add_argument("--report")
    s.set_defaults(func=cmd_compare_quant)

    s = sub.add_parser("serve-bridge", help="forward a bus topic to/from UDP until interrupted")
    s.add_argument("--topic", default="cmd_vel")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, help=f"bind port (default ${bridge.PORT_ENV} or {bridge.DEFAULT_PORT})")
    s.add_argument("--peer-host", default="127.0.0.1")
    s.add_argument("--peer-port", type=int)
    s.add_argument("--duration", type=float, help="stop after this many seconds")
    s.set_defaults(func=cmd_serve_bridge)
    return p


def _resolve_config(args) -> dict:
    overrides: dict = {}
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=JSON, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        set_dotted(overrides, key, value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    flag_map = {
        "episodes": {"gen-data": "data.episodes", "eval-loop": "eval.episodes"},
        "runs": {"bench-latency": "bench.runs"},
        "warmup": {"bench-latency": "bench.warmup"},
        "observations": {"compare-quant": "compare.observations"},
    }
    for attr, by_cmd in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None and args.command in by_cmd:
            set_dotted(overrides, by_cmd[args.command], value)
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        args.func(args, cfg)
    except CommandFailed as exc:
        return _fail(exc.error_class, str(exc), exc.code)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_USAGE)
    except pipeline.BackendSpecError as exc:
        return _fail("backend_spec", str(exc), EXIT_USAGE)
    except container.ContainerError as exc:
        return _fail("container", f"{type(exc).__name__}: {exc}", EXIT_INPUT)
    except FileNotFoundError as exc:
        return _fail("io", str(exc), EXIT_INPUT)
    except Exception as exc:  # noqa: BLE001 - surfaced as a classified failure
        log.debug("unhandled", exc_info=True)
        return _fail(type(exc).__name__, str(exc), EXIT_CONTRACT)
    return 0


def _fail(error_class: str, message: str, code: int) -> int:
    print(json.dumps({"error_class": error_class, "message": message}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
