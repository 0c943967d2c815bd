"""Regex oracle and random line generator for the action-line parser."""

import re

import numpy as np

from litevla.parser import ActionRejected, parse_tokens

LINE_RE = re.compile(rb"\AACTION (0|[1-9][0-9]*) (0|[1-9][0-9]*)\n?\Z")


def oracle(raw: bytes, v_bins=32, w_bins=32):
    """Expected tokens, or None when the line must be rejected."""
    if len(raw) > 64:
        return None
    m = LINE_RE.match(raw)
    if m is None:
        return None
    v, w = int(m.group(1)), int(m.group(2))
    if v >= v_bins or w >= w_bins:
        return None
    return [v, w]


_ALPHABET = np.frombuffer(b"ACTION 0123456789\n\r\t-+ x", dtype=np.uint8)


def random_lines(n: int, seed: int):
    """Mix of uniform random bytes, grammar-alphabet noise and mutated valid lines."""
    rng = np.random.default_rng(seed)
    kinds = rng.integers(0, 3, n)
    lengths = rng.integers(0, 72, n)
    pool = rng.integers(0, 256, int(lengths.sum()) + 1, dtype=np.uint8).tobytes()
    alpha = _ALPHABET[rng.integers(0, len(_ALPHABET), int(lengths.sum()) + 1)].tobytes()
    pos = 0
    for kind, length in zip(kinds, lengths):
        if kind == 0:
            yield pool[pos : pos + length]
        elif kind == 1:
            yield b"ACTION " + alpha[pos : pos + length // 4]
        else:
            line = bytearray(b"ACTION %d %d\n" % (rng.integers(0, 40), rng.integers(0, 40)))
            for _ in range(rng.integers(0, 3)):
                op = rng.integers(3)
                at = int(rng.integers(0, len(line) + 1))
                if op == 0 and line:
                    del line[min(at, len(line) - 1)]
                elif op == 1:
                    line.insert(at, int(alpha[pos % len(alpha)]))
                elif line:
                    line[min(at, len(line) - 1)] = int(pool[pos % len(pool)])
            yield bytes(line)
        pos += length


def check_lines(lines) -> tuple[int, int, int]:
    """Return (lines checked, accepted, mismatches against the oracle)."""
    n = accepted = bad = 0
    for raw in lines:
        n += 1
        expected = oracle(raw)
        try:
            got = list(parse_tokens(raw))
        except ActionRejected as exc:
            got = None
            if exc.error_class not in ("syntax", "range", "length") or not 0 <= exc.offset <= 64:
                bad += 1
                continue
        accepted += got is not None
        bad += got != expected
    return n, accepted, bad
