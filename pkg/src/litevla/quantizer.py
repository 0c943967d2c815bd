"""Blockwise 4-bit weight quantization (Q4B32).

Each run of 32 consecutive row-major elements becomes one block holding an
f32 scale ``s``, an f32 base ``m`` and 32 unsigned 4-bit codes::

    m = min(x),  s = (max(x) - m) / 15,  code = clamp(floor((x - m) / s + 0.5), 0, 15)
    x_hat = m + s * code

Packed block layout (24 bytes, little-endian): f32 scale, f32 base, then 16
code bytes with element ``2k`` in the low nibble of byte ``k`` and element
``2k + 1`` in the high nibble.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .policy import PolicyParams, greedy_decode_many

log = logging.getLogger(__name__)

BLOCK_SIZE = 32
BLOCK_BYTES = 24
CODE_MAX = 15

_PACKED = np.dtype([("scale", "<f4"), ("base", "<f4"), ("codes", "u1", (BLOCK_SIZE // 2,))])
assert _PACKED.itemsize == BLOCK_BYTES


class BlockAlignmentError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class QuantBlock:
    scale: float
    base: float
    codes: np.ndarray  # (32,) uint8

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.uint8)
        if codes.shape != (BLOCK_SIZE,) or codes.max(initial=0) > CODE_MAX:
            raise ValueError("a block holds 32 codes in [0, 15]")
        if not self.scale >= 0:
            raise ValueError("scale must be non-negative")
        if self.scale == 0 and codes.any():
            raise ValueError("a zero-scale block must have all-zero codes")
        object.__setattr__(self, "codes", codes)

    def __eq__(self, other):
        if not isinstance(other, QuantBlock):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def to_bytes(self) -> bytes:
        return _pack(
            np.array([self.scale], dtype=np.float32),
            np.array([self.base], dtype=np.float32),
            self.codes[None],
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "QuantBlock":
        if len(raw) != BLOCK_BYTES:
            raise ValueError(f"a packed block is {BLOCK_BYTES} bytes, got {len(raw)}")
        s, m, c = _unpack(raw, 1)
        return cls(float(s[0]), float(m[0]), c[0])


def _quantize_rows(rows: np.ndarray):
    """Vectorized block quantization of an ``(n, 32)`` float array."""
    rows = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(rows)):
        raise ValueError("cannot quantize non-finite values")
    lo = rows.min(axis=1)
    hi = rows.max(axis=1)
    base = lo.astype(np.float32)
    scale = ((hi - base.astype(np.float64)) / CODE_MAX).astype(np.float32)
    scale[hi == lo] = 0.0
    s64 = scale.astype(np.float64)
    safe = np.where(s64 > 0, s64, 1.0)
    codes = np.floor((rows - base.astype(np.float64)[:, None]) / safe[:, None] + 0.5)
    codes = np.clip(codes, 0, CODE_MAX).astype(np.uint8)
    codes[s64 == 0] = 0
    return scale, base, codes


def _dequantize_rows(scale: np.ndarray, base: np.ndarray, codes: np.ndarray) -> np.ndarray:
    return base.astype(np.float64)[:, None] + scale.astype(np.float64)[:, None] * codes.astype(np.float64)


def quantize_block(values: Sequence[float]) -> QuantBlock:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (BLOCK_SIZE,):
        raise ValueError(f"a block is exactly {BLOCK_SIZE} values, got shape {arr.shape}")
    s, m, c = _quantize_rows(arr[None])
    return QuantBlock(float(s[0]), float(m[0]), c[0])


def dequantize_block(block: QuantBlock) -> np.ndarray:
    return _dequantize_rows(np.float32([block.scale]), np.float32([block.base]), block.codes[None])[0]


def _pack(scale: np.ndarray, base: np.ndarray, codes: np.ndarray) -> bytes:
    out = np.zeros(len(scale), dtype=_PACKED)
    out["scale"] = scale
    out["base"] = base
    out["codes"] = codes[:, 0::2] | (codes[:, 1::2] << 4)
    return out.tobytes()


def _unpack(raw: bytes, n_blocks: int):
    arr = np.frombuffer(raw, dtype=_PACKED, count=n_blocks)
    packed = arr["codes"]
    codes = np.empty((n_blocks, BLOCK_SIZE), dtype=np.uint8)
    codes[:, 0::2] = packed & 0x0F
    codes[:, 1::2] = packed >> 4
    return arr["scale"].copy(), arr["base"].copy(), codes


class QuantTensor:
    """Row-major sequence of Q4B32 blocks plus the logical shape."""

    def __init__(self, shape: Sequence[int], scale: np.ndarray, base: np.ndarray, codes: np.ndarray):
        self.shape = tuple(int(d) for d in shape)
        n = math.prod(self.shape)
        if n % BLOCK_SIZE:
            raise BlockAlignmentError(_alignment_message(self.shape))
        nb = n // BLOCK_SIZE
        self.scale = np.asarray(scale, dtype=np.float32).reshape(nb)
        self.base = np.asarray(base, dtype=np.float32).reshape(nb)
        self.codes = np.asarray(codes, dtype=np.uint8).reshape(nb, BLOCK_SIZE)
        if np.any(self.scale < 0) or self.codes.max(initial=0) > CODE_MAX:
            raise ValueError("invalid block contents")

    @property
    def n_blocks(self) -> int:
        return len(self.scale)

    @property
    def nbytes(self) -> int:
        return self.n_blocks * BLOCK_BYTES

    def blocks(self) -> list[QuantBlock]:
        return [QuantBlock(float(s), float(m), c) for s, m, c in zip(self.scale, self.base, self.codes)]

    def to_bytes(self) -> bytes:
        return _pack(self.scale, self.base, self.codes)

    @classmethod
    def from_bytes(cls, shape: Sequence[int], raw: bytes) -> "QuantTensor":
        n = math.prod(shape)
        if n % BLOCK_SIZE:
            raise BlockAlignmentError(_alignment_message(tuple(shape)))
        nb = n // BLOCK_SIZE
        if len(raw) != nb * BLOCK_BYTES:
            raise ValueError(f"expected {nb * BLOCK_BYTES} payload bytes, got {len(raw)}")
        return cls(shape, *_unpack(raw, nb))

    def __eq__(self, other):
        if not isinstance(other, QuantTensor):
            return NotImplemented
        return self.shape == other.shape and self.to_bytes() == other.to_bytes()

    def __repr__(self):
        return f"QuantTensor(shape={self.shape}, blocks={self.n_blocks})"


def _alignment_message(shape) -> str:
    return (
        f"tensor of shape {shape} has {math.prod(shape)} elements, not a multiple of {BLOCK_SIZE}; "
        "choose block-aligned dimensions"
    )


def quantize_tensor(tensor) -> QuantTensor:
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.size % BLOCK_SIZE:
        raise BlockAlignmentError(_alignment_message(arr.shape))
    s, m, c = _quantize_rows(arr.reshape(-1, BLOCK_SIZE))
    return QuantTensor(arr.shape, s, m, c)


def dequantize_tensor(qt: QuantTensor) -> np.ndarray:
    return _dequantize_rows(qt.scale, qt.base, qt.codes).reshape(qt.shape)


# --- policy-level helpers ---------------------------------------------------

QUANTIZED_FIELDS = ("W1", "W2", "goal_embedding", "prev_token_embedding")


@dataclass
class QuantSummary:
    max_abs_error: dict[str, float]
    skipped: dict[str, str]

    def lines(self) -> list[str]:
        out = [f"{name}: max |x - x_hat| = {err:.3e}" for name, err in self.max_abs_error.items()]
        out += [f"{name}: kept full precision ({why})" for name, why in self.skipped.items()]
        return out


def quantize_policy(params: PolicyParams) -> tuple[PolicyParams, QuantSummary]:
    """Quantize-dequantize the weight matrices and embedding tables.

    A LoRA adapter is merged into ``W1`` first. Tables whose element count is
    not a multiple of 32 stay full precision and are listed in the summary.
    Biases are never quantized. The returned params are frozen.
    """
    out = params.merged()
    errors, skipped = {}, {}
    for name in QUANTIZED_FIELDS:
        arr = getattr(out, name)
        if arr.size % BLOCK_SIZE:
            skipped[name] = f"{arr.size} elements not block-aligned"
            continue
        deq = dequantize_tensor(quantize_tensor(arr))
        errors[name] = float(np.max(np.abs(deq - arr)))
        setattr(out, name, deq)
    summary = QuantSummary(errors, skipped)
    for line in summary.lines():
        log.info("quantize_policy %s", line)
    return out.freeze(), summary


@dataclass
class AgreementReport:
    agreement: float
    n: int
    disagreements: list[dict]


def argmax_agreement(params_fp: PolicyParams, params_q: PolicyParams, observations: Iterable, vocab=None) -> AgreementReport:
    """Fraction of observations whose greedy decodes match token-for-token."""
    obs = list(observations)
    if not obs:
        raise ValueError("need at least one observation")
    a = greedy_decode_many(params_fp, obs, vocab)
    b = greedy_decode_many(params_q, obs, vocab)
    same = np.all(a == b, axis=1)
    bad = [
        {"index": int(i), "fp": a[i].tolist(), "quantized": b[i].tolist()}
        for i in np.flatnonzero(~same)
    ]
    return AgreementReport(float(same.mean()), len(obs), bad)
