"""Discrete action vocabulary and the token <-> velocity codec.

A command is exactly two tokens: a linear-velocity bin followed by an
angular-velocity bin. Token sequences hold *per-position bin indices*;
the model's output vocabulary lays the v-bins out first and the w-bins
after them, so the global id of a w-token is ``v_bin_count + bin``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

TOKENS_PER_COMMAND = 2
DEFAULT_MAX_TOKENS = 12


class DecodeError(ValueError):
    """Raised when a token sequence cannot be mapped to a command.

    ``position`` is the index of the offending entry.
    """

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (position {position})")
        self.position = position


@dataclass(frozen=True)
class ActionCommand:
    linear_velocity: float
    angular_velocity: float

    def is_finite(self) -> bool:
        return math.isfinite(self.linear_velocity) and math.isfinite(self.angular_velocity)


@dataclass(frozen=True)
class ActionVocabulary:
    v_bin_count: int = 32
    w_bin_count: int = 32
    v_range: tuple[float, float] = (-0.5, 0.5)
    w_range: tuple[float, float] = (-1.5, 1.5)

    def __post_init__(self):
        if self.v_bin_count < 2 or self.w_bin_count < 2:
            raise ValueError("bin counts must be >= 2")
        object.__setattr__(self, "v_range", (float(self.v_range[0]), float(self.v_range[1])))
        object.__setattr__(self, "w_range", (float(self.w_range[0]), float(self.w_range[1])))
        for name, (lo, hi) in (("v_range", self.v_range), ("w_range", self.w_range)):
            if not (math.isfinite(lo) and math.isfinite(hi)) or not lo < hi:
                raise ValueError(f"{name} must satisfy min < max, got {(lo, hi)}")

    @property
    def size(self) -> int:
        """Size of the model's output token space."""
        return self.v_bin_count + self.w_bin_count

    @property
    def v_width(self) -> float:
        return (self.v_range[1] - self.v_range[0]) / self.v_bin_count

    @property
    def w_width(self) -> float:
        return (self.w_range[1] - self.w_range[0]) / self.w_bin_count

    def bins_at(self, position: int) -> int:
        return self.v_bin_count if position == 0 else self.w_bin_count

    def global_id(self, position: int, token: int) -> int:
        """Map a per-position bin index to its id in the model vocabulary."""
        return token if position == 0 else self.v_bin_count + token

    def position_slice(self, position: int) -> slice:
        if position == 0:
            return slice(0, self.v_bin_count)
        return slice(self.v_bin_count, self.size)


@dataclass(frozen=True)
class ActionTokenSeq:
    tokens: tuple[int, ...]
    max_len: int = DEFAULT_MAX_TOKENS

    def __init__(self, tokens: Sequence[int] = (), max_len: int = DEFAULT_MAX_TOKENS):
        toks = tuple(int(t) for t in tokens)
        if max_len < 1:
            raise ValueError("max_len must be positive")
        if len(toks) > max_len:
            raise ValueError(f"{len(toks)} tokens exceed max_len={max_len}")
        if any(t < 0 for t in toks):
            raise ValueError("token ids must be non-negative")
        object.__setattr__(self, "tokens", toks)
        object.__setattr__(self, "max_len", max_len)

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def __getitem__(self, i):
        return self.tokens[i]


DEFAULT_VOCAB = ActionVocabulary()


def bin_midpoint(index: int, count: int, lo: float, hi: float) -> float:
    return lo + (index + 0.5) * (hi - lo) / count


def value_to_bin(value: float, count: int, lo: float, hi: float) -> int:
    clamped = min(max(value, lo), hi)
    idx = math.floor((clamped - lo) / ((hi - lo) / count))
    # top edge (and any float overshoot) belongs to the last bin
    return min(max(idx, 0), count - 1)


def decode_tokens(tokens: ActionTokenSeq | Sequence[int], vocab: ActionVocabulary = DEFAULT_VOCAB) -> ActionCommand:
    toks = list(tokens)
    if len(toks) != TOKENS_PER_COMMAND:
        raise DecodeError(
            f"expected {TOKENS_PER_COMMAND} tokens, got {len(toks)}",
            position=min(len(toks), TOKENS_PER_COMMAND),
        )
    for pos, tok in enumerate(toks):
        if not 0 <= tok < vocab.bins_at(pos):
            kind = "v" if pos == 0 else "w"
            raise DecodeError(f"{kind}-token {tok} outside [0, {vocab.bins_at(pos)})", position=pos)
    v = bin_midpoint(toks[0], vocab.v_bin_count, *vocab.v_range)
    w = bin_midpoint(toks[1], vocab.w_bin_count, *vocab.w_range)
    return ActionCommand(v, w)


def encode_command(cmd: ActionCommand, vocab: ActionVocabulary = DEFAULT_VOCAB) -> ActionTokenSeq:
    if not cmd.is_finite():
        raise ValueError(f"cannot encode non-finite command {cmd}")
    v_tok = value_to_bin(cmd.linear_velocity, vocab.v_bin_count, *vocab.v_range)
    w_tok = value_to_bin(cmd.angular_velocity, vocab.w_bin_count, *vocab.w_range)
    return ActionTokenSeq((v_tok, w_tok))
