"""Fail-stop parser for the single-line action grammar.

    line   := "ACTION" SP uint SP uint [LF]
    uint   := "0" | [1-9][0-9]*

At most 64 bytes per line (LF included). The two integers are the v-bin and
w-bin indices. Anything else is rejected with :class:`ActionRejected`; a
rejected line never yields a command.
"""

from __future__ import annotations

from typing import Sequence

from .action_space import (
    DEFAULT_VOCAB,
    TOKENS_PER_COMMAND,
    ActionCommand,
    ActionTokenSeq,
    ActionVocabulary,
    decode_tokens,
)

MAX_LINE_BYTES = 64
KEYWORD = b"ACTION"

SYNTAX = "syntax"
RANGE = "range"
LENGTH = "length"


class ActionRejected(ValueError):
    """Structured rejection of an action line.

    Attributes:
        error_class: one of ``"syntax"``, ``"range"``, ``"length"``.
        offset: byte offset of the first offending byte.
        field: index of the space-separated field at fault (0 = keyword),
            or ``None`` when not attributable to one field.
    """

    def __init__(self, error_class: str, offset: int, detail: str, field: int | None = None):
        where = f"offset {offset}" if field is None else f"offset {offset}, token {field}"
        super().__init__(f"{error_class} error at {where}: {detail}")
        self.error_class = error_class
        self.offset = offset
        self.field = field
        self.detail = detail


def _as_bytes(text) -> bytes:
    if isinstance(text, str):
        return text.encode("utf-8", "surrogatepass")
    return bytes(text)


def _scan_uint(raw: bytes, pos: int, end: int, field: int) -> tuple[int, int]:
    start = pos
    while pos < end and 0x30 <= raw[pos] <= 0x39:
        pos += 1
    if pos == start:
        raise ActionRejected(SYNTAX, start, "expected a decimal integer", field)
    if raw[start] == 0x30 and pos - start > 1:
        raise ActionRejected(SYNTAX, start + 1, "leading zero", field)
    return int(raw[start:pos]), pos


def parse_tokens(text, vocab: ActionVocabulary = DEFAULT_VOCAB) -> ActionTokenSeq:
    """Validate one action line and return its ``(v_bin, w_bin)`` tokens."""
    raw = _as_bytes(text)
    if len(raw) > MAX_LINE_BYTES:
        raise ActionRejected(LENGTH, MAX_LINE_BYTES, f"line is {len(raw)} bytes, limit {MAX_LINE_BYTES}")
    end = len(raw) - 1 if raw.endswith(b"\n") else len(raw)

    for i, expected in enumerate(KEYWORD):
        if i >= end or raw[i] != expected:
            raise ActionRejected(SYNTAX, i, "expected keyword 'ACTION'", 0)
    pos = len(KEYWORD)
    values, starts = [], []
    for field in range(1, TOKENS_PER_COMMAND + 1):
        if pos >= end or raw[pos] != 0x20:
            raise ActionRejected(SYNTAX, pos, "expected a single space", field)
        pos += 1
        starts.append(pos)
        value, pos = _scan_uint(raw, pos, end, field)
        values.append(value)
    if pos != end:
        raise ActionRejected(SYNTAX, pos, "unexpected trailing bytes")

    for i, (value, start) in enumerate(zip(values, starts)):
        if value >= vocab.bins_at(i):
            raise ActionRejected(RANGE, start, f"token {value} >= bin count {vocab.bins_at(i)}", i + 1)
    return ActionTokenSeq(values)


def parse_action_line(text, vocab: ActionVocabulary = DEFAULT_VOCAB) -> ActionCommand:
    return decode_tokens(parse_tokens(text, vocab), vocab)


def format_action(tokens: ActionTokenSeq | Sequence[int]) -> str:
    toks = list(tokens)
    if len(toks) != TOKENS_PER_COMMAND:
        raise ValueError(f"an action line carries exactly {TOKENS_PER_COMMAND} tokens, got {len(toks)}")
    if any(int(t) < 0 for t in toks):
        raise ValueError("tokens must be non-negative")
    return f"ACTION {int(toks[0])} {int(toks[1])}\n"
