"""Reader/writer for a GGUF v3 style container.

Layout (all little-endian)::

    "GGUF" | u32 version=3 | u64 tensor_count | u64 kv_count
    kv_count x   (string key, u32 type, value)
    tensor_count x (string name, u32 n_dims, n_dims x u64 dim, u32 dtype, u64 offset)
    zero padding to a multiple of 32
    tensor payloads, each starting at a multiple of 32 from the data region

Strings are a u64 byte length followed by UTF-8 bytes. Dimensions are stored
innermost first (GGML order), i.e. reversed with respect to numpy shapes.
Supported KV types: uint32 (4), float32 (6), bool (7), string (8),
uint64 (10). Tensor dtypes: F32 (0) and Q4B32 (1000, this package's
private 4-bit block codec).
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import BinaryIO, Iterable, Mapping

import numpy as np

from .quantizer import BLOCK_BYTES, BLOCK_SIZE, BlockAlignmentError, QuantTensor

MAGIC = b"GGUF"
VERSION = 3
ALIGNMENT = 32
MAX_NAME_BYTES = 64
MAX_DIMS = 4


class KVType(IntEnum):
    UINT32 = 4
    FLOAT32 = 6
    BOOL = 7
    STRING = 8
    UINT64 = 10


class DType(IntEnum):
    F32 = 0
    Q4B32 = 1000


# --- errors -------------------------------------------------------------------


class ContainerError(ValueError):
    """Base class; ``offset`` is the byte position the problem was found at."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} at offset {offset}")
        self.offset = offset


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    def __init__(self, message: str, offset: int | None = None, tensor: str | None = None):
        super().__init__(message, offset)
        self.tensor = tensor


class MisalignedOffsetError(ContainerError):
    pass


class UnknownDTypeError(ContainerError):
    pass


class UnknownKVTypeError(ContainerError):
    pass


class MalformedError(ContainerError):
    """Structurally invalid content: bad UTF-8, duplicates, bad dims, layout."""


# --- model types -------------------------------------------------------------------


@dataclass(frozen=True)
class MetadataValue:
    type: KVType
    value: object

    def __post_init__(self):
        t = KVType(self.type)
        v = self.value
        if t == KVType.FLOAT32:
            v = float(np.float32(v))
        elif t == KVType.BOOL:
            if not isinstance(v, (bool, np.bool_)):
                raise TypeError("bool metadata needs a bool")
            v = bool(v)
        elif t == KVType.STRING:
            if not isinstance(v, str):
                raise TypeError("string metadata needs a str")
        else:
            bits = 32 if t == KVType.UINT32 else 64
            if isinstance(v, bool) or int(v) != v or not 0 <= int(v) < 2**bits:
                raise ValueError(f"{v!r} does not fit {t.name}")
            v = int(v)
        object.__setattr__(self, "type", t)
        object.__setattr__(self, "value", v)

    @classmethod
    def infer(cls, value) -> "MetadataValue":
        if isinstance(value, MetadataValue):
            return value
        if isinstance(value, (bool, np.bool_)):
            return cls(KVType.BOOL, value)
        if isinstance(value, str):
            return cls(KVType.STRING, value)
        if isinstance(value, (float, np.floating)):
            return cls(KVType.FLOAT32, value)
        if isinstance(value, (int, np.integer)):
            return cls(KVType.UINT32 if 0 <= value < 2**32 else KVType.UINT64, value)
        raise TypeError(f"unsupported metadata value {value!r}")


@dataclass(eq=False)
class Tensor:
    name: str
    data: np.ndarray | QuantTensor

    @property
    def dtype(self) -> DType:
        return DType.Q4B32 if isinstance(self.data, QuantTensor) else DType.F32

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def payload(self) -> bytes:
        if isinstance(self.data, QuantTensor):
            return self.data.to_bytes()
        return np.ascontiguousarray(self.data, dtype="<f4").tobytes()

    def array(self) -> np.ndarray:
        """Tensor values as float64 (dequantized for Q4B32)."""
        if isinstance(self.data, QuantTensor):
            from .quantizer import dequantize_tensor

            return dequantize_tensor(self.data)
        return np.asarray(self.data, dtype=np.float64)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (self.name, self.dtype, self.shape) == (other.name, other.dtype, other.shape) and self.payload() == other.payload()


@dataclass(eq=False)
class ContainerModel:
    metadata: dict[str, MetadataValue] = field(default_factory=dict)
    tensors: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        self.metadata = {k: MetadataValue.infer(v) for k, v in self.metadata.items()}
        self.tensors = [t if isinstance(t, Tensor) else Tensor(*t) for t in self.tensors]

    def tensor(self, name: str) -> Tensor:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    def value(self, key: str):
        return self.metadata[key].value

    def __eq__(self, other):
        if not isinstance(other, ContainerModel):
            return NotImplemented
        return list(self.metadata.items()) == list(other.metadata.items()) and self.tensors == other.tensors


def payload_size(dtype: DType, shape: Iterable[int]) -> int:
    n = math.prod(shape)
    if dtype == DType.F32:
        return 4 * n
    if n % BLOCK_SIZE:
        raise BlockAlignmentError(f"Q4B32 tensor with {n} elements is not block-aligned")
    return BLOCK_BYTES * (n // BLOCK_SIZE)


def _align(n: int) -> int:
    return (n + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


# --- writing ---------------------------------------------------------------------


def _pack_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<Q", len(raw)) + raw


def _pack_value(mv: MetadataValue) -> bytes:
    head = struct.pack("<I", mv.type)
    if mv.type == KVType.UINT32:
        return head + struct.pack("<I", mv.value)
    if mv.type == KVType.UINT64:
        return head + struct.pack("<Q", mv.value)
    if mv.type == KVType.FLOAT32:
        return head + struct.pack("<f", mv.value)
    if mv.type == KVType.BOOL:
        return head + struct.pack("<B", 1 if mv.value else 0)
    return head + _pack_string(mv.value)


def to_bytes(model: ContainerModel) -> bytes:
    names = [t.name for t in model.tensors]
    if len(set(names)) != len(names):
        dup = next(n for n in names if names.count(n) > 1)
        raise MalformedError(f"duplicate tensor name {dup!r}")
    out = bytearray(MAGIC)
    out += struct.pack("<IQQ", VERSION, len(model.tensors), len(model.metadata))
    for key, mv in model.metadata.items():
        out += _pack_string(key) + _pack_value(mv)

    offset = 0
    payloads = []
    for t in model.tensors:
        raw_name = t.name.encode("utf-8")
        if not raw_name or len(raw_name) > MAX_NAME_BYTES:
            raise MalformedError(f"tensor name {t.name!r} must be 1..{MAX_NAME_BYTES} bytes")
        if t.dtype not in (DType.F32, DType.Q4B32):
            raise UnknownDTypeError(f"unsupported dtype {t.dtype}")
        if not 1 <= len(t.shape) <= MAX_DIMS:
            raise MalformedError(f"tensor {t.name!r} has {len(t.shape)} dims, need 1..{MAX_DIMS}")
        payload = t.payload()
        if len(payload) != payload_size(t.dtype, t.shape):
            raise MalformedError(f"tensor {t.name!r} payload size mismatch")
        out += _pack_string(t.name)
        out += struct.pack("<I", len(t.shape))
        out += struct.pack(f"<{len(t.shape)}Q", *reversed(t.shape))
        out += struct.pack("<IQ", t.dtype, offset)
        payloads.append((offset, payload))
        offset = _align(offset + len(payload))

    data_start = _align(len(out))
    out += bytes(data_start - len(out))
    for off, payload in payloads:
        out += bytes(data_start + off - len(out))
        out += payload
    return bytes(out)


def write_container(sink: BinaryIO, model: ContainerModel) -> int:
    data = to_bytes(model)
    sink.write(data)
    return len(data)


def save(path, model: ContainerModel) -> int:
    with open(path, "wb") as fh:
        return write_container(fh, model)


# --- reading ---------------------------------------------------------------------


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str, tensor: str | None = None) -> bytes:
        if n > len(self.data) - self.pos:
            raise TruncatedError(f"truncated while reading {what}", self.pos, tensor)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        st = struct.Struct(fmt)
        return st.unpack(self.take(st.size, what))

    def string(self, what: str) -> str:
        start = self.pos
        (n,) = self.unpack("<Q", f"{what} length")
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedError(f"{what} is not valid UTF-8", start) from exc


def from_bytes(data: bytes) -> ContainerModel:
    cur = _Cursor(bytes(data))
    if cur.take(4, "magic") != MAGIC:
        raise BadMagicError("bad magic", 0)
    (version,) = cur.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version} (only {VERSION})", 4)
    n_tensors, n_kv = cur.unpack("<QQ", "header counts")

    metadata: dict[str, MetadataValue] = {}
    for _ in range(n_kv):
        key_at = cur.pos
        key = cur.string("metadata key")
        if key in metadata:
            raise MalformedError(f"duplicate metadata key {key!r}", key_at)
        type_at = cur.pos
        (tag,) = cur.unpack("<I", f"type of {key!r}")
        if tag not in KVType._value2member_map_:
            raise UnknownKVTypeError(f"unknown metadata type {tag} for {key!r}", type_at)
        tag = KVType(tag)
        if tag == KVType.UINT32:
            (v,) = cur.unpack("<I", key)
        elif tag == KVType.UINT64:
            (v,) = cur.unpack("<Q", key)
        elif tag == KVType.FLOAT32:
            (v,) = cur.unpack("<f", key)
        elif tag == KVType.BOOL:
            (b,) = cur.unpack("<B", key)
            if b > 1:
                raise MalformedError(f"bool {key!r} has byte value {b}", cur.pos - 1)
            v = bool(b)
        else:
            v = cur.string(f"value of {key!r}")
        metadata[key] = MetadataValue(tag, v)

    infos = []
    expected_offset = 0
    for _ in range(n_tensors):
        info_at = cur.pos
        name = cur.string("tensor name")
        raw_len = len(name.encode("utf-8"))
        if not 1 <= raw_len <= MAX_NAME_BYTES:
            raise MalformedError(f"tensor name length {raw_len} outside 1..{MAX_NAME_BYTES}", info_at)
        if any(i[0] == name for i in infos):
            raise MalformedError(f"duplicate tensor name {name!r}", info_at)
        dims_at = cur.pos
        (n_dims,) = cur.unpack("<I", f"n_dims of {name!r}")
        if not 1 <= n_dims <= MAX_DIMS:
            raise MalformedError(f"tensor {name!r} has {n_dims} dims", dims_at)
        dims = cur.unpack(f"<{n_dims}Q", f"dims of {name!r}")
        dtype_at = cur.pos
        dtype, offset = cur.unpack("<IQ", f"dtype/offset of {name!r}")
        if dtype not in DType._value2member_map_:
            raise UnknownDTypeError(f"unknown dtype {dtype} for {name!r}", dtype_at)
        dtype = DType(dtype)
        if offset % ALIGNMENT:
            raise MisalignedOffsetError(f"tensor {name!r} offset {offset} not a multiple of {ALIGNMENT}", dtype_at + 4)
        shape = tuple(reversed(dims))
        try:
            size = payload_size(dtype, shape)
        except BlockAlignmentError as exc:
            raise MalformedError(str(exc), dims_at) from exc
        if offset != expected_offset:
            raise MalformedError(f"tensor {name!r} offset {offset} breaks the packed layout (expected {expected_offset})", dtype_at + 4)
        expected_offset = _align(offset + size)
        infos.append((name, dtype, shape, offset, size))

    pad_at = cur.pos
    data_start = _align(cur.pos)
    if any(cur.take(data_start - cur.pos, "header padding")):
        raise MalformedError("nonzero header padding", pad_at)

    tensors = []
    for name, dtype, shape, offset, size in infos:
        gap_at = cur.pos
        gap = cur.take(data_start + offset - cur.pos, f"padding before {name!r}", tensor=name)
        if any(gap):
            raise MalformedError(f"nonzero padding before {name!r}", gap_at)
        raw = cur.take(size, f"payload of tensor {name!r}", tensor=name)
        if dtype == DType.F32:
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        else:
            try:
                arr = QuantTensor.from_bytes(shape, raw)
            except ValueError as exc:
                raise MalformedError(f"invalid block in {name!r}: {exc}", data_start + offset) from exc
            if np.any(~np.isfinite(arr.scale)) or np.any(~np.isfinite(arr.base)):
                raise MalformedError(f"invalid block header in {name!r}", data_start + offset)
        tensors.append(Tensor(name, arr))
    if cur.pos != len(cur.data):
        raise MalformedError(f"{len(cur.data) - cur.pos} trailing bytes", cur.pos)
    return ContainerModel(metadata, tensors)


def read_container(source: BinaryIO | bytes) -> ContainerModel:
    data = source if isinstance(source, (bytes, bytearray, memoryview)) else source.read()
    return from_bytes(bytes(data))


def load(path) -> ContainerModel:
    with open(path, "rb") as fh:
        return read_container(fh)


# --- validation ------------------------------------------------------------------


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list[Check]
    model: ContainerModel | None = None

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "checks": [c.__dict__ for c in self.checks]}


def validate_container(source: BinaryIO | bytes, required_keys: Iterable[str] = ()) -> ValidationReport:
    """Per-check pass/fail report; never raises on malformed input."""
    data = source if isinstance(source, (bytes, bytearray, memoryview)) else source.read()
    data = bytes(data)
    checks = [
        Check("magic", data[:4] == MAGIC, f"found {data[:4]!r}"),
        Check("version", len(data) >= 8 and struct.unpack_from("<I", data, 4)[0] == VERSION),
    ]
    try:
        model = from_bytes(data)
    except ContainerError as exc:
        checks.append(Check("parse", False, f"{type(exc).__name__}: {exc}"))
        return ValidationReport(checks)
    checks.append(Check("parse", True, f"{len(model.tensors)} tensors, {len(model.metadata)} metadata keys"))
    checks.append(Check("alignment", True, f"payload offsets are multiples of {ALIGNMENT}"))
    checks.append(Check("round_trip", to_bytes(model) == data, "write(read(bytes)) == bytes"))
    missing = [k for k in required_keys if k not in model.metadata]
    if required_keys:
        checks.append(Check("required_metadata", not missing, f"missing: {missing}" if missing else "all present"))
    return ValidationReport(checks, model)
