import io
import struct

import numpy as np
import pytest

from litevla.container import (
    BadMagicError,
    ContainerError,
    ContainerModel,
    KVType,
    MalformedError,
    MetadataValue,
    MisalignedOffsetError,
    Tensor,
    TruncatedError,
    UnknownDTypeError,
    UnknownKVTypeError,
    UnsupportedVersionError,
    from_bytes,
    read_container,
    to_bytes,
    validate_container,
    write_container,
)
from litevla.quantizer import quantize_tensor

from conftest import read_hex

MINIMAL = read_hex("minimal.hex")
ONE_TENSOR = read_hex("one_tensor.hex")


def minimal_model():
    return ContainerModel({"general.architecture": MetadataValue(KVType.STRING, "litevla-toy-mlp")})


def one_tensor_model():
    return ContainerModel(
        {"general.architecture": "litevla-test", "general.alignment": MetadataValue(KVType.UINT32, 32)},
        [Tensor("w", (0.5 * np.arange(64, dtype=np.float32)).reshape(4, 16))],
    )


def mixed_model():
    rng = np.random.default_rng(0)
    return ContainerModel(
        {
            "a.u32": MetadataValue(KVType.UINT32, 7),
            "a.u64": MetadataValue(KVType.UINT64, 2**40),
            "a.f32": MetadataValue(KVType.FLOAT32, 0.1),
            "a.bool": True,
            "a.str": "héllo",
        },
        [
            Tensor("bias", rng.normal(size=5).astype(np.float32)),
            Tensor("w.q", quantize_tensor(rng.normal(size=(8, 32)))),
            Tensor("t3", rng.normal(size=(2, 3, 4)).astype(np.float32)),
        ],
    )


def test_minimal_golden():
    assert to_bytes(minimal_model()) == MINIMAL
    assert from_bytes(MINIMAL) == minimal_model()
    assert MINIMAL[:24] == b"GGUF" + struct.pack("<IQQ", 3, 0, 1)


def test_one_tensor_golden():
    assert to_bytes(one_tensor_model()) == ONE_TENSOR
    m = from_bytes(ONE_TENSOR)
    assert m == one_tensor_model()
    t = m.tensor("w")
    assert t.shape == (4, 16) and len(t.payload()) == 256
    assert ONE_TENSOR.index(t.payload()) % 32 == 0


@pytest.mark.parametrize("model", [minimal_model, one_tensor_model, mixed_model])
def test_round_trips(model):
    m = model()
    raw = to_bytes(m)
    assert to_bytes(m) == raw
    back = from_bytes(raw)
    assert back == m
    assert to_bytes(back) == raw
    sink = io.BytesIO()
    assert write_container(sink, m) == len(raw)
    assert read_container(io.BytesIO(sink.getvalue())) == m


def test_q4_payload_size_exact():
    m = mixed_model()
    assert len(m.tensor("w.q").payload()) == 8 * 24


def test_truncation_every_offset():
    for golden in (MINIMAL, ONE_TENSOR, to_bytes(mixed_model())):
        for cut in range(len(golden)):
            with pytest.raises(ContainerError):
                from_bytes(golden[:cut])


def test_truncation_mid_payload_names_tensor():
    with pytest.raises(TruncatedError) as exc:
        from_bytes(ONE_TENSOR[:-10])
    assert exc.value.tensor == "w"


def test_bad_magic_and_version():
    with pytest.raises(BadMagicError) as exc:
        from_bytes(b"GGUX" + MINIMAL[4:])
    assert exc.value.offset == 0
    assert "bad magic at offset 0" in str(exc.value)
    with pytest.raises(UnsupportedVersionError):
        from_bytes(MINIMAL[:4] + struct.pack("<I", 2) + MINIMAL[8:])


def test_unknown_kv_tag():
    raw = bytearray(MINIMAL)
    at = 24 + 8 + len("general.architecture")
    raw[at : at + 4] = struct.pack("<I", 9)
    with pytest.raises(UnknownKVTypeError) as exc:
        from_bytes(bytes(raw))
    assert exc.value.offset == at


def test_unknown_dtype_and_misaligned_offset():
    raw = bytearray(ONE_TENSOR)
    info = raw.index(b"\x01\x00\x00\x00\x00\x00\x00\x00w") + 9
    dtype_at = info + 4 + 16
    bad = bytearray(raw)
    bad[dtype_at : dtype_at + 4] = struct.pack("<I", 2)
    with pytest.raises(UnknownDTypeError):
        from_bytes(bytes(bad))
    bad = bytearray(raw)
    bad[dtype_at + 4 : dtype_at + 12] = struct.pack("<Q", 8)
    with pytest.raises(MisalignedOffsetError):
        from_bytes(bytes(bad))


def test_trailing_and_padding_garbage_rejected():
    with pytest.raises(MalformedError):
        from_bytes(ONE_TENSOR + b"\x00")
    raw = bytearray(MINIMAL)
    raw[-1] = 1
    with pytest.raises(MalformedError):
        from_bytes(bytes(raw))


def test_writer_rejects_bad_models():
    with pytest.raises(MalformedError):
        to_bytes(ContainerModel({}, [Tensor("x", np.zeros(2, np.float32)), Tensor("x", np.zeros(2, np.float32))]))
    with pytest.raises(MalformedError):
        to_bytes(ContainerModel({}, [Tensor("n" * 65, np.zeros(2, np.float32))]))


def test_random_corruption_never_crashes():
    golden = to_bytes(mixed_model())
    rng = np.random.default_rng(0)
    for _ in range(3000):
        raw = bytearray(golden)
        for pos in rng.integers(0, len(raw), rng.integers(1, 4)):
            raw[pos] = int(rng.integers(256))
        try:
            m = from_bytes(bytes(raw))
        except ContainerError:
            continue
        assert to_bytes(m) == bytes(raw)


def test_validate_report():
    ok = validate_container(ONE_TENSOR, ["general.architecture"])
    assert ok.ok and ok.model is not None
    bad = validate_container(ONE_TENSOR[:100])
    assert not bad.ok
    assert {c.name for c in bad.checks} >= {"magic", "version", "parse"}
    missing = validate_container(MINIMAL, ["litevla.vocab.v_bins"])
    assert not missing.ok
