import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from litevla.action_space import (
    DEFAULT_VOCAB,
    ActionCommand,
    ActionTokenSeq,
    ActionVocabulary,
    DecodeError,
    decode_tokens,
    encode_command,
)


def brute_force_edges(count, lo, hi):
    # bin edges by repeated addition of the width, independent of the midpoint formula
    width = (hi - lo) / count
    edges = [lo]
    for _ in range(count):
        edges.append(edges[-1] + width)
    return edges


def test_v_token_zero_midpoint():
    assert decode_tokens([0, 16]).linear_velocity == pytest.approx(-0.484375, abs=1e-15)


def test_midpoints_match_enumerated_edges():
    edges = brute_force_edges(32, -0.5, 0.5)
    for i in range(32):
        cmd = decode_tokens([i, 0])
        assert cmd.linear_velocity == pytest.approx((edges[i] + edges[i + 1]) / 2, abs=1e-12)
        assert edges[i] < cmd.linear_velocity < edges[i + 1]


def test_two_bin_vocab():
    vocab = ActionVocabulary(2, 2, (-1.0, 1.0), (-1.0, 1.0))
    assert decode_tokens([0, 0], vocab).linear_velocity == -0.5
    assert decode_tokens([1, 0], vocab).linear_velocity == 0.5


def test_wrong_length_reports_position():
    with pytest.raises(DecodeError) as exc:
        decode_tokens([1, 2, 3])
    assert exc.value.position == 2
    with pytest.raises(DecodeError) as exc:
        decode_tokens([1])
    assert exc.value.position == 1


def test_out_of_range_token_reports_position():
    with pytest.raises(DecodeError) as exc:
        decode_tokens([3, 32])
    assert exc.value.position == 1
    with pytest.raises(DecodeError) as exc:
        decode_tokens([40, 0])
    assert exc.value.position == 0


def test_encode_decode_exhaustive():
    for v in range(32):
        for w in range(32):
            assert list(encode_command(decode_tokens([v, w]))) == [v, w]


def test_top_edge_and_clamp():
    assert list(encode_command(ActionCommand(0.5, 1.5))) == [31, 31]
    assert list(encode_command(ActionCommand(9.0, -9.0))) == [31, 0]


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        encode_command(ActionCommand(math.nan, 0.0))
    with pytest.raises(ValueError):
        encode_command(ActionCommand(0.0, math.inf))


def test_vocabulary_validation():
    assert DEFAULT_VOCAB.size == 64
    with pytest.raises(ValueError):
        ActionVocabulary(1, 32)
    with pytest.raises(ValueError):
        ActionVocabulary(32, 32, (0.5, 0.5))


def test_token_seq_invariants():
    with pytest.raises(ValueError):
        ActionTokenSeq(list(range(13)))
    with pytest.raises(ValueError):
        ActionTokenSeq([-1, 0])
    assert list(ActionTokenSeq([1, 2])) == [1, 2]


finite = st.floats(-10, 10, allow_nan=False)


@given(finite, finite)
def test_quantization_error_bound(v, w):
    vocab = DEFAULT_VOCAB
    cmd = decode_tokens(encode_command(ActionCommand(v, w)))
    cv, cw = np.clip(v, *vocab.v_range), np.clip(w, *vocab.w_range)
    assert abs(cmd.linear_velocity - cv) <= vocab.v_width / 2 + 1e-12
    assert abs(cmd.angular_velocity - cw) <= vocab.w_width / 2 + 1e-12
    assert vocab.v_range[0] < cmd.linear_velocity < vocab.v_range[1]
    assert vocab.w_range[0] < cmd.angular_velocity < vocab.w_range[1]
