import pytest
from hypothesis import given
from hypothesis import strategies as st

from litevla.action_space import ActionVocabulary
from litevla.parser import ActionRejected, format_action, parse_action_line, parse_tokens

from parser_oracle import check_lines, oracle, random_lines


def test_example_line():
    cmd = parse_action_line("ACTION 16 15\n")
    assert cmd.linear_velocity == pytest.approx(0.015625, abs=1e-15)
    assert cmd.angular_velocity == pytest.approx(-0.046875, abs=1e-15)


def test_range_error_token_one():
    with pytest.raises(ActionRejected) as exc:
        parse_action_line("ACTION 99 0")
    assert exc.value.error_class == "range"
    assert exc.value.field == 1
    assert exc.value.offset == 7


def test_range_error_second_token():
    with pytest.raises(ActionRejected) as exc:
        parse_tokens("ACTION 1 32", ActionVocabulary())
    assert (exc.value.error_class, exc.value.field, exc.value.offset) == ("range", 2, 9)


def test_keyword_case_sensitive():
    with pytest.raises(ActionRejected) as exc:
        parse_action_line("action 1 2")
    assert exc.value.error_class == "syntax"
    assert exc.value.offset == 0


@pytest.mark.parametrize(
    "line, offset",
    [
        ("ACTION  1 2", 7),
        ("ACTION 01 2", 8),
        ("ACTION 1 2 ", 10),
        ("ACTION 1\t2", 8),
        ("ACTION 1 2\r\n", 10),
        ("ACTION 1 2\n\n", 10),
        ("ACTION -1 2", 7),
        ("ACTIO", 5),
        ("", 0),
    ],
)
def test_syntax_offsets(line, offset):
    with pytest.raises(ActionRejected) as exc:
        parse_tokens(line)
    assert exc.value.error_class == "syntax"
    assert exc.value.offset == offset


def test_length_limit():
    line = "ACTION 1 " + "0" * 60
    with pytest.raises(ActionRejected) as exc:
        parse_tokens(line)
    assert exc.value.error_class == "length"
    ok = "ACTION 1 2"
    assert len(ok) <= 64 and list(parse_tokens(ok)) == [1, 2]


def test_format():
    assert format_action([0, 0]) == "ACTION 0 0\n"
    for bad in ([1], [1, 2, 3]):
        with pytest.raises(ValueError):
            format_action(bad)


def test_exhaustive_round_trip():
    for v in range(32):
        for w in range(32):
            line = format_action([v, w])
            assert list(parse_tokens(line)) == [v, w]
            assert format_action(parse_tokens(line.rstrip("\n"))) == line


def test_random_lines_match_oracle():
    n, accepted, bad = check_lines(random_lines(50_000, seed=1))
    assert bad == 0
    assert accepted > 0


@given(st.binary(max_size=80))
def test_total_on_bytes(raw):
    try:
        got = list(parse_tokens(raw))
    except ActionRejected:
        got = None
    assert got == oracle(raw)


@given(st.text(max_size=40))
def test_total_on_text(text):
    try:
        parse_tokens(text)
    except ActionRejected:
        pass
