from pathlib import Path

import pytest

from litevla import pipeline
from litevla.config import load_config
from litevla.quantizer import quantize_policy

FIXTURES = Path(__file__).parent / "fixtures"


def read_hex(name: str) -> bytes:
    return bytes.fromhex((FIXTURES / name).read_text())


@pytest.fixture(scope="session")
def default_config():
    return load_config()


@pytest.fixture(scope="session")
def trained(default_config):
    """The default training recipe run once per session (about 45 s)."""
    data = pipeline.gen_data(default_config)
    outcome = pipeline.train_policy(default_config, data)
    quantized, summary = quantize_policy(outcome.params)
    return {"fp": outcome.params, "q": quantized, "summary": summary, "outcome": outcome, "data": data}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
