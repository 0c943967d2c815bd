"""Latency statistics and the benchmark report."""

from __future__ import annotations

import json
import statistics
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal

TABLE_ROWS = (
    "Total Runs",
    "Mean Latency",
    "Std Deviation",
    "Minimum",
    "Maximum",
    "Reasoning Frequency",
)


def round_half_up(value: float, places: int = 2) -> float:
    quantum = Decimal(1).scaleb(-places)
    return float(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class LatencyReport:
    runs: int
    mean_ms: float
    std_ms: float
    min_ms: float
    max_ms: float
    hz: float
    std_defined: bool = True
    warmup_excluded: int = 0
    warmup_ms: list[float] = field(default_factory=list)

    def rows(self) -> list[tuple[str, str]]:
        return [
            ("Total Runs", str(self.runs)),
            ("Mean Latency", f"{self.mean_ms:.2f} ms"),
            ("Std Deviation", f"{round_half_up(self.std_ms):.2f} ms"),
            ("Minimum", f"{self.min_ms:.2f} ms"),
            ("Maximum", f"{self.max_ms:.2f} ms"),
            ("Reasoning Frequency", f"{self.hz:.2f} Hz"),
        ]

    def table(self) -> str:
        rows = [("Measurement", "Result")] + self.rows()
        width = max(len(r[0]) for r in rows)
        lines = [f"{name:<{width}}  {value}" for name, value in rows]
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["std_ms_2dp"] = round_half_up(self.std_ms)
        d["rows"] = dict(self.rows())
        return d

    def to_json(self, **extra) -> str:
        return json.dumps({**self.to_dict(), **extra}, indent=2, sort_keys=True)


def compute_stats(samples_ms) -> LatencyReport:
    """Mean, sample std (n - 1), extremes and 1000/mean in Hz (2 dp, half-up).

    A single sample has no sample std; it is reported as 0 with
    ``std_defined=False``.
    """
    xs = [float(x) for x in samples_ms]
    if not xs:
        raise ValueError("need at least one sample")
    mean = statistics.fmean(xs)
    if len(xs) > 1:
        std, defined = statistics.stdev(xs), True
    else:
        std, defined = 0.0, False
    if not mean > 0:
        raise ValueError("mean latency must be positive")
    return LatencyReport(
        runs=len(xs),
        mean_ms=mean,
        std_ms=std,
        min_ms=min(xs),
        max_ms=max(xs),
        hz=round_half_up(1000.0 / mean),
        std_defined=defined,
    )
