"""Per-round measurements, run summaries, cost projection and report files."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any, Sequence

from .backend import RoundRecord, aggregation_latency

DEFAULT_UNIT_PRICE = 0.0002692  # US$ per container-second
ROUND_COLUMNS = ("round", "latency_s", "accepted", "discarded", "invocations", "crashes", "reconfigs")
_CENT = Decimal("0.01")


def _half_up(value: Decimal) -> float:
    return float(value.quantize(_CENT, rounding=ROUND_HALF_UP))


def _dec(x: float) -> Decimal:
    # str() keeps the decimal the caller wrote (0.0002692, not its binary neighbour)
    return Decimal(str(x))


def project_cost(container_seconds: float, unit_price: float = DEFAULT_UNIT_PRICE) -> float:
    """``container_seconds * unit_price`` rounded half-up to cents."""
    if container_seconds < 0 or unit_price < 0:
        raise ValueError("container seconds and unit price must be non-negative")
    return _half_up(_dec(container_seconds) * _dec(unit_price))


def savings_percent(static_cost: float, serverless_cost: float) -> float:
    """``100 * (static - serverless) / static`` rounded half-up to 2 decimals."""
    if static_cost <= 0:
        raise ValueError("static cost must be positive")
    return _half_up(Decimal(100) * (_dec(static_cost) - _dec(serverless_cost)) / _dec(static_cost))


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    latency_seconds: float
    accepted_updates: int
    discarded_late: int
    invocations: int
    crashes: int
    reconfig_events: int

    def __post_init__(self) -> None:
        if self.latency_seconds < 0:
            raise ValueError("latency must be non-negative")

    @classmethod
    def from_record(cls, rec: RoundRecord) -> RoundMetrics:
        return cls(
            round=rec.round,
            latency_seconds=aggregation_latency(rec),
            accepted_updates=len(rec.accepted),
            discarded_late=rec.discarded_late,
            invocations=rec.invocations,
            crashes=rec.crashes,
            reconfig_events=rec.reconfig_events,
        )

    def row(self) -> list:
        return [
            self.round,
            _fmt(self.latency_seconds),
            self.accepted_updates,
            self.discarded_late,
            self.invocations,
            self.crashes,
            self.reconfig_events,
        ]


def _fmt(x: float) -> str:
    # fixed precision so reports do not depend on float repr quirks
    return f"{x:.6f}"


@dataclass(frozen=True)
class RunReport:
    backend: str
    mean_latency: float
    container_seconds: float
    projected_cost_usd: float
    utilization_proxy: float
    rounds: tuple[RoundMetrics, ...]
    scenario: str = ""
    seed: int = 0
    parties: int = 0
    unit_price: float = DEFAULT_UNIT_PRICE
    duration_seconds: float = 0.0
    model_digest: str = ""
    extra: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        backend: str,
        rounds: Sequence[RoundMetrics],
        container_seconds: float,
        busy_seconds: float,
        unit_price: float = DEFAULT_UNIT_PRICE,
        **kw: Any,
    ) -> RunReport:
        lat = [r.latency_seconds for r in rounds]
        return cls(
            backend=backend,
            mean_latency=sum(lat) / len(lat) if lat else 0.0,
            container_seconds=container_seconds,
            projected_cost_usd=project_cost(container_seconds, unit_price),
            utilization_proxy=busy_seconds / container_seconds if container_seconds > 0 else 0.0,
            rounds=tuple(rounds),
            unit_price=unit_price,
            **kw,
        )

    def summary(self) -> dict[str, Any]:
        return {
            "backend": self.backend,
            "scenario": self.scenario,
            "seed": self.seed,
            "parties": self.parties,
            "rounds": len(self.rounds),
            "mean_latency": round(self.mean_latency, 6),
            "container_seconds": round(self.container_seconds, 6),
            "unit_price": self.unit_price,
            "projected_cost_usd": self.projected_cost_usd,
            "utilization_proxy": round(self.utilization_proxy, 6),
            "duration_seconds": round(self.duration_seconds, 6),
            "model_digest": self.model_digest,
            "extra": self.extra,
        }

    def rounds_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ROUND_COLUMNS)
        for r in self.rounds:
            w.writerow(r.row())
        return buf.getvalue()


def compare_reports(reports: Sequence[RunReport]) -> dict[str, Any]:
    """Side-by-side record; adds serverless-vs-static savings when both ran."""
    by = {r.backend: r for r in reports}
    out: dict[str, Any] = {
        "backends": [
            {
                "backend": r.backend,
                "mean_latency": round(r.mean_latency, 6),
                "container_seconds": round(r.container_seconds, 6),
                "projected_cost_usd": r.projected_cost_usd,
                "model_digest": r.model_digest,
            }
            for r in reports
        ]
    }
    static, sls = by.get("static_tree"), by.get("serverless")
    if static is not None and sls is not None:
        out["container_second_savings_percent"] = savings_percent(static.container_seconds, sls.container_seconds)
        if static.projected_cost_usd > 0:
            out["cost_savings_percent"] = savings_percent(static.projected_cost_usd, sls.projected_cost_usd)
        if sls.mean_latency > 0:
            out["static_over_serverless_latency"] = round(static.mean_latency / sls.mean_latency, 6)
    return out


def _dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2) + "\n"


def write_report(report: RunReport, out_dir: str | Path, fmt: str = "json") -> list[Path]:
    """Write ``<backend>-summary.{json,csv}`` and ``<backend>-rounds.csv`` into ``out_dir``."""
    if fmt not in ("json", "csv"):
        raise ValueError(f"unknown report format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = report.summary()
    spath = out / f"{report.backend}-summary.{fmt}"
    if fmt == "json":
        spath.write_text(_dump_json(summary), encoding="utf-8")
    else:
        flat = {k: (json.dumps(v, sort_keys=True) if isinstance(v, dict) else v) for k, v in summary.items()}
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(flat.keys())
        w.writerow(flat.values())
        spath.write_text(buf.getvalue(), encoding="utf-8")
    rpath = out / f"{report.backend}-rounds.csv"
    rpath.write_text(report.rounds_csv(), encoding="utf-8")
    return [spath, rpath]


def write_comparison(record: dict[str, Any], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "comparison.json"
    path.write_text(_dump_json(record), encoding="utf-8")
    return path


# -- published measurements ----------------------------------------------------


@dataclass(frozen=True)
class CostRow:
    parties: int
    static_container_seconds: float
    serverless_container_seconds: float
    static_cost: float
    serverless_cost: float
    savings_percent: float


@dataclass(frozen=True)
class CostTable:
    name: str
    caption_unit_price: float
    rows: tuple[CostRow, ...]


def _rows(*rows: tuple) -> tuple[CostRow, ...]:
    return tuple(CostRow(*r) for r in rows)


# Six published resource-usage tables: container-seconds, projected cost and
# savings per party count.  The intermittent tables state 0.0002693 US$/s in
# their captions although their cost cells follow 0.0002692.
PUBLISHED_COST_TABLES: tuple[CostTable, ...] = (
    CostTable("cifar100-active", 0.0002692, _rows(
        (10, 1723, 228, 0.46, 0.06, 86.96),
        (100, 2653, 351, 0.71, 0.09, 87.32),
        (1000, 22340, 2951, 6.01, 0.79, 86.86),
        (10000, 298900, 40849, 80.46, 11.0, 86.33),
    )),
    CostTable("rvlcdip-active", 0.0002692, _rows(
        (10, 1953, 162, 0.53, 0.04, 91.73),
        (100, 3078, 234, 0.83, 0.06, 92.4),
        (1000, 25250, 1992, 6.8, 0.54, 92.11),
        (10000, 337830, 30303, 90.94, 8.16, 91.03),
    )),
    CostTable("inaturalist-active", 0.0002692, _rows(
        (10, 2365, 389, 0.64, 0.1, 83.55),
        (100, 3354, 548, 0.9, 0.15, 83.65),
        (1000, 30545, 5144, 8.22, 1.38, 83.16),
        (9237, 420870, 68307, 113.3, 18.39, 83.77),
    )),
    CostTable("cifar100-intermittent", 0.0002693, _rows(
        (10, 634, 272, 0.17, 0.07, 99.28),
        (100, 576, 385, 0.16, 0.1, 98.89),
        (1000, 10516, 1113, 2.83, 0.3, 99.82),
        (10000, 105021, 18741, 28.27, 5.05, 99.7),
    )),
    CostTable("rvlcdip-intermittent", 0.0002693, _rows(
        (10, 33043, 258, 8.9, 0.07, 99.21),
        (100, 33037, 385, 8.89, 0.1, 98.88),
        (1000, 510039, 2975, 137.3, 0.8, 99.42),
        (10000, 5700030, 40884, 1534.45, 11.01, 99.28),
    )),
    CostTable("inaturalist-intermittent", 0.0002693, _rows(
        (10, 34365, 509, 9.25, 0.14, 98.52),
        (100, 34358, 588, 9.25, 0.16, 98.29),
        (1000, 734456, 17700, 197.72, 4.76, 97.59),
        (9237, 6783036, 206883, 1825.99, 55.69, 96.95),
    )),
)
