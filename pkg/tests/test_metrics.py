import csv
import json
from decimal import Decimal

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedsim.metrics import (
    PUBLISHED_COST_TABLES,
    ROUND_COLUMNS,
    RoundMetrics,
    RunReport,
    compare_reports,
    project_cost,
    savings_percent,
    write_report,
)


def test_cost_examples():
    assert project_cost(298900, 0.0002692) == 80.46
    assert project_cost(40849, 0.0002692) == 11.00
    assert project_cost(0, 0.5) == 0.0
    with pytest.raises(ValueError):
        project_cost(-1, 0.1)


def test_rounding_is_half_up():
    # 0.125 is exact in binary; banker's rounding would give 0.12
    assert project_cost(1, 0.125) == 0.13
    assert project_cost(5, 0.001) == 0.01


def test_savings_examples():
    assert savings_percent(0.46, 0.06) == 86.96
    assert savings_percent(8.9, 0.07) == 99.21
    assert savings_percent(3.0, 3.0) == 0.0
    with pytest.raises(ValueError):
        savings_percent(0.0, 1.0)


@given(st.integers(0, 10**8), st.integers(1, 10**6))
def test_cost_against_integer_oracle(seconds, price_micro):
    # integer arithmetic in units of 1e-9 dollars, rounded half-up to cents
    price = price_micro / 1e7
    exact = seconds * Decimal(price_micro)  # in 1e-7 dollars
    cents, rem = divmod(exact, Decimal(100000))
    expected = (cents + (1 if rem * 2 >= 100000 else 0)) / Decimal(100)
    assert project_cost(seconds, price) == float(expected)


def test_published_tables_shape():
    assert len(PUBLISHED_COST_TABLES) == 6
    assert all(len(t.rows) == 4 for t in PUBLISHED_COST_TABLES)


def _report(backend, latencies, cs=1000.0):
    rounds = [RoundMetrics(i + 1, lat, 10, 0, 3, 0, 0) for i, lat in enumerate(latencies)]
    return RunReport.build(backend, rounds, cs, cs / 4, seed=7)


def test_run_report_fields():
    r = _report("static_tree", [2.0, 4.0])
    assert r.mean_latency == 3.0
    assert r.projected_cost_usd == 0.27
    assert r.utilization_proxy == 0.25
    with pytest.raises(ValueError):
        RoundMetrics(1, -1.0, 0, 0, 0, 0, 0)


def test_write_report_files(tmp_path):
    r = _report("serverless", [1.0, 2.0, 3.0])
    spath, rpath = write_report(r, tmp_path)
    summary = json.loads(spath.read_text())
    for key in ("backend", "mean_latency", "container_seconds", "projected_cost_usd", "utilization_proxy"):
        assert key in summary
    rows = list(csv.reader(rpath.open()))
    assert tuple(rows[0]) == ROUND_COLUMNS
    assert len(rows) - 1 == 3
    first = spath.read_bytes()
    write_report(r, tmp_path)
    assert spath.read_bytes() == first
    cpath, _ = write_report(r, tmp_path, "csv")
    assert cpath.suffix == ".csv"
    with pytest.raises(ValueError):
        write_report(r, tmp_path, "xml")


def test_comparison_record():
    rec = compare_reports([_report("static_tree", [10.0], 10000.0), _report("serverless", [5.0], 1000.0)])
    assert rec["container_second_savings_percent"] == 90.0
    assert rec["static_over_serverless_latency"] == 2.0
    assert [b["backend"] for b in rec["backends"]] == ["static_tree", "serverless"]
