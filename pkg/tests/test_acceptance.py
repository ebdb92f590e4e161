"""Acceptance gates.  Each test prints one ``[PASS]``/``[FAIL]`` line.

Run standalone with ``python tests/test_acceptance.py`` or through pytest;
the verdict lines are repeated in an "acceptance criteria" section at the
end of the pytest report.
"""

import time

import numpy as np
import pytest

from fedsim.cli import main as cli_main
from fedsim.fusion import FusionAlgorithm, GlobalModel, ModelUpdate, canonical_result, relative_difference
from fedsim.metrics import DEFAULT_UNIT_PRICE, PUBLISHED_COST_TABLES, project_cost, savings_percent
from fedsim.parties import SyntheticTask, local_train, weighted_optimum
from fedsim.scenario import compare, expand_sweep, load_canned, parse_config_dict, run_scenario
from fedsim.serverless import run_round_serverless
from fedsim.topologies import build_tree, run_round_centralized, run_round_static_tree

from conftest import ACCEPTANCE_LINES


def verdict(criterion, ok, detail, elapsed=None, notes=()):
    timing = f" [{elapsed:.1f}s]" if elapsed is not None else ""
    line = f"[{'PASS' if ok else 'FAIL'}] #{criterion} {detail}{timing}"
    ACCEPTANCE_LINES.append(line)
    print("\n" + line)
    for n in notes:
        print("       " + n)
    return ok


# -- 1 ----------------------------------------------------------------------------


def test_1_equivalence_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(20240601)
    worst = 0.0
    for _ in range(200):
        n, k, d = int(rng.integers(1, 257)), int(rng.integers(2, 17)), int(rng.integers(1, 65))
        model = GlobalModel(1, rng.normal(size=d), float(rng.uniform(0.1, 2.0)))
        times = rng.uniform(0.0, 50.0, n)
        ups = [
            ModelUpdate(p, 1, rng.normal(scale=rng.uniform(0.01, 10), size=d), int(rng.integers(1, 1000)), submitted_at=float(t))
            for p, t in enumerate(times)
        ]
        ref = canonical_result(ups, model).weights
        central, _ = run_round_centralized(ups, model)
        tree, _ = run_round_static_tree(build_tree(n, k), ups, model)
        sls, _ = run_round_serverless(ups, model, fanout=k)
        np.testing.assert_array_equal(central.weights, ref)  # same order, so exact
        worst = max(worst, relative_difference(tree.weights, ref), relative_difference(sls.weights, ref))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 30
    verdict(1, ok, f"200 instances, worst relative difference {worst:.2e} (<= 1e-9), runtime < 30 s", elapsed)
    assert ok


# -- 2 ----------------------------------------------------------------------------


def _fault_cfg(seed, p):
    return parse_config_dict(
        dict(
            name="faults", backend="serverless", parties=40, fanout=4, rounds=3, dimension=6, seed=seed,
            behavior={"think_time": {"kind": "uniform", "a": 0, "b": 20}},
            faults={"invocation_crash_prob": p},
        )
    )


def test_2_exactly_once_under_faults():
    start = time.perf_counter()
    problems = []
    crashes = {}
    for p in (0.2, 0.5):
        crashes[p] = 0
        for seed in range(100):
            clean = run_scenario(_fault_cfg(seed, 0.0))
            faulty = run_scenario(_fault_cfg(seed, p))
            crashes[p] += sum(r.crashes for r in faulty.report.rounds)
            if len(faulty.models) != 4:
                problems.append(f"p={p} seed={seed}: {len(faulty.models) - 1} rounds")
            for r, rec in faulty.records.items():
                if rec.root_contributors != len(rec.accepted):
                    problems.append(f"p={p} seed={seed} round {r}: {rec.root_contributors} != {len(rec.accepted)}")
            diff = relative_difference(faulty.models[-1].weights, clean.models[-1].weights)
            if diff > 1e-9:
                problems.append(f"p={p} seed={seed}: final model differs by {diff:.2e}")
    elapsed = time.perf_counter() - start
    ok = not problems and elapsed < 120 and all(crashes.values())
    verdict(
        2, ok,
        f"crash p=0.2/0.5 x 100 seeds: {crashes[0.2]}/{crashes[0.5]} crashes, {len(problems)} violations, runtime < 120 s",
        elapsed, problems[:10],
    )
    assert ok


# -- 3 ----------------------------------------------------------------------------


def test_3_cost_table_arithmetic():
    start = time.perf_counter()
    cost_bad, savings_bad, notes = [], [], []
    cells = 0
    for table in PUBLISHED_COST_TABLES:
        for row in table.rows:
            for label, cs, printed in (
                ("static", row.static_container_seconds, row.static_cost),
                ("serverless", row.serverless_container_seconds, row.serverless_cost),
            ):
                cells += 1
                got = project_cost(cs, DEFAULT_UNIT_PRICE)
                if abs(got - printed) > 0.005 + 1e-9:
                    cost_bad.append(f"{table.name} n={row.parties} {label}: {cs} s -> {got:.2f}, printed {printed:.2f}")
            got = savings_percent(row.static_cost, row.serverless_cost)
            if abs(got - row.savings_percent) > 0.01 + 1e-9:
                savings_bad.append(
                    f"{table.name} n={row.parties}: ({row.static_cost}, {row.serverless_cost}) -> {got:.2f}%, printed {row.savings_percent}%"
                )
    elapsed = time.perf_counter() - start
    rows = sum(len(t.rows) for t in PUBLISHED_COST_TABLES)
    ok = not cost_bad and not savings_bad and elapsed < 1
    notes = cost_bad + ["savings cell not derivable from its row: " + s for s in savings_bad]
    verdict(
        3, ok,
        f"cost cells {cells - len(cost_bad)}/{cells} within 0.005 USD at {DEFAULT_UNIT_PRICE}; "
        f"savings cells {rows - len(savings_bad)}/{rows} within 0.01 points",
        elapsed, notes,
    )
    assert ok


# -- 4 and 5 share one run ------------------------------------------------------------


@pytest.fixture(scope="module")
def latency_runs():
    start = time.perf_counter()
    out = {}
    for cfg in expand_sweep(load_canned("paper-latency-scaling")):
        results, _ = compare(cfg, ["centralized", "static_tree", "serverless"])
        out[cfg.parties] = {r.report.backend: r.report.mean_latency for r in results}
    return out, time.perf_counter() - start


def test_4_latency_scaling_shape(latency_runs):
    lat, elapsed = latency_runs
    growth = {b: lat[10000][b] / lat[10][b] for b in ("centralized", "static_tree", "serverless")}
    ok = (
        growth["centralized"] >= 100
        and growth["static_tree"] <= 10
        and growth["serverless"] <= 10
        and elapsed < 120
    )
    notes = [
        f"n={n}: " + ", ".join(f"{b} {v:.3f} s" for b, v in lat[n].items()) for n in sorted(lat)
    ]
    verdict(
        4, ok,
        "n=10 -> 10^4 growth: " + ", ".join(f"{b} {g:.1f}x" for b, g in growth.items())
        + " (need >= 100x, <= 10x, <= 10x), runtime < 120 s",
        elapsed, notes,
    )
    assert ok


def test_5_steady_state_parity(latency_runs):
    lat, _ = latency_runs
    gaps = {n: abs(v["serverless"] - v["static_tree"]) / v["static_tree"] for n, v in lat.items()}
    ok = all(g <= 0.05 for g in gaps.values())
    verdict(5, ok, "serverless vs static gap: " + ", ".join(f"n={n} {100 * g:.2f}%" for n, g in sorted(gaps.items())) + " (<= 5%)")
    assert ok


# -- 6 ----------------------------------------------------------------------------


def test_6_join_elasticity():
    start = time.perf_counter()
    results, _ = compare(load_canned("paper-joins"), ["static_tree", "serverless"])
    static, sls = (r.report for r in results)
    ratio = static.mean_latency / sls.mean_latency
    s_re = sum(r.reconfig_events for r in static.rounds)
    f_re = sum(r.reconfig_events for r in sls.rounds)
    elapsed = time.perf_counter() - start
    ok = ratio > 2 and f_re == 0 and s_re >= 1 and elapsed < 30
    verdict(
        6, ok,
        f"static/serverless latency {static.mean_latency:.2f}/{sls.mean_latency:.2f} s = {ratio:.2f}x (> 2); "
        f"reconfig events static {s_re} (>= 1), serverless {f_re} (= 0)",
        elapsed,
    )
    assert ok


# -- 7 ----------------------------------------------------------------------------


def test_7_resource_savings():
    start = time.perf_counter()
    savings = {}
    for name in ("paper-active-cost", "paper-intermittent-cost"):
        results, record = compare(load_canned(name), ["static_tree", "serverless"])
        savings[name] = record["container_second_savings_percent"]
    elapsed = time.perf_counter() - start
    ok = savings["paper-active-cost"] >= 70 and savings["paper-intermittent-cost"] >= 90 and elapsed < 120
    verdict(
        7, ok,
        f"container-second savings active {savings['paper-active-cost']:.2f}% (>= 70), "
        f"intermittent {savings['paper-intermittent-cost']:.2f}% (>= 90)",
        elapsed,
    )
    assert ok


# -- 8 ----------------------------------------------------------------------------


def test_8_end_to_end_quadratic():
    start = time.perf_counter()
    rng = np.random.default_rng(8)
    tasks = [SyntheticTask(i, rng.normal(size=4), int(rng.integers(10, 200))) for i in range(3)]
    model = GlobalModel(1, rng.normal(size=4), 1.0)
    ups = [local_train(model, t, FusionAlgorithm.fedavg(tau=1), 1.0, submitted_at=1.0) for t in tasks]
    target = weighted_optimum(tasks)
    errors = {}
    for name, run in (
        ("centralized", lambda: run_round_centralized(ups, model)),
        ("static_tree", lambda: run_round_static_tree(build_tree(3, 2), ups, model)),
        ("serverless", lambda: run_round_serverless(ups, model, fanout=2)),
    ):
        nxt, _ = run()
        errors[name] = float(np.max(np.abs(nxt.weights - target)))
    h = 1e-6
    fd_err = 0.0
    for t in tasks:
        x = rng.normal(size=4)
        fd = np.array([(t.loss(x + h * e) - t.loss(x - h * e)) / (2 * h) for e in np.eye(4)]) / t.sample_count
        fd_err = max(fd_err, float(np.max(np.abs(fd - t.gradient(x)))))
    elapsed = time.perf_counter() - start
    ok = max(errors.values()) <= 1e-9 and fd_err <= 1e-6 and elapsed < 1
    verdict(
        8, ok,
        f"one-round error to weighted optimum {max(errors.values()):.1e} (<= 1e-9); "
        f"finite-difference gradient error {fd_err:.1e} (<= 1e-6)",
        elapsed,
    )
    assert ok


# -- 9 ----------------------------------------------------------------------------


def test_9_determinism(tmp_path):
    start = time.perf_counter()
    mismatched = []
    runs = [
        ["--scenario", "paper-joins", "--compare", "static_tree,serverless"],
        ["--scenario", "paper-active-cost", "--compare", "static_tree,serverless"],
        ["--scenario", "paper-intermittent-cost", "--backend", "serverless"],
        ["--config", str(_write_small(tmp_path)), "--compare", "centralized,static_tree,serverless"],
    ]
    files = 0
    for i, args in enumerate(runs):
        dirs = [tmp_path / f"run{i}-{rep}" for rep in (0, 1)]
        for d in dirs:
            assert cli_main(args + ["--seed", "7", "--out", str(d)]) == 0
        for f in sorted(dirs[0].iterdir()):
            files += 1
            if f.read_bytes() != (dirs[1] / f.name).read_bytes():
                mismatched.append(f"{' '.join(args)}: {f.name}")
    elapsed = time.perf_counter() - start
    ok = not mismatched and files > 0
    verdict(9, ok, f"{files} report files from 4 scenarios, byte-identical across reruns: {files - len(mismatched)}/{files}", elapsed, mismatched)
    assert ok


def _write_small(tmp_path):
    import json

    p = tmp_path / "faulty.json"
    p.write_text(json.dumps(dict(
        parties=30, fanout=3, rounds=3,
        behavior={"think_time": {"kind": "exponential", "a": 0.2}, "dropout_prob": 0.1},
        round_policy={"quorum_fraction": 0.7, "response_timeout_seconds": 20},
        faults={"invocation_crash_prob": 0.3},
    )))
    return p


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
