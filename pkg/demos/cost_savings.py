"""Container-seconds and projected cost: always-on tree versus serverless.

The static tree keeps every aggregator container alive for the whole job.
The serverless runtime only pays while fusion invocations run, plus the
idle window before a warm pod is reclaimed.  Savings are largest when
parties respond intermittently, because the tree sits idle for longer.

    python demos/cost_savings.py
"""

from fedsim import compare, load_canned


def main() -> None:
    for name in ("paper-active-cost", "paper-intermittent-cost"):
        cfg = load_canned(name)
        results, record = compare(cfg, ["static_tree", "serverless"])
        print(f"{name} ({cfg.parties} parties, {cfg.rounds} rounds)")
        for r in results:
            rep = r.report
            print(
                f"  {rep.backend:>12}: {rep.container_seconds:12.1f} container-s, "
                f"US$ {rep.projected_cost_usd:8.2f}, utilization {rep.utilization_proxy:.3f}"
            )
        print(f"  container-second savings: {record['container_second_savings_percent']:.2f}%")


if __name__ == "__main__":
    main()
