"""What happens when parties join in the middle of a round.

Twenty parties join a 100-party round ten seconds in.  The static tree has
to add leaves and pays a reconfiguration delay before it can publish, while
the serverless runtime simply sees more updates in the queue and starts more
fusion invocations.

    python demos/join_elasticity.py
"""

from fedsim import compare, load_canned


def main() -> None:
    cfg = load_canned("paper-joins")
    results, record = compare(cfg, ["static_tree", "serverless"])
    for r in results:
        rnd = r.report.rounds[0]
        print(
            f"{r.report.backend:>12}: latency {rnd.latency_seconds:6.2f} s, "
            f"accepted {rnd.accepted_updates}, reconfig events {rnd.reconfig_events}"
        )
    print(f"static/serverless latency ratio: {record['static_over_serverless_latency']:.2f}")


if __name__ == "__main__":
    main()
