"""Failures in both aggregation designs.

First, a static tree leaf is killed mid-round.  The root notices only after
several missed heartbeats, restarts the node and its children resend, so
the round is delayed.  Second, serverless fusion invocations crash at
random.  Their claims are released and the work is retried, and the final
model still matches the crash-free run bit for bit.

    python demos/fault_tolerance.py
"""

from fedsim import ScenarioConfig, run_scenario


def main() -> None:
    base = ScenarioConfig(parties=100, fanout=10, rounds=1, seed=3)
    base = base.with_(behavior={"think_time": {"kind": "constant", "a": 10.0}})

    calm = run_scenario(base.with_(backend="static_tree"))
    hit = run_scenario(base.with_(backend="static_tree", faults={"node_kills": [{"node": "L0:3", "at": 5.0}]}))
    print("static tree, leaf L0:3 killed at t=5 s")
    print(f"  latency without failure {calm.report.mean_latency:6.2f} s")
    print(f"  latency with failure    {hit.report.mean_latency:6.2f} s")
    print(f"  failures detected       {hit.report.extra['failures_detected']}")

    clean = run_scenario(base.with_(backend="serverless"))
    crashy = run_scenario(base.with_(backend="serverless", faults={"invocation_crash_prob": 0.3}))
    rnd = crashy.report.rounds[0]
    print("serverless, 30% of invocations crash")
    print(f"  invocations {rnd.invocations}, crashes {rnd.crashes}")
    print(f"  latency {clean.report.mean_latency:.2f} s -> {crashy.report.mean_latency:.2f} s")
    print(f"  same final model: {clean.report.model_digest == crashy.report.model_digest}")


if __name__ == "__main__":
    main()
