"""How aggregation latency grows with the number of parties.

A centralized aggregator fuses every update serially, so its latency grows
linearly.  The static tree and the serverless runtime both fuse in parallel
by fanout, so their latency grows with tree depth.  This demo runs a short
version of the canned latency sweep and prints one line per party count.

    python demos/latency_scaling.py [--max-parties 1000] [--rounds 3]
"""

import argparse

from fedsim import compare, load_canned
from fedsim.scenario import expand_sweep


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--max-parties", type=int, default=1000)
    ap.add_argument("--rounds", type=int, default=3)
    args = ap.parse_args()

    base = load_canned("paper-latency-scaling").with_(rounds=args.rounds)
    print(f"{'parties':>8} {'centralized':>12} {'static_tree':>12} {'serverless':>12}")
    for cfg in expand_sweep(base):
        if cfg.parties > args.max_parties:
            break
        results, _ = compare(cfg, ["centralized", "static_tree", "serverless"])
        lat = {r.report.backend: r.report.mean_latency for r in results}
        print(f"{cfg.parties:>8} {lat['centralized']:>12.2f} {lat['static_tree']:>12.2f} {lat['serverless']:>12.2f}")


if __name__ == "__main__":
    main()
