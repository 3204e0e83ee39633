"""Message delays from certification to the client's decision, for a
remote client and for a client on the coordinator, under each model and
several latency ranges.

    python3 scripts/delay_table.py
"""

import argparse
import statistics
from dataclasses import dataclass, replace

from ratc import scenarios
from ratc.simulator import count_delays


@dataclass
class DelayConfig:
    scenario: str = "fig2a"
    models: tuple = ("mp", "rdma")
    latencies: tuple = ((1, 1), (1, 3), (2, 5))
    seeds: int = 20


def measure(cfg: DelayConfig):
    base = scenarios.resolve(cfg.scenario)
    for model in cfg.models:
        for lat in cfg.latencies:
            per_txn = {}
            for seed in range(cfg.seeds):
                tr = scenarios.execute(replace(base, model=model, latency=lat, seed=seed))
                for r in tr.of_kind("certify"):
                    t = r["data"]["t"]
                    per_txn.setdefault(t, []).append(count_delays(tr, t))
            yield model, lat, per_txn


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default=DelayConfig.scenario)
    ap.add_argument("--seeds", type=int, default=DelayConfig.seeds)
    a = ap.parse_args(argv)
    cfg = DelayConfig(scenario=a.scenario, seeds=a.seeds)
    print(f"{'model':<6} {'latency':<8} {'txn':<4} {'min':>4} {'max':>4} {'mean':>6}")
    for model, lat, per_txn in measure(cfg):
        for t, ds in sorted(per_txn.items()):
            known = [d for d in ds if d is not None]
            if not known:
                print(f"{model:<6} {lat[0]}-{lat[1]:<6} {t:<4}  undecided")
                continue
            print(f"{model:<6} {lat[0]}-{lat[1]:<6} {t:<4} {min(known):>4} {max(known):>4} "
                  f"{statistics.mean(known):>6.2f}")


if __name__ == "__main__":
    main()
