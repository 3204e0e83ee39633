"""Fuzz one scenario over a seed range under each model and tabulate the
verdicts per check.

    python3 scripts/run_fuzz_corpus.py --runs 1000 --models mp rdma naive-rdma
"""

import argparse
import collections
import time
from dataclasses import dataclass, field, replace

from ratc import checkers, scenarios


@dataclass
class FuzzConfig:
    scenario: str = "corpus"
    runs: int = 200
    start: int = 0
    models: tuple = ("mp", "rdma", "naive-rdma")
    oracle_bound: int = 10


@dataclass
class ModelResult:
    model: str
    runs: int = 0
    failed_runs: list = field(default_factory=list)
    failures: collections.Counter = field(default_factory=collections.Counter)
    skipped: int = 0
    commits: int = 0
    aborts: int = 0
    seconds: float = 0.0


def fuzz_model(cfg: FuzzConfig, model: str) -> ModelResult:
    base = replace(scenarios.resolve(cfg.scenario), model=model)
    res = ModelResult(model)
    t0 = time.perf_counter()
    for seed in range(cfg.start, cfg.start + cfg.runs):
        trace = scenarios.execute(replace(base, seed=seed))
        verdicts = checkers.run_checks(trace, "all", cfg.oracle_bound)
        res.runs += 1
        for r in trace.of_kind("decide"):
            if r["data"]["d"].value == "COMMIT":
                res.commits += 1
            else:
                res.aborts += 1
        res.skipped += any(v.skipped for v in verdicts)
        bad = [v.name for v in verdicts if not v.ok]
        if bad:
            res.failed_runs.append(seed)
            res.failures.update(bad)
    res.seconds = time.perf_counter() - t0
    return res


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    d = FuzzConfig()
    ap.add_argument("--scenario", default=d.scenario)
    ap.add_argument("--runs", type=int, default=d.runs)
    ap.add_argument("--start", type=int, default=d.start)
    ap.add_argument("--models", nargs="+", default=list(d.models))
    ap.add_argument("--oracle-bound", type=int, default=d.oracle_bound)
    a = ap.parse_args(argv)
    cfg = FuzzConfig(a.scenario, a.runs, a.start, tuple(a.models), a.oracle_bound)

    print(f"{'model':<11} {'runs':>5} {'failing':>8} {'skipped':>8} {'commit':>7} "
          f"{'abort':>6} {'secs':>6}  most frequent failures")
    for model in cfg.models:
        r = fuzz_model(cfg, model)
        top = ", ".join(f"{k} x{n}" for k, n in r.failures.most_common(4)) or "-"
        print(f"{model:<11} {r.runs:>5} {len(r.failed_runs):>8} {r.skipped:>8} {r.commits:>7} "
              f"{r.aborts:>6} {r.seconds:>6.1f}  {top}")


if __name__ == "__main__":
    main()
