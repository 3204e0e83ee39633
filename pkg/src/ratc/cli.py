"""Command-line front end: run scenarios, replay traces, fuzz seeds."""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

from . import checkers, scenarios
from .simulator import MODELS, count_delays
from .trace import Trace, TraceVersionError

CHECKS = ("all", "invariants", "tcsll", "correctness")


def _summary(trace: Trace) -> list:
    end = trace.of_kind("end")
    end = end[-1]["data"] if end else {"reason": "?", "steps": "?", "undecided": ()}
    decided = {r["data"]["t"]: r["data"]["d"] for r in trace.of_kind("decide")}
    certified = [r["data"]["t"] for r in trace.of_kind("certify")]
    commits = sum(1 for d in decided.values() if d.value == "COMMIT")
    m = trace.meta
    lines = [f"model {m.get('model')}  seed {m.get('seed')}  shards {len(m.get('shards', ()))}"
             f"  replicas {m.get('replicas')}",
             f"steps {end['steps']}  ended {end['reason']}  transactions {len(certified)}"
             f"  decided {len(decided)} (commit {commits}, abort {len(decided) - commits})"
             f"  undecided {', '.join(end['undecided']) or '-'}"]
    delays = {t: count_delays(trace, t) for t in certified}
    known = [d for d in delays.values() if d is not None]
    if known:
        per = " ".join(f"{t}={d}" for t, d in delays.items() if d is not None)
        lines.append(f"delays {per}  (min {min(known)}, max {max(known)}, "
                     f"mean {statistics.mean(known):.2f})")
    return lines


def _verdicts_json(verdicts) -> list:
    return [{"check": v.name, "status": v.status, "detail": v.detail,
             "violations": [{"text": x.text, "records": list(x.witnesses)} for x in v.violations]}
            for v in verdicts]


def _report(trace, args, out) -> int:
    verdicts = checkers.run_checks(trace, args.check, args.oracle_bound)
    for line in _summary(trace):
        print(line, file=out)
    print(checkers.render(verdicts, trace), file=out)
    ok = checkers.all_pass(verdicts)
    print("result: " + ("PASS" if ok else "FAIL"), file=out)
    if getattr(args, "json", None):
        with open(args.json, "w") as fh:
            json.dump({"ok": ok, "verdicts": _verdicts_json(verdicts)}, fh, indent=2)
    return 0 if ok else 1


def _load_cfg(args):
    cfg = scenarios.resolve(args.scenario)
    return scenarios.with_overrides(cfg, args.seed, args.model, args.max_steps)


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    trace = scenarios.execute(cfg)
    print(f"scenario {args.scenario}")
    if args.emit_trace:
        trace.dump(args.emit_trace)
        print(f"trace written to {args.emit_trace}")
    return _report(trace, args, sys.stdout)


def cmd_replay(args) -> int:
    try:
        trace = Trace.load(args.trace)
    except TraceVersionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    status = _report(trace, args, sys.stdout)
    if args.resimulate:
        with open(args.trace) as fh:
            original = fh.read()
        again = scenarios.reproduce(trace).dumps()
        same = again == original
        print("re-simulation: " + ("identical" if same else "DIFFERS"))
        if not same:
            status = 1
    return status


def _one(cfg, which, bound):
    trace = scenarios.execute(cfg)
    verdicts = checkers.run_checks(trace, which, bound)
    return cfg.seed, trace, verdicts


def cmd_fuzz(args) -> int:
    base = _load_cfg(args)
    seeds = range(args.start, args.start + args.runs)
    cfgs = [replace(base, seed=s) for s in seeds]
    failing = []
    skipped = 0

    def consume(result):
        nonlocal skipped
        seed, trace, verdicts = result
        skipped += any(v.skipped for v in verdicts)
        if not checkers.all_pass(verdicts):
            failing.append(seed)
            bad = ", ".join(v.name for v in verdicts if not v.ok)
            print(f"seed {seed}: FAIL ({bad})")
            if args.out:
                os.makedirs(args.out, exist_ok=True)
                trace.dump(os.path.join(args.out, f"seed-{seed}.trace"))

    if args.jobs > 1:
        with ThreadPoolExecutor(args.jobs) as pool:
            for res in pool.map(lambda c: _one(c, args.check, args.oracle_bound), cfgs):
                consume(res)
    else:
        for c in cfgs:
            consume(_one(c, args.check, args.oracle_bound))
    failing.sort()
    if args.out and failing:
        with open(os.path.join(args.out, "failing-seeds.txt"), "w") as fh:
            fh.write("".join(f"{s}\n" for s in failing))
    print(f"runs {len(cfgs)}  failing {len(failing)}  oracle-skipped {skipped}  "
          f"model {base.model}")
    if failing:
        print("failing seeds: " + " ".join(map(str, failing)))
    return 1 if failing else 0


def cmd_list(args) -> int:
    for name, text in scenarios.BUILTINS.items():
        about = " ".join(ln[1:].strip() for ln in text.splitlines()[1:] if ln.startswith("#"))
        print(f"{name:<16} {about.split('. ')[0].rstrip('.')}")
    return 0


def _common(p, scenario_default=None):
    p.add_argument("--scenario", default=scenario_default, required=scenario_default is None,
                   help="builtin name or scenario file")
    p.add_argument("--seed", type=int)
    p.add_argument("--model", choices=MODELS)
    p.add_argument("--max-steps", type=int)


def _checks(p):
    p.add_argument("--check", choices=CHECKS, default="all")
    p.add_argument("--oracle-bound", type=int, default=10,
                   help="largest committed set the linearization search will attempt")
    p.add_argument("--json", metavar="PATH", help="also write verdicts as JSON")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ratc", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="simulate one scenario and check it")
    _common(p)
    _checks(p)
    p.add_argument("--emit-trace", metavar="PATH")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="re-check a trace file")
    p.add_argument("trace")
    p.add_argument("--resimulate", action="store_true",
                   help="also re-run the embedded scenario and compare byte for byte")
    _checks(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("fuzz", help="check many seeds of one scenario")
    _common(p, scenario_default="corpus")
    _checks(p)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--start", type=int, default=0, help="first seed")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", metavar="DIR", help="store traces of failing seeds here")
    p.set_defaults(func=cmd_fuzz)

    p = sub.add_parser("list", help="list builtin scenarios")
    p.set_defaults(func=cmd_list)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (scenarios.ScenarioError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
