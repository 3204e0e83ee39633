"""Scenario files and the built-in scenarios.

A scenario is an INI-style text file whose first line is the format
header::

    #! ratc-scenario 1
    [system]
    shards = 2
    replicas = 2
    pool = 1
    model = mp
    latency = 1-1

    [workload]
    t1 = coord=p1 client=c1 reads=s1:x@0,s2:y writes=s1:x=a,s2:y=b

    [faults]
    steps =
        certify t1
        at=10 crash p1
        reconfigure p2 s1

Script lines are ``[at=N] action arg... key=value...``.  Without ``at=``
a step runs once the system has gone quiet.  Actions: certify T,
crash P, reconfigure P [S], retry P T-or-slot, hold NAME [src= dst= kind=
chan=], release NAME, noop.
"""

from __future__ import annotations

import configparser
import shlex
from dataclasses import replace

from .simulator import MODELS, FaultPolicy, SimConfig, Step, TxnSpec, Workload

HEADER = "#! ratc-scenario"
FORMAT_VERSION = 1
ACTIONS = {"certify": 1, "crash": 1, "reconfigure": 1, "retry": 2, "hold": 1,
           "release": 1, "noop": 0}
HOLD_KEYS = {"src", "dst", "kind", "chan"}


class ScenarioError(ValueError):
    def __init__(self, msg, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {msg}" if where else msg)
        self.line = line
        self.field = field


def _line_of(text: str, section: str, key: str):
    cur = None
    for n, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            cur = s[1:-1].strip()
        elif cur == section and s.split("=", 1)[0].strip() == key:
            return n
    return None


def _range(value: str, field: str, line) -> tuple:
    try:
        if "-" in value:
            lo, hi = (int(x) for x in value.split("-", 1))
        else:
            lo = hi = int(value)
    except ValueError:
        raise ScenarioError(f"expected N or LO-HI, got {value!r}", line, field) from None
    if lo < 0 or hi < lo:
        raise ScenarioError(f"bad range {value!r}", line, field)
    return (lo, hi)


def _int(sec, key, default, text, section):
    if key not in sec:
        return default
    try:
        return int(sec[key])
    except ValueError:
        raise ScenarioError(f"expected an integer, got {sec[key]!r}",
                            _line_of(text, section, key), key) from None


def _float(sec, key, default, text, section):
    if key not in sec:
        return default
    try:
        return float(sec[key])
    except ValueError:
        raise ScenarioError(f"expected a number, got {sec[key]!r}",
                            _line_of(text, section, key), key) from None


def parse_txn(t: str, spec: str, line=None) -> TxnSpec:
    """``coord=p1 client=c1 reads=s1:x@0,s2:y writes=s1:x=a``"""
    fields = {}
    for tok in shlex.split(spec):
        if "=" not in tok:
            raise ScenarioError(f"expected key=value, got {tok!r}", line, t)
        k, v = tok.split("=", 1)
        fields[k] = v
    unknown = set(fields) - {"coord", "client", "reads", "writes", "vc"}
    if unknown:
        raise ScenarioError(f"unknown transaction field(s) {sorted(unknown)}", line, t)
    reads = []
    for item in filter(None, fields.get("reads", "").split(",")):
        obj, _, ver = item.partition("@")
        if ver:
            try:
                reads.append((obj, int(ver)))
            except ValueError:
                raise ScenarioError(f"bad version in {item!r}", line, t) from None
        else:
            reads.append((obj, None))
    writes = []
    for item in filter(None, fields.get("writes", "").split(",")):
        obj, sep, val = item.partition("=")
        if not sep:
            raise ScenarioError(f"write {item!r} needs obj=value", line, t)
        writes.append((obj, val))
    read_objs = {o for o, _ in reads}
    for o, _ in writes:
        if o not in read_objs:
            reads.append((o, None))
    vc = fields.get("vc")
    return TxnSpec(t, fields.get("coord"), fields.get("client"), tuple(reads), tuple(writes),
                   int(vc) if vc is not None else None)


def parse_step(text: str, line=None) -> Step:
    toks = shlex.split(text)
    at = None
    if toks and toks[0].startswith("at="):
        try:
            at = int(toks.pop(0)[3:])
        except ValueError:
            raise ScenarioError(f"bad time in {text!r}", line, "steps") from None
    if not toks:
        raise ScenarioError("empty step", line, "steps")
    action, rest = toks[0], toks[1:]
    if action not in ACTIONS:
        raise ScenarioError(f"unknown action {action!r}", line, "steps")
    args, opts = [], []
    for tok in rest:
        if "=" in tok:
            k, v = tok.split("=", 1)
            opts.append((k, v))
        else:
            args.append(int(tok) if tok.isdigit() else tok)
    if len(args) < ACTIONS[action]:
        raise ScenarioError(f"{action} needs {ACTIONS[action]} argument(s)", line, "steps")
    if action == "hold" and not {k for k, _ in opts} <= HOLD_KEYS:
        raise ScenarioError(f"hold accepts only {sorted(HOLD_KEYS)}", line, "steps")
    return Step(action, tuple(args), at, tuple(opts))


def loads(text: str) -> SimConfig:
    first = text.lstrip().splitlines()[0] if text.strip() else ""
    if not first.startswith(HEADER):
        raise ScenarioError(f"missing header '{HEADER} {FORMAT_VERSION}'", 1)
    try:
        version = int(first[len(HEADER):].strip())
    except ValueError:
        raise ScenarioError("unreadable format version", 1) from None
    if version != FORMAT_VERSION:
        raise ScenarioError(f"scenario format {version} is not supported "
                            f"(expected {FORMAT_VERSION})", 1)
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ScenarioError(str(exc).splitlines()[0], getattr(exc, "lineno", None)) from None
    for sec in cp.sections():
        if sec not in ("system", "workload", "faults"):
            raise ScenarioError(f"unknown section [{sec}]", _line_of(text, sec, None))

    sysc = cp["system"] if cp.has_section("system") else {}
    model = sysc.get("model", "mp")
    if model not in MODELS:
        raise ScenarioError(f"model must be one of {', '.join(MODELS)}",
                            _line_of(text, "system", "model"), "model")
    known = {"shards", "replicas", "pool", "model", "seed", "latency", "ack_latency",
             "pull_delay", "max_steps", "capacity"}
    for key in sysc:
        if key not in known:
            raise ScenarioError("unknown setting", _line_of(text, "system", key), key)

    wl = cp["workload"] if cp.has_section("workload") else {}
    txns = []
    wl_keys = {"generate", "conflict_rate", "clients", "horizon", "hot_objects", "colocate"}
    for key in wl:
        if key in wl_keys:
            continue
        txns.append(parse_txn(key, wl[key], _line_of(text, "workload", key)))
    workload = Workload(
        generate=_int(wl, "generate", 0, text, "workload"),
        conflict_rate=_float(wl, "conflict_rate", 0.3, text, "workload"),
        horizon=_int(wl, "horizon", 20, text, "workload"),
        clients=_int(wl, "clients", 2, text, "workload"),
        hot_objects=_int(wl, "hot_objects", 2, text, "workload"),
        colocate_clients=str(wl.get("colocate", "no")).lower() in ("yes", "true", "1"),
        txns=tuple(txns))

    fc = cp["faults"] if cp.has_section("faults") else {}
    steps = []
    base = _line_of(text, "faults", "steps")
    for n, raw in enumerate(str(fc.get("steps", "")).splitlines()):
        if raw.strip():
            steps.append(parse_step(raw.strip(), None if base is None else base + n))
    faults = None
    if str(fc.get("random", "no")).lower() in ("yes", "true", "1"):
        faults = FaultPolicy(
            crash_prob=_float(fc, "crash_prob", 0.5, text, "faults"),
            reconfigure_prob=_float(fc, "reconfigure_prob", 0.6, text, "faults"),
            retry_prob=_float(fc, "retry_prob", 0.3, text, "faults"),
            horizon=_int(fc, "horizon", 60, text, "faults"))

    try:
        cfg = SimConfig(
            shards=_int(sysc, "shards", 2, text, "system"),
            replicas=_int(sysc, "replicas", 2, text, "system"),
            pool=_int(sysc, "pool", 1, text, "system"),
            seed=_int(sysc, "seed", 0, text, "system"),
            model=model,
            latency=_range(sysc.get("latency", "1-1"), "latency", _line_of(text, "system", "latency")),
            ack_latency=_range(sysc.get("ack_latency", "1-1"), "ack_latency",
                               _line_of(text, "system", "ack_latency")),
            pull_delay=_range(sysc.get("pull_delay", "0-0"), "pull_delay",
                              _line_of(text, "system", "pull_delay")),
            rdma_capacity=_int(sysc, "capacity", 64, text, "system"),
            max_steps=_int(sysc, "max_steps", 200_000, text, "system"),
            workload=workload, script=tuple(steps), faults=faults)
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc)) from None
    _validate_names(cfg)
    return cfg


def _validate_names(cfg: SimConfig) -> None:
    from .simulator import layout_for
    shards, layout, pools = layout_for(cfg)
    procs = {p for ps in layout.values() for p in ps} | {p for ps in pools.values() for p in ps}
    for t in cfg.workload.txns:
        if t.coordinator is not None and t.coordinator not in procs:
            raise ScenarioError(f"unknown coordinator {t.coordinator}", field=t.t)
        for obj, _ in t.reads:
            prefix = obj.split(":", 1)[0]
            if ":" not in obj or prefix not in shards:
                raise ScenarioError(f"object {obj!r} must be named SHARD:NAME with a known shard",
                                    field=t.t)
    for st in cfg.script:
        if st.action in ("crash",) and st.args[0] not in procs:
            raise ScenarioError(f"unknown process {st.args[0]}", field="steps")
        if st.action in ("reconfigure", "retry") and st.args[0] not in procs | {"auto", "*"}:
            raise ScenarioError(f"unknown process {st.args[0]}", field="steps")
        if st.action == "reconfigure" and len(st.args) > 1 and st.args[1] not in shards:
            raise ScenarioError(f"unknown shard {st.args[1]}", field="steps")


def load(path) -> SimConfig:
    with open(path) as fh:
        return loads(fh.read())


def dumps(cfg: SimConfig) -> str:
    """Write a config back out in scenario syntax."""
    def rng(r):
        return f"{r[0]}-{r[1]}"
    lines = [f"{HEADER} {FORMAT_VERSION}", "[system]",
             f"shards = {cfg.shards}", f"replicas = {cfg.replicas}", f"pool = {cfg.pool}",
             f"model = {cfg.model}", f"seed = {cfg.seed}", f"latency = {rng(cfg.latency)}",
             f"ack_latency = {rng(cfg.ack_latency)}", f"pull_delay = {rng(cfg.pull_delay)}",
             f"capacity = {cfg.rdma_capacity}", f"max_steps = {cfg.max_steps}", "", "[workload]"]
    wl = cfg.workload
    lines += [f"generate = {wl.generate}", f"conflict_rate = {wl.conflict_rate}",
              f"horizon = {wl.horizon}", f"clients = {wl.clients}",
              f"hot_objects = {wl.hot_objects}", f"colocate = {'yes' if wl.colocate_clients else 'no'}"]
    for t in wl.txns:
        parts = []
        if t.coordinator:
            parts.append(f"coord={t.coordinator}")
        if t.client:
            parts.append(f"client={t.client}")
        parts.append("reads=" + ",".join(o if v is None else f"{o}@{v}" for o, v in t.reads))
        if t.writes:
            parts.append("writes=" + ",".join(f"{o}={v}" for o, v in t.writes))
        if t.commit_version is not None:
            parts.append(f"vc={t.commit_version}")
        lines.append(f"{t.t} = " + " ".join(parts))
    lines += ["", "[faults]"]
    if cfg.faults is not None:
        f = cfg.faults
        lines += ["random = yes", f"crash_prob = {f.crash_prob}",
                  f"reconfigure_prob = {f.reconfigure_prob}", f"retry_prob = {f.retry_prob}",
                  f"horizon = {f.horizon}"]
    lines.append("steps =")
    for st in cfg.script:
        toks = ([f"at={st.at}"] if st.at is not None else []) + [st.action]
        toks += [str(a) for a in st.args] + [f"{k}={v}" for k, v in st.opts]
        lines.append("    " + " ".join(toks))
    return "\n".join(lines) + "\n"


# -- built-ins ----------------------------------------------------------------

BUILTINS = {
    "fig2a": """#! ratc-scenario 1
# Failure-free commit across two shards.  t1 answers a remote client,
# t2 a client living on the coordinator.
[system]
shards = 2
replicas = 2
pool = 0
model = mp
latency = 1-1

[workload]
t1 = coord=p1 client=c1 reads=s1:x@0,s2:y@0 writes=s1:x=a,s2:y=b
t2 = coord=p1 client=p1 reads=s1:u@0,s2:v@0 writes=s1:u=c,s2:v=d

[faults]
steps =
    at=0 certify t1
    certify t2
""",
    "fig2b": """#! ratc-scenario 1
# The leader of s1 fails; its follower takes over and a fresh process
# joins.  A transaction certified afterwards commits under the new
# configuration.
[system]
shards = 2
replicas = 2
pool = 1
model = mp
latency = 1-1

[workload]
t1 = coord=p3 client=c1 reads=s1:x@0,s2:y@0 writes=s1:x=a,s2:y=b
t2 = coord=p3 client=c1 reads=s1:x@1,s2:y@1 writes=s1:x=c,s2:y=d

[faults]
steps =
    certify t1
    crash p1
    reconfigure p2 s1
    certify t2
""",
    "fig4a": """#! ratc-scenario 1
# The coordinator p5 (shard s3) persists t1's s1 vote, then stalls while
# s2 loses its leader and p5 itself is voted out.  p1 retries t1 and gets
# ABORT because the new s2 leader never saw it.  Finally p5's stalled
# write to p4 goes through.
[system]
shards = 3
replicas = 2
pool = 2
model = rdma
latency = 1-1

[workload]
t1 = coord=p5 client=c1 reads=s1:x@0,s2:y@0 writes=s1:x=a,s2:y=b

[faults]
steps =
    hold late src=p5 dst=p4 kind=ACCEPT
    hold stale dst=p5 kind=CONFIG_CHANGE
    certify t1
    crash p3
    reconfigure p4 s2
    hold deaf dst=p5 kind=PROBE
    reconfigure p1 s3
    retry p1 t1
    release late
    release stale
    release deaf
""",
    "lost-txn": """#! ratc-scenario 1
# t1 is prepared at s1 before t2, but only t2 reaches the follower.
# Leader and t1's coordinator crash; after reconfiguration t1 is gone.
[system]
shards = 2
replicas = 2
pool = 1
model = mp
latency = 1-1

[workload]
t1 = coord=p3 client=c1 reads=s1:x@0 writes=s1:x=a
t2 = coord=p4 client=c2 reads=s1:y@0 writes=s1:y=b

[faults]
steps =
    hold slow src=p3 dst=p2 kind=ACCEPT
    certify t1
    certify t2
    crash p1
    crash p3
    reconfigure p4 s1
    release slow
""",
    "retry-spurious": """#! ratc-scenario 1
# Coordinators in s3 are suspected while alive.  p3 takes over t1 (both
# leaders hold the payload) and t2 (s1 never saw t2's PREPARE, so it
# votes ABORT).  The original coordinators finish afterwards.
[system]
shards = 3
replicas = 2
pool = 1
model = mp
latency = 1-1

[workload]
t1 = coord=p5 client=c1 reads=s1:x@0,s2:y@0 writes=s1:x=a,s2:y=b
t2 = coord=p6 client=c2 reads=s1:u@0,s2:v@0 writes=s1:u=c,s2:v=d

[faults]
steps =
    hold slow-accept src=p5 dst=p2 kind=ACCEPT
    hold slow-prepare src=p6 dst=p1 kind=PREPARE
    certify t1
    certify t2
    retry p3 t1
    retry p3 t2
    release slow-accept
    release slow-prepare
""",
    "corpus": """#! ratc-scenario 1
# Base scenario for fuzzing: random transactions plus at most one crash
# and one reconfiguration per shard.
[system]
shards = 3
replicas = 2
pool = 2
model = mp
latency = 1-3

[workload]
generate = 8
conflict_rate = 0.3
horizon = 20

[faults]
random = yes
""",
}


def builtin(name: str) -> SimConfig:
    if name not in BUILTINS:
        raise KeyError(f"unknown builtin scenario {name!r}; try: {', '.join(BUILTINS)}")
    return loads(BUILTINS[name])


def resolve(spec: str) -> SimConfig:
    """A builtin name or a path to a scenario file."""
    if spec in BUILTINS:
        return builtin(spec)
    return load(spec)


def with_overrides(cfg: SimConfig, seed=None, model=None, max_steps=None) -> SimConfig:
    kw = {}
    if seed is not None:
        kw["seed"] = seed
    if model is not None:
        kw["model"] = model
    if max_steps is not None:
        kw["max_steps"] = max_steps
    return replace(cfg, **kw) if kw else cfg


def execute(cfg: SimConfig):
    """Run ``cfg`` and stamp the scenario text into the trace header so the
    trace alone is enough to reproduce it."""
    from .simulator import run
    trace = run(cfg)
    trace.header["meta"]["scenario"] = dumps(cfg)
    return trace


def reproduce(trace):
    """Re-simulate the scenario recorded in ``trace``'s header."""
    text = trace.meta.get("scenario")
    if text is None:
        raise ScenarioError("trace carries no scenario; it cannot be re-simulated")
    return execute(loads(text))
