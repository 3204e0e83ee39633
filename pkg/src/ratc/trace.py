"""Execution traces and their line-delimited JSON form.

A trace is a header plus an ordered list of records.  Each record is a
dict with ``step``, ``time``, ``kind``, ``src``, ``dst`` and ``data``;
``data`` holds live Python values (messages, payloads, states) while in
memory.  `dump`/`load` round-trip those values through a tagged JSON
encoding so checkers see identical objects either way.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
from enum import Enum
from typing import Iterable

from . import certification, config_service, messages, protocol_mp

FORMAT = "ratc-trace"
VERSION = 1


class TraceVersionError(ValueError):
    pass


def _classes() -> dict:
    out = {}
    for mod in (certification, config_service, messages, protocol_mp):
        for name in dir(mod):
            obj = getattr(mod, name)
            if isinstance(obj, type) and obj.__module__ == mod.__name__:
                if dataclasses.is_dataclass(obj) or issubclass(obj, Enum) or hasattr(obj, "_fields"):
                    out[name] = obj
    from . import protocol_rdma
    out["RecStatus"] = protocol_rdma.RecStatus
    return out


_CLASSES = None


def classes() -> dict:
    global _CLASSES
    if _CLASSES is None:
        _CLASSES = _classes()
    return _CLASSES


def encode(v):
    if v is None or isinstance(v, (bool, int, float)):
        return v
    if isinstance(v, Enum):
        return {"_e": type(v).__name__, "v": v.value}
    if isinstance(v, str):
        return v
    if hasattr(v, "_fields"):
        return {"_t": type(v).__name__, "f": [encode(x) for x in v]}
    if dataclasses.is_dataclass(v):
        return {"_t": type(v).__name__,
                "f": [encode(getattr(v, f.name)) for f in dataclasses.fields(v)]}
    if isinstance(v, (tuple, list)):
        return [encode(x) for x in v]
    if isinstance(v, (set, frozenset)):
        items = [encode(x) for x in v]
        items.sort(key=lambda x: json.dumps(x, sort_keys=True))
        return {"_s": items}
    if isinstance(v, dict):
        return {"_d": [[encode(k), encode(x)] for k, x in v.items()]}
    raise TypeError(f"cannot encode {type(v).__name__}")


def decode(v):
    if isinstance(v, list):
        return tuple(decode(x) for x in v)
    if isinstance(v, dict):
        if "_e" in v:
            return classes()[v["_e"]](v["v"])
        if "_t" in v:
            cls = classes()[v["_t"]]
            return cls(*[decode(x) for x in v["f"]])
        if "_s" in v:
            return frozenset(decode(x) for x in v["_s"])
        if "_d" in v:
            return {decode(k): decode(x) for k, x in v["_d"]}
        raise ValueError(f"unknown tagged value {v!r}")
    return v


class Trace:
    def __init__(self, header: dict | None = None, records: list | None = None):
        self.header = header or {}
        self.records = records if records is not None else []

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def of_kind(self, *kinds) -> list:
        return [r for r in self.records if r["kind"] in kinds]

    @property
    def meta(self) -> dict:
        return self.header.get("meta", {})

    def dumps(self) -> str:
        buf = io.StringIO()
        self.write(buf)
        return buf.getvalue()

    def write(self, fh) -> None:
        head = {"format": FORMAT, "version": VERSION,
                "meta": {k: encode(v) for k, v in self.header.get("meta", {}).items()}}
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for r in self.records:
            data = {k: encode(v) for k, v in r["data"].items()}
            text = json.dumps(data, sort_keys=True)
            line = {"step": r["step"], "time": r["time"], "kind": r["kind"],
                    "src": r["src"], "dst": r["dst"],
                    "digest": hashlib.sha1(text.encode()).hexdigest()[:12], "data": data}
            fh.write(json.dumps(line, sort_keys=True) + "\n")

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            self.write(fh)

    @classmethod
    def loads(cls, text: str) -> "Trace":
        return cls.read(io.StringIO(text))

    @classmethod
    def read(cls, lines: Iterable[str]) -> "Trace":
        it = iter(lines)
        try:
            head = json.loads(next(it))
        except StopIteration:
            raise TraceVersionError("empty trace file") from None
        if head.get("format") != FORMAT:
            raise TraceVersionError(f"not a {FORMAT} file")
        if head.get("version") != VERSION:
            raise TraceVersionError(
                f"trace version {head.get('version')} is not supported (expected {VERSION})")
        header = {"meta": {k: decode(v) for k, v in head.get("meta", {}).items()}}
        records = []
        for line in it:
            if not line.strip():
                continue
            r = json.loads(line)
            records.append({"step": r["step"], "time": r["time"], "kind": r["kind"],
                            "src": r["src"], "dst": r["dst"],
                            "data": {k: decode(v) for k, v in r["data"].items()}})
        return cls(header, records)

    @classmethod
    def load(cls, path) -> "Trace":
        with open(path) as fh:
            return cls.read(fh)
