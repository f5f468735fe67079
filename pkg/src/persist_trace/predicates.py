"""Field predicates and capture extractors over audit events.

Kept apart from :mod:`persist_trace.rules` because expert-edge rules in the
provenance layer use the same predicate language.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Optional

from .ingest import AuditEvent, basename, canon, canon_text

OPS = ("equals", "prefix", "suffix", "contains", "in_set", "glob")
EXTRACTORS = ("none", "basename", "stem", "segment_after", "token_after", "first_token")

_PROCESS_FIELDS = ("guid", "pid", "image", "cmdline", "parent", "name")
_OBJECT_FIELDS = (
    "path", "name", "reg_key", "value_name", "value", "ip", "port", "direction",
    "account", "domain", "src_host",
)


def _event_fields() -> frozenset:
    paths = {"id", "ts", "host", "type"}
    paths.update(f"actor.{f}" for f in _PROCESS_FIELDS)
    paths.update(f"object.{f}" for f in _OBJECT_FIELDS)
    paths.update(f"object.child.{f}" for f in _PROCESS_FIELDS)
    paths.update(f"object.peer.{f}" for f in _PROCESS_FIELDS)
    return frozenset(paths)


EVENT_FIELDS = _event_fields()
PROCESS_FIELDS = frozenset(_PROCESS_FIELDS)


class FieldUnresolvable(KeyError):
    pass


def _getter(path: str) -> Callable[[Any], Any]:
    if path == "id":
        return lambda e: e.event_id
    if path == "type":
        return lambda e: e.event_type.value
    parts = tuple(path.split("."))
    if len(parts) == 1:
        name = parts[0]
        return lambda e: getattr(e, name, None)
    if len(parts) == 2:
        a, b = parts
        return lambda e: getattr(getattr(e, a, None), b, None)
    if len(parts) == 3:
        a, b, c = parts
        return lambda e: getattr(getattr(getattr(e, a, None), b, None), c, None)

    def get(e, parts=parts):
        for p in parts:
            e = getattr(e, p, None)
            if e is None:
                return None
        return e

    return get


GETTERS = {p: _getter(p) for p in EVENT_FIELDS}


def resolve(event: AuditEvent, path: str):
    """Value of a dotted field on an event, or None when the event lacks it."""
    try:
        return GETTERS[path](event)
    except KeyError:
        raise FieldUnresolvable(path) from None


@dataclass(frozen=True)
class Predicate:
    field: str
    op: str
    values: tuple
    negate: bool = False

    def __post_init__(self):
        if self.op not in OPS:
            raise ValueError(f"unknown predicate op {self.op!r}")
        if not self.values:
            raise ValueError(f"predicate on {self.field!r} has no values")
        vals = tuple(canon(v) for v in self.values)
        object.__setattr__(self, "_canon", vals)
        if self.op in ("equals", "in_set"):
            m = frozenset(vals).__contains__
        elif self.op == "prefix":
            m = lambda v: v.startswith(vals)
        elif self.op == "suffix":
            m = lambda v: v.endswith(vals)
        elif self.op == "contains":
            m = lambda v: any(x in v for x in vals)
        else:
            m = lambda v: any(fnmatch.fnmatchcase(v, x) for x in vals)
        object.__setattr__(self, "_match", m)
        object.__setattr__(self, "_get", GETTERS.get(self.field))

    @classmethod
    def from_dict(cls, doc: Mapping, fields: frozenset = EVENT_FIELDS) -> "Predicate":
        field_ = doc.get("field")
        if field_ not in fields:
            raise FieldUnresolvable(field_)
        raw = doc.get("values", doc.get("value"))
        values = tuple(raw) if isinstance(raw, (list, tuple)) else (raw,)
        if any(v is None for v in values):
            raise ValueError(f"predicate on {field_!r} has no value")
        return cls(field_, doc.get("op", "equals"), tuple(str(v) if not isinstance(v, bool) else v for v in values),
                   bool(doc.get("negate", False)))

    def to_dict(self) -> dict:
        d = {"field": self.field, "op": self.op}
        if len(self.values) == 1:
            d["value"] = self.values[0]
        else:
            d["values"] = list(self.values)
        if self.negate:
            d["negate"] = True
        return d

    def test_value(self, raw) -> bool:
        if raw is None:
            return self.negate
        v = canon_text(raw) if type(raw) is str else canon(raw)
        return self._match(v) != self.negate


def check_condition(cond: Predicate, e: AuditEvent) -> bool:
    """Evaluate one predicate against one event.

    Comparison uses :func:`canon` on both sides, so Windows paths, registry
    keys and command lines compare case-insensitively. A field the event does
    not carry evaluates as "no match" before negation.
    """
    get = cond._get
    if get is None:
        raise FieldUnresolvable(cond.field)
    return cond.test_value(get(e))


def check_process(cond: Predicate, attrs: Mapping) -> bool:
    """Evaluate a process predicate (``image``, ``cmdline``, ...) against node attrs."""
    if cond.field == "name":
        raw = basename(attrs.get("image") or "") or None
    else:
        raw = attrs.get(cond.field)
    return cond.test_value(raw)


def _unquote_token(rest: str) -> str:
    rest = rest.lstrip()
    if not rest:
        return ""
    if rest[0] in "\"'":
        end = rest.find(rest[0], 1)
        return rest[1:] if end < 0 else rest[1:end]
    for i, ch in enumerate(rest):
        if ch in " ,":
            return rest[:i]
    return rest


def extract(raw: Optional[str], how: str = "none", arg: str = "") -> Optional[str]:
    """Pull an alignment token out of a field value."""
    if raw is None:
        return None
    raw = str(raw)
    if how == "none":
        out = raw
    elif how == "basename":
        out = basename(raw)
    elif how == "stem":
        b = basename(raw)
        out = b.rsplit(".", 1)[0] if "." in b else b
    elif how == "segment_after":
        parts = [p for p in raw.replace("\\", "/").split("/")]
        want = arg.lower()
        out = None
        for i, p in enumerate(parts[:-1]):
            if p.lower() == want:
                out = parts[i + 1]
                break
    elif how == "token_after":
        i = raw.lower().find(arg.lower())
        out = None if i < 0 else _unquote_token(raw[i + len(arg):])
    elif how == "first_token":
        out = _unquote_token(raw)
    else:
        raise ValueError(f"unknown extractor {how!r}")
    if not out:
        return None
    return canon(out)


@dataclass(frozen=True)
class Capture:
    field: str
    how: str = "none"
    arg: str = ""

    def __post_init__(self):
        if self.how not in EXTRACTORS:
            raise ValueError(f"unknown extractor {self.how!r}")

    @classmethod
    def from_spec(cls, spec, fields: frozenset = EVENT_FIELDS) -> "Capture":
        if isinstance(spec, str):
            spec = {"field": spec}
        if spec.get("field") not in fields:
            raise FieldUnresolvable(spec.get("field"))
        return cls(spec["field"], spec.get("extract", "none"), str(spec.get("arg", "")))

    def to_spec(self):
        if self.how == "none":
            return self.field
        d = {"field": self.field, "extract": self.how}
        if self.arg:
            d["arg"] = self.arg
        return d

    def apply(self, e: AuditEvent) -> Optional[str]:
        return extract(GETTERS[self.field](e), self.how, self.arg)
