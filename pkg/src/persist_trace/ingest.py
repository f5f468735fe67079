"""Audit-event parsing, canonicalization and the in-memory event store."""

from __future__ import annotations

import bisect
import contextlib
import functools
import gc
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

logger = logging.getLogger(__name__)

STORE_HEADER = "persist-trace-store v1"
EVENTS_FILE = "events.ndjson"
INDEX_FILE = "index.json"


class EventType(str, Enum):
    PROCESS_CREATE = "PROCESS_CREATE"
    PROCESS_TERMINATE = "PROCESS_TERMINATE"
    FILE_WRITE = "FILE_WRITE"
    FILE_READ = "FILE_READ"
    FILE_DELETE = "FILE_DELETE"
    REG_SET = "REG_SET"
    REG_READ = "REG_READ"
    REG_DELETE = "REG_DELETE"
    NET_CONNECT = "NET_CONNECT"
    NET_ACCEPT = "NET_ACCEPT"
    MODULE_LOAD = "MODULE_LOAD"
    ACCOUNT_CREATE = "ACCOUNT_CREATE"
    LOGIN = "LOGIN"
    # broker IPC (ALPC-like); only emitted by the paired-corpus generator
    IPC_SEND = "IPC_SEND"


_TYPES = {t.value: t for t in EventType}

FILE_TYPES = frozenset({EventType.FILE_WRITE, EventType.FILE_READ, EventType.FILE_DELETE, EventType.MODULE_LOAD})
REG_TYPES = frozenset({EventType.REG_SET, EventType.REG_READ, EventType.REG_DELETE})
NET_TYPES = frozenset({EventType.NET_CONNECT, EventType.NET_ACCEPT})
ACCOUNT_TYPES = frozenset({EventType.ACCOUNT_CREATE, EventType.LOGIN})


class ParseError(ValueError):
    """A record could not be turned into an AuditEvent.

    ``kind`` is one of malformed_document, missing_field, bad_enum,
    bad_timestamp, bad_object, inconsistent_lineage.
    """

    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind
        self.detail = detail


class AbortOnMalformed(RuntimeError):
    def __init__(self, source: str, line_no: int, error: ParseError):
        super().__init__(f"{source}:{line_no}: {error}")
        self.source = source
        self.line_no = line_no
        self.error = error


# ---------------------------------------------------------------------------
# canonicalization

_HIVES = {
    "hkey_local_machine": "hklm",
    "hkey_current_user": "hkcu",
    "hkey_users": "hku",
    "hkey_classes_root": "hkcr",
    "hkey_current_config": "hkcc",
}


@contextlib.contextmanager
def paused_gc():
    """Suspend the cyclic collector; bulk stages allocate acyclic records only."""
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


def canon(value) -> str:
    """Canonical comparison form of a string field.

    POSIX-style values (leading ``/``) are kept verbatim; everything else is
    treated as Windows-ish and lowercased, with long registry hive names
    folded to their short aliases.
    """
    if not isinstance(value, str):
        if isinstance(value, bool):
            return "true" if value else "false"
        return str(value)
    return canon_text(value)


@functools.lru_cache(maxsize=1 << 18)
def canon_text(value: str) -> str:
    if value.startswith("/"):
        return value
    v = value.lower()
    if v.startswith("hkey_"):
        head, sep, rest = v.partition("\\")
        short = _HIVES.get(head)
        if short is not None:
            v = short + sep + rest
    return v


def basename(path: str) -> str:
    cut = max(path.rfind("\\"), path.rfind("/"))
    return path[cut + 1:]


# ---------------------------------------------------------------------------
# event model


@dataclass(frozen=True, slots=True)
class ProcessRef:
    guid: str
    pid: int = -1
    image: str = ""
    cmdline: str = ""
    parent: str = ""

    @property
    def name(self) -> str:
        return basename(self.image)


@dataclass(frozen=True, slots=True)
class FileObject:
    path: str

    @property
    def name(self) -> str:
        return basename(self.path)

    def key(self) -> str:
        return canon(self.path)


@dataclass(frozen=True, slots=True)
class RegistryObject:
    reg_key: str
    value_name: Optional[str] = None
    value: Optional[str] = None

    @property
    def name(self) -> str:
        return basename(self.reg_key)

    def key(self) -> str:
        return canon(self.reg_key)


@dataclass(frozen=True, slots=True)
class NetObject:
    ip: str
    port: int
    direction: str = "out"

    def key(self) -> str:
        return f"{self.ip}:{self.port}"


@dataclass(frozen=True, slots=True)
class AccountObject:
    account: str
    domain: bool = False
    ip: Optional[str] = None
    src_host: Optional[str] = None

    def key(self) -> str:
        return canon(self.account)


@dataclass(frozen=True, slots=True)
class ProcessObject:
    child: ProcessRef

    def key(self) -> str:
        return self.child.guid


@dataclass(frozen=True, slots=True)
class IpcObject:
    peer: ProcessRef

    def key(self) -> str:
        return self.peer.guid


EventObject = Union[FileObject, RegistryObject, NetObject, AccountObject, ProcessObject, IpcObject, None]


@dataclass(frozen=True, slots=True)
class AuditEvent:
    event_id: str
    ts: int
    host: str
    event_type: EventType
    actor: ProcessRef
    object: EventObject = None

    @property
    def object_key(self) -> Optional[str]:
        return None if self.object is None else self.object.key()

    @property
    def sort_key(self) -> tuple:
        return (self.ts, self.event_id)


# ---------------------------------------------------------------------------
# parsing


def _req(doc: dict, name: str, ctx: str = ""):
    try:
        return doc[name]
    except KeyError:
        raise ParseError("missing_field", ctx + name) from None


def _str(doc: dict, name: str, ctx: str, required: bool = True, default=""):
    if name not in doc or doc[name] is None:
        if required:
            raise ParseError("missing_field", ctx + name)
        return default
    v = doc[name]
    if not isinstance(v, str):
        raise ParseError("bad_object", f"{ctx}{name} must be a string")
    return v


@functools.lru_cache(maxsize=1 << 16)
def _cached_process(guid, pid, image, cmdline, parent) -> ProcessRef:
    # actors repeat a lot, so identical records share one instance
    return ProcessRef(guid, pid, image or "", cmdline or "", parent or "")


def _process(doc, ctx: str) -> ProcessRef:
    if type(doc) is dict:
        guid, pid = doc.get("guid"), doc.get("pid", -1)
        image, cmdline, parent = doc.get("image"), doc.get("cmdline"), doc.get("parent")
        if (type(guid) is str and guid and type(pid) is int
                and all(v is None or type(v) is str for v in (image, cmdline, parent))):
            return _cached_process(guid, pid, image, cmdline, parent)
    if not isinstance(doc, dict):
        raise ParseError("bad_object", f"{ctx} must be an object")
    guid = _str(doc, "guid", ctx + ".")
    if not guid:
        raise ParseError("missing_field", ctx + ".guid")
    pid = doc.get("pid", -1)
    if isinstance(pid, bool) or not isinstance(pid, int):
        raise ParseError("bad_object", f"{ctx}.pid must be an integer")
    return ProcessRef(
        guid,
        pid,
        _str(doc, "image", ctx + ".", False),
        _str(doc, "cmdline", ctx + ".", False),
        _str(doc, "parent", ctx + ".", False),
    )


def _object(etype: EventType, doc, actor: ProcessRef) -> EventObject:
    if etype is EventType.PROCESS_TERMINATE and not doc:
        return None
    if not isinstance(doc, dict):
        raise ParseError("missing_field" if doc is None else "bad_object", "object")
    if etype is EventType.PROCESS_CREATE:
        if "child" not in doc:
            raise ParseError("missing_field", "object.child")
        child = _process(doc["child"], "object.child")
        if not child.parent:
            child = ProcessRef(child.guid, child.pid, child.image, child.cmdline, actor.guid)
        elif child.parent != actor.guid:
            raise ParseError("inconsistent_lineage", f"child parent {child.parent!r} != actor {actor.guid!r}")
        return ProcessObject(child)
    if etype in FILE_TYPES:
        return FileObject(_str(doc, "path", "object."))
    if etype in REG_TYPES:
        return RegistryObject(
            _str(doc, "reg_key", "object."),
            _str(doc, "value_name", "object.", False, None),
            _str(doc, "value", "object.", False, None),
        )
    if etype in NET_TYPES:
        ip = _str(doc, "ip", "object.")
        port = _req(doc, "port", "object.")
        if isinstance(port, bool) or not isinstance(port, int) or not 0 <= port <= 65535:
            raise ParseError("bad_object", "object.port")
        default_dir = "out" if etype is EventType.NET_CONNECT else "in"
        direction = _str(doc, "direction", "object.", False, default_dir)
        if direction not in ("in", "out"):
            raise ParseError("bad_enum", f"direction {direction!r}")
        return NetObject(ip, port, direction)
    if etype in ACCOUNT_TYPES:
        domain = doc.get("domain", False)
        if not isinstance(domain, bool):
            raise ParseError("bad_object", "object.domain must be boolean")
        return AccountObject(
            _str(doc, "account", "object."),
            domain,
            _str(doc, "ip", "object.", False, None),
            _str(doc, "src_host", "object.", False, None),
        )
    if etype is EventType.IPC_SEND:
        if "peer" not in doc:
            raise ParseError("missing_field", "object.peer")
        return IpcObject(_process(doc["peer"], "object.peer"))
    return None  # PROCESS_TERMINATE with a non-empty object: ignored


def event_from_dict(doc) -> AuditEvent:
    if not isinstance(doc, dict):
        raise ParseError("malformed_document", "record is not a JSON object")
    event_id = _str(doc, "id", "")
    if not event_id:
        raise ParseError("missing_field", "id")
    if "ts" not in doc:
        raise ParseError("missing_field", "ts")
    ts = doc["ts"]
    if isinstance(ts, bool) or not isinstance(ts, (int, float)):
        raise ParseError("bad_timestamp", repr(ts))
    if isinstance(ts, float):
        if not math.isfinite(ts):
            raise ParseError("bad_timestamp", repr(ts))
        if ts.is_integer():
            ts = int(ts)
    if ts < 0:
        raise ParseError("bad_timestamp", repr(ts))
    host = _str(doc, "host", "")
    raw_type = _req(doc, "type")
    etype = _TYPES.get(raw_type) if isinstance(raw_type, str) else None
    if etype is None:
        raise ParseError("bad_enum", repr(raw_type))
    if "actor" not in doc:
        raise ParseError("missing_field", "actor")
    actor = _process(doc["actor"], "actor")
    obj = _object(etype, doc.get("object"), actor)
    return AuditEvent(event_id, ts, host, etype, actor, obj)


_raw_decode = json.JSONDecoder().raw_decode


def _loads(line: str):
    # raw_decode skips json.loads' whitespace regex; anything unusual goes
    # through json.loads for its error message
    try:
        doc, end = _raw_decode(line)
    except ValueError:
        return json.loads(line)
    if end != len(line) and line[end:].strip():
        return json.loads(line)
    return doc


def parse_event(line: str) -> AuditEvent:
    try:
        doc = _loads(line)
    except (ValueError, TypeError) as exc:
        raise ParseError("malformed_document", str(exc)) from None
    return event_from_dict(doc)


def _process_dict(p: ProcessRef) -> dict:
    d = {"guid": p.guid}
    if p.pid != -1:
        d["pid"] = p.pid
    if p.image:
        d["image"] = p.image
    if p.cmdline:
        d["cmdline"] = p.cmdline
    if p.parent:
        d["parent"] = p.parent
    return d


def _object_dict(o: EventObject) -> Optional[dict]:
    if o is None:
        return None
    if isinstance(o, ProcessObject):
        return {"child": _process_dict(o.child)}
    if isinstance(o, IpcObject):
        return {"peer": _process_dict(o.peer)}
    if isinstance(o, FileObject):
        return {"path": o.path}
    if isinstance(o, RegistryObject):
        d = {"reg_key": o.reg_key}
        if o.value_name is not None:
            d["value_name"] = o.value_name
        if o.value is not None:
            d["value"] = o.value
        return d
    if isinstance(o, NetObject):
        return {"ip": o.ip, "port": o.port, "direction": o.direction}
    d = {"account": o.account, "domain": o.domain}
    if o.ip is not None:
        d["ip"] = o.ip
    if o.src_host is not None:
        d["src_host"] = o.src_host
    return d


def event_to_dict(e: AuditEvent) -> dict:
    d = {
        "id": e.event_id,
        "ts": e.ts,
        "host": e.host,
        "type": e.event_type.value,
        "actor": _process_dict(e.actor),
    }
    obj = _object_dict(e.object)
    if obj is not None:
        d["object"] = obj
    return d


def serialize_event(e: AuditEvent) -> str:
    return json.dumps(event_to_dict(e), separators=(",", ":"), ensure_ascii=False)


# ---------------------------------------------------------------------------
# store


class EventStore:
    """Time-ordered, indexed, read-only collection of events.

    Events are ordered by ``(ts, event_id)``. Indexes map a key to the
    ascending list of positions in :attr:`events`.
    """

    def __init__(self, events: Iterable[AuditEvent] = (), skipped: int = 0, presorted: bool = False):
        evs = list(events)
        if not presorted:
            evs.sort(key=lambda e: (e.ts, e.event_id))
        self.events: list[AuditEvent] = evs
        self.skipped = skipped
        self.by_id: dict[str, int] = {}
        self.by_actor: dict[str, list[int]] = {}
        self.by_object: dict[str, list[int]] = {}
        self.by_type: dict[EventType, list[int]] = {}
        self.by_host: dict[str, list[int]] = {}
        self._ts: list = []
        self._build()

    def _build(self) -> None:
        by_id, by_actor, by_object = self.by_id, self.by_actor, self.by_object
        by_type, by_host, ts = self.by_type, self.by_host, self._ts
        for i, e in enumerate(self.events):
            if e.event_id in by_id:
                raise ValueError(f"duplicate event id {e.event_id!r}")
            by_id[e.event_id] = i
            by_actor.setdefault(e.actor.guid, []).append(i)
            if e.object is not None:
                by_object.setdefault(e.object.key(), []).append(i)
            by_type.setdefault(e.event_type, []).append(i)
            by_host.setdefault(e.host, []).append(i)
            ts.append(e.ts)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[AuditEvent]:
        return iter(self.events)

    def __getitem__(self, i: int) -> AuditEvent:
        return self.events[i]

    def get(self, event_id: str) -> Optional[AuditEvent]:
        i = self.by_id.get(event_id)
        return None if i is None else self.events[i]

    def position(self, event_id: str) -> int:
        return self.by_id[event_id]

    def of_type(self, *types: EventType) -> list[AuditEvent]:
        if len(types) == 1:
            return [self.events[i] for i in self.by_type.get(types[0], ())]
        pos = sorted(i for t in types for i in self.by_type.get(t, ()))
        return [self.events[i] for i in pos]

    def window_positions(self, lo, hi) -> range:
        return range(bisect.bisect_left(self._ts, lo), bisect.bisect_right(self._ts, hi))


def query(
    store: EventStore,
    event_type: Optional[EventType] = None,
    actor_guid: Optional[str] = None,
    object_key: Optional[str] = None,
    time_window: Optional[tuple] = None,
) -> list[AuditEvent]:
    """Conjunctive lookup; result keeps store order. ``time_window`` is inclusive."""
    candidates: list = []
    if event_type is not None:
        candidates.append(store.by_type.get(EventType(event_type), []))
    if actor_guid is not None:
        candidates.append(store.by_actor.get(actor_guid, []))
    if object_key is not None:
        candidates.append(store.by_object.get(canon(object_key), []))
    if time_window is not None:
        lo, hi = time_window
        if not candidates:
            return [store.events[i] for i in store.window_positions(lo, hi)]
    if not candidates:
        return list(store.events)
    candidates.sort(key=len)
    base, rest = candidates[0], [set(c) for c in candidates[1:]]
    out = []
    for i in base:
        if all(i in s for s in rest):
            e = store.events[i]
            if time_window is not None and not (time_window[0] <= e.ts <= time_window[1]):
                continue
            out.append(e)
    return out


Source = Union[str, os.PathLike, io.IOBase, Iterable[str]]


def _lines(src: Source) -> tuple[str, Iterable[str], Optional[io.IOBase]]:
    if isinstance(src, (str, os.PathLike)):
        fh = open(src, encoding="utf-8")
        return str(src), fh, fh
    return getattr(src, "name", "<stream>"), src, None


def load_corpus(sources: Iterable[Source], strict: bool = False) -> EventStore:
    """Parse NDJSON streams into one store.

    Blank lines are ignored. In lenient mode malformed lines (and repeated
    event ids) are counted in ``store.skipped``; in strict mode the first
    failure raises :class:`AbortOnMalformed`.
    """
    with paused_gc():
        return _load(sources, strict)


def _load(sources: Iterable[Source], strict: bool) -> EventStore:
    chosen: dict[str, tuple] = {}
    skipped = 0
    for src in sources:
        name, lines, fh = _lines(src)
        try:
            for line_no, line in enumerate(lines, 1):
                if not line.strip():
                    continue
                try:
                    ev = parse_event(line)
                except ParseError as err:
                    if strict:
                        raise AbortOnMalformed(name, line_no, err) from None
                    logger.warning("%s:%d skipped (%s)", name, line_no, err)
                    skipped += 1
                    continue
                prev = chosen.get(ev.event_id)
                if prev is None:
                    chosen[ev.event_id] = (ev, None)
                    continue
                if strict:
                    raise AbortOnMalformed(name, line_no, ParseError("duplicate_id", ev.event_id))
                skipped += 1
                # keep the same survivor whatever the stream order
                a = (prev[0].ts, prev[1] or serialize_event(prev[0]))
                b = (ev.ts, serialize_event(ev))
                if b < a:
                    chosen[ev.event_id] = (ev, b[1])
                elif prev[1] is None:
                    chosen[ev.event_id] = (prev[0], a[1])
        finally:
            if fh is not None:
                fh.close()
    return EventStore((v[0] for v in chosen.values()), skipped=skipped)


def save_store(store: EventStore, out_dir: Union[str, os.PathLike]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256()
    with open(out / EVENTS_FILE, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(STORE_HEADER + "\n")
        for e in store.events:
            line = serialize_event(e) + "\n"
            digest.update(line.encode("utf-8"))
            fh.write(line)
    index = {
        "format": STORE_HEADER,
        "events": len(store),
        "skipped": store.skipped,
        "sha256": digest.hexdigest(),
        "by_type": {t.value: len(v) for t, v in sorted(store.by_type.items(), key=lambda kv: kv[0].value)},
        "by_host": {h: len(v) for h, v in sorted(store.by_host.items())},
        "ts_range": [store.events[0].ts, store.events[-1].ts] if store.events else None,
    }
    with open(out / INDEX_FILE, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def open_store(store_dir: Union[str, os.PathLike]) -> EventStore:
    """Re-open a store written by :func:`save_store`."""
    path = Path(store_dir)
    events_path = path / EVENTS_FILE
    if not events_path.is_file():
        raise FileNotFoundError(f"no event store at {path}")
    with open(events_path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != STORE_HEADER:
            raise ValueError(f"{events_path}: unsupported store header {header!r}")
        with paused_gc():
            events = [event_from_dict(json.loads(line)) for line in fh if line.strip()]
    skipped = 0
    idx = path / INDEX_FILE
    if idx.is_file():
        with open(idx, encoding="utf-8") as fh:
            skipped = json.load(fh).get("skipped", 0)
    return EventStore(events, skipped=skipped, presorted=True)
