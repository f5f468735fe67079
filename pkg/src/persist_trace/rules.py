"""Detection rules: loading, validation and setup/execution matching.

Rule documents are YAML (one or more documents per file, ``---``
separated). See ``docs/rule-format.md`` for the grammar.
"""

from __future__ import annotations

import bisect
import logging
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import yaml

from .ingest import AuditEvent, EventStore, EventType, ProcessRef, canon
from .predicates import (
    PROCESS_FIELDS,
    Capture,
    FieldUnresolvable,
    Predicate,
    check_condition,
    check_process,
)
from .provenance import (
    EdgeLabel,
    ExpertEdgeRule,
    NodeKind,
    ProvenanceGraph,
    RuleError,
    lineage,
    object_node_id,
    path_down,
    proc_id,
)

logger = logging.getLogger(__name__)

SCHEMA = "persist-trace-rule/1"
DEFAULT_MAX_SPAN_MS = 30_000
TECHNIQUE_RE = re.compile(r"^T\d{4}(\.\d{3})?$")

# critical system programs whose writes at indicative locations are routine
DEFAULT_ALLOWLIST = frozenset(canon(p) for p in (
    r"C:\Windows\System32\services.exe",
    r"C:\Windows\System32\svchost.exe",
    r"C:\Windows\System32\lsass.exe",
    r"C:\Windows\System32\wininit.exe",
    r"C:\Windows\System32\winlogon.exe",
    r"C:\Windows\System32\smss.exe",
    r"C:\Windows\System32\csrss.exe",
    r"C:\Windows\System32\wbem\WmiPrvSE.exe",
    r"C:\Windows\System32\taskhostw.exe",
    r"C:\Windows\servicing\TrustedInstaller.exe",
    r"C:\Windows\explorer.exe",
    "/usr/lib/systemd/systemd",
    "/lib/systemd/systemd",
    "/sbin/init",
))

__all__ = [
    "Phase", "ConditionGroup", "DetectionRule", "RuleSet", "MatchRecord", "RuleError",
    "check_condition", "load_ruleset", "default_ruleset",
    "load_expert_rules", "default_expert_rules", "parse_rule", "match_setup",
    "match_execution", "DEFAULT_ALLOWLIST",
]


class Phase(str, Enum):
    SETUP = "setup"
    EXECUTION = "execution"
    # kill-chain context rules used by triage indicators
    CONTEXT = "context"


@dataclass(frozen=True)
class ConditionGroup:
    event_types: tuple
    predicates: tuple = ()
    captures: tuple = ()  # ((name, Capture), ...)
    correlate_on: Optional[str] = None

    def matches(self, e: AuditEvent) -> bool:
        if e.event_type not in self.event_types:
            return False
        for p in self.predicates:
            if not check_condition(p, e):
                return False
        return True

    def capture(self, e: AuditEvent) -> Optional[dict]:
        out = {}
        for name, cap in self.captures:
            v = cap.apply(e)
            if v is None:
                return None
            out[name] = v
        return out


@dataclass(frozen=True)
class DetectionRule:
    id: str
    technique: str
    tactic: str
    phase: Phase
    conditions: tuple
    max_span_ms: int = DEFAULT_MAX_SPAN_MS
    required_ancestor: tuple = ()
    anchor: Optional[str] = None
    launch_window_ms: Optional[int] = None
    suppress_if_deleted: bool = False
    sensitivity: str = "full"
    description: str = ""
    # setup and execution may sit on different hosts (domain-wide state)
    cross_host: bool = False

    @property
    def sequenced(self) -> bool:
        return len(self.conditions) > 1

    @property
    def capture_names(self) -> frozenset:
        return frozenset(n for g in self.conditions for n, _ in g.captures)

    @property
    def event_types(self) -> tuple:
        return self.conditions[-1].event_types


@dataclass(eq=True)
class MatchRecord:
    """One matched setup/execution/context action.

    ``event`` is the last event of the (possibly sequenced) match.
    ``initiator`` is the guid of the process the action is attributed to;
    it differs from ``event.actor`` when an expert-guided edge re-attributes
    a broker write. ``anchor`` is the remote-connection process for
    execution records.
    """

    event: AuditEvent
    label: str
    ts: int
    rule_id: str
    captures: dict
    tactic: str = ""
    initiator: str = ""
    anchor: str = ""
    events: tuple = ()

    @property
    def key(self) -> tuple:
        return (self.rule_id, self.event.event_id)

    def to_dict(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "label": self.label,
            "tactic": self.tactic,
            "ts": self.ts,
            "event_id": self.event.event_id,
            "events": list(self.events),
            "captures": dict(sorted(self.captures.items())),
            "initiator": self.initiator,
            "anchor": self.anchor,
        }


class RuleSet:
    def __init__(self, rules: Iterable[DetectionRule] = ()):
        self.rules: tuple = tuple(rules)
        ids = [r.id for r in self.rules]
        dup = sorted({i for i in ids if ids.count(i) > 1})
        if dup:
            raise RuleError(dup[0], "duplicate_id")
        self._by_id = {r.id: r for r in self.rules}
        self.setup = tuple(r for r in self.rules if r.phase is Phase.SETUP)
        self.execution = tuple(r for r in self.rules if r.phase is Phase.EXECUTION)
        self.context = tuple(r for r in self.rules if r.phase is Phase.CONTEXT)
        self._exec_by_type: dict = {}
        for r in self.execution:
            for t in r.event_types:
                self._exec_by_type.setdefault(t, []).append(r)
        self._ctx_by_type: dict = {}
        for r in self.context:
            for t in r.event_types:
                self._ctx_by_type.setdefault(t, []).append(r)

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self):
        return iter(self.rules)

    def get(self, rule_id: str) -> DetectionRule:
        return self._by_id[rule_id]

    def execution_for(self, etype: EventType) -> list:
        return self._exec_by_type.get(etype, [])

    def context_for(self, etype: EventType) -> list:
        return self._ctx_by_type.get(etype, [])

    def techniques(self, phase: Optional[Phase] = None) -> list[str]:
        return sorted({r.technique for r in self.rules if phase is None or r.phase is phase})

    def without(self, *phases: Phase) -> "RuleSet":
        return RuleSet(r for r in self.rules if r.phase not in phases)


# ---------------------------------------------------------------------------
# loading


def _captures(spec, rid: str) -> tuple:
    if not spec:
        return ()
    if not isinstance(spec, Mapping):
        raise RuleError(rid, "captures must be a mapping")
    try:
        return tuple((str(k), Capture.from_spec(v)) for k, v in spec.items())
    except FieldUnresolvable as exc:
        raise RuleError(rid, f"capture field unresolvable: {exc}") from None
    except (ValueError, TypeError, AttributeError) as exc:
        raise RuleError(rid, f"bad capture: {exc}") from None


def _group(doc, rid: str) -> ConditionGroup:
    if not isinstance(doc, Mapping):
        raise RuleError(rid, "condition group must be a mapping")
    types = doc.get("event_type")
    if types is None:
        raise RuleError(rid, "condition group needs event_type")
    types = types if isinstance(types, list) else [types]
    try:
        etypes = tuple(EventType(t) for t in types)
        preds = tuple(Predicate.from_dict(p) for p in doc.get("where") or [])
    except FieldUnresolvable as exc:
        raise RuleError(rid, f"field unresolvable: {exc}") from None
    except (ValueError, TypeError, AttributeError) as exc:
        raise RuleError(rid, f"bad predicate: {exc}") from None
    return ConditionGroup(etypes, preds, _captures(doc.get("captures"), rid), doc.get("correlate_on"))


def parse_rule(doc: Mapping) -> DetectionRule:
    """Validate one rule document."""
    rid = str(doc.get("id") or "")
    if not rid:
        raise RuleError("<unnamed>", "missing id")
    if doc.get("schema") != SCHEMA:
        raise RuleError(rid, f"schema must be {SCHEMA!r}")
    technique = str(doc.get("technique", ""))
    if not TECHNIQUE_RE.match(technique):
        raise RuleError(rid, f"bad technique label {technique!r}")
    try:
        phase = Phase(doc.get("phase"))
    except ValueError:
        raise RuleError(rid, f"bad phase {doc.get('phase')!r}") from None
    conds = doc.get("conditions")
    if not conds or not isinstance(conds, list):
        raise RuleError(rid, "conditions must be a non-empty list of groups")
    groups = tuple(_group(g, rid) for g in conds)
    names = {n for g in groups for n, _ in g.captures}
    for i, g in enumerate(groups):
        if g.correlate_on is not None:
            if i == 0:
                raise RuleError(rid, "correlate_on is not allowed on the first group")
            have = {n for n, _ in g.captures}
            prev = {n for n, _ in groups[i - 1].captures}
            if g.correlate_on not in have or g.correlate_on not in prev:
                raise RuleError(rid, f"correlate_on {g.correlate_on!r} must be captured by this and the previous group")
    if not names and phase is not Phase.CONTEXT:
        raise RuleError(rid, "setup/execution rules must declare at least one capture")
    try:
        ancestor = tuple(Predicate.from_dict(p, PROCESS_FIELDS) for p in doc.get("required_ancestor") or [])
    except FieldUnresolvable as exc:
        raise RuleError(rid, f"required_ancestor field unresolvable: {exc}") from None
    anchor = doc.get("anchor")
    window = doc.get("launch_window_ms")
    if phase is not Phase.EXECUTION and (ancestor or anchor or window):
        raise RuleError(rid, "required_ancestor/anchor/launch_window_ms are execution-only")
    if phase is Phase.EXECUTION and len(groups) > 1:
        raise RuleError(rid, "execution rules are single-event")
    if anchor not in (None, "actor", "child"):
        raise RuleError(rid, f"bad anchor {anchor!r}")
    if anchor == "child" and groups[-1].event_types != (EventType.PROCESS_CREATE,):
        raise RuleError(rid, "anchor: child needs a PROCESS_CREATE condition")
    span = int(doc.get("max_span_ms", DEFAULT_MAX_SPAN_MS))
    if span <= 0:
        raise RuleError(rid, "max_span_ms must be > 0")
    sensitivity = doc.get("sensitivity", "full")
    if sensitivity not in ("full", "partial"):
        raise RuleError(rid, f"bad sensitivity {sensitivity!r}")
    return DetectionRule(
        id=rid,
        technique=technique,
        tactic=str(doc.get("tactic", "persistence")),
        phase=phase,
        conditions=groups,
        max_span_ms=span,
        required_ancestor=ancestor,
        anchor=anchor,
        launch_window_ms=None if window is None else int(window),
        suppress_if_deleted=bool(doc.get("suppress_if_deleted", False)),
        sensitivity=sensitivity,
        cross_host=bool(doc.get("cross_host", False)),
        description=str(doc.get("description", "")).strip(),
    )


def iter_documents(path: Union[str, Path]) -> Iterable[tuple[Path, Mapping]]:
    root = Path(path)
    if not root.exists():
        raise FileNotFoundError(f"rules path not found: {root}")
    files = [root] if root.is_file() else sorted(
        p for p in root.rglob("*") if p.suffix in (".yaml", ".yml") and p.is_file())
    for f in files:
        with open(f, encoding="utf-8") as fh:
            try:
                docs = list(yaml.safe_load_all(fh))
            except yaml.YAMLError as exc:
                raise RuleError(f.name, f"unparseable document: {exc}") from None
        for d in docs:
            if d is None:
                continue
            if not isinstance(d, Mapping):
                raise RuleError(f.name, "rule document must be a mapping")
            yield f, d


def load_ruleset(path: Union[str, Path]) -> RuleSet:
    rules = [parse_rule(d) for _, d in iter_documents(path) if d.get("kind", "detection") == "detection"]
    if not rules:
        logger.warning("no detection rules found under %s", path)
    return RuleSet(rules)


def load_expert_rules(path: Union[str, Path]) -> list[ExpertEdgeRule]:
    out = []
    for _, d in iter_documents(path):
        if d.get("kind") != "expert-edge":
            continue
        if d.get("schema") != SCHEMA:
            raise RuleError(str(d.get("id")), f"schema must be {SCHEMA!r}")
        out.append(ExpertEdgeRule.from_dict(d))
    ids = [r.id for r in out]
    for i in ids:
        if ids.count(i) > 1:
            raise RuleError(i, "duplicate_id")
    return out


def bundled_path(*parts: str) -> Path:
    return Path(str(resources.files("persist_trace") / "data" / Path(*parts)))


def default_ruleset() -> RuleSet:
    return load_ruleset(bundled_path("rules"))


def default_expert_rules() -> list[ExpertEdgeRule]:
    return load_expert_rules(bundled_path("expert"))


# ---------------------------------------------------------------------------
# stage 1: setup matching


class _Suppressor:
    """The two stage-1 suppressions: allowlisted system writers and deleted DLLs."""

    def __init__(self, store: EventStore, allowlist: frozenset):
        self.allowlist = allowlist
        self.first_write: dict = {}
        self.last_delete: dict = {}
        for i in store.by_type.get(EventType.FILE_WRITE, ()):
            e = store.events[i]
            self.first_write.setdefault((e.host, e.object.key()), i)
        for i in store.by_type.get(EventType.FILE_DELETE, ()):
            e = store.events[i]
            self.last_delete[(e.host, e.object.key())] = i

    def allowlisted(self, e: AuditEvent, pos: int) -> bool:
        img = canon(e.actor.image)
        if img not in self.allowlist:
            return False
        w = self.first_write.get((e.host, img))
        return w is None or w > pos

    def deleted_later(self, e: AuditEvent, pos: int) -> bool:
        d = self.last_delete.get((e.host, e.object.key()))
        return d is not None and d > pos


def _expert_initiator(graph: Optional[ProvenanceGraph], e: AuditEvent) -> Optional[str]:
    if graph is None:
        return None
    nid = object_node_id(e)
    if nid is None or nid not in graph.nodes:
        return None
    best = None
    for i in graph.in_adj[nid]:
        edge = graph.edges[i]
        if edge.label is EdgeLabel.EXPERT and edge.ts == e.ts:
            src = graph.nodes[edge.src]
            if src.kind is NodeKind.PROCESS and (best is None or edge.src < best):
                best = edge.src
    return None if best is None else best[len("proc:"):]


def _link_ok(group: ConditionGroup, prev: tuple, cur: tuple) -> bool:
    (pe, pcap), (ce, ccap) = prev, cur
    if group.correlate_on is None:
        return pe.actor.guid == ce.actor.guid
    return pcap.get(group.correlate_on) == ccap.get(group.correlate_on)


def _sequence_for(rule: DetectionRule, store: EventStore, pos: int, cap: dict,
                  candidates: Sequence[list]) -> Optional[list]:
    """Lexicographically latest chain of earlier events completing ``pos``."""
    final = store.events[pos]
    lo_ts = final.ts - rule.max_span_ms
    k = len(rule.conditions)

    def search(gi: int, nxt_pos: int, nxt_cap: dict) -> Optional[list]:
        if gi < 0:
            return []
        group = rule.conditions[gi]
        nxt_group = rule.conditions[gi + 1]
        cands = candidates[gi]
        j = bisect.bisect_left(cands, nxt_pos) - 1
        while j >= 0:
            p = cands[j]
            e = store.events[p]
            if e.ts < lo_ts:
                break
            c = group.capture(e)
            if c is not None and _link_ok(nxt_group, (e, c), (store.events[nxt_pos], nxt_cap)):
                rest = search(gi - 1, p, c)
                if rest is not None:
                    return rest + [(p, c)]
            j -= 1
        return None

    return search(k - 2, pos, cap)


def _candidates(rule: DetectionRule, store: EventStore, gi: int) -> list[int]:
    group = rule.conditions[gi]
    if len(group.event_types) == 1:
        pos = store.by_type.get(group.event_types[0], ())
    else:
        pos = sorted(i for t in group.event_types for i in store.by_type.get(t, ()))
    evs, match = store.events, group.matches
    return [i for i in pos if match(evs[i])]


def match_rule(rule: DetectionRule, store: EventStore) -> list[tuple[list[int], dict]]:
    """All raw matches of one rule: (event positions, merged captures)."""
    out = []
    candidates = [_candidates(rule, store, gi) for gi in range(len(rule.conditions))]
    last = rule.conditions[-1]
    for pos in candidates[-1]:
        cap = last.capture(store.events[pos])
        if cap is None:
            continue
        if not rule.sequenced:
            out.append(([pos], cap))
            continue
        chain = _sequence_for(rule, store, pos, cap, candidates)
        if chain is None:
            continue
        merged: dict = {}
        for _, c in chain:
            merged.update(c)
        merged.update(cap)
        out.append(([p for p, _ in chain] + [pos], merged))
    return out


def match_setup(store: EventStore, rules: RuleSet, graph: Optional[ProvenanceGraph] = None,
                allowlist: frozenset = DEFAULT_ALLOWLIST) -> list[MatchRecord]:
    """Persistence setup table.

    Every event (or sequence) satisfying a setup rule yields one record,
    except (1) writes by allowlisted system programs whose executable was
    not modified earlier, and (2) DLL drops deleted later. With a graph
    carrying expert-guided edges, a suppressed broker write that an expert
    edge ties to a triggering process is kept and attributed to it.
    """
    sup = _Suppressor(store, frozenset(allowlist))
    out = []
    for rule in rules.setup:
        for positions, cap in match_rule(rule, store):
            pos = positions[-1]
            e = store.events[pos]
            first = store.events[positions[0]]
            initiator = first.actor.guid
            if sup.allowlisted(first, positions[0]):
                rescued = _expert_initiator(graph, e)
                if rescued is None:
                    continue
                initiator = rescued
            if rule.suppress_if_deleted and sup.deleted_later(e, pos):
                continue
            out.append(MatchRecord(
                event=e, label=rule.technique, ts=e.ts, rule_id=rule.id, captures=cap,
                tactic=rule.tactic, initiator=initiator,
                events=tuple(store.events[p].event_id for p in positions),
            ))
    out.sort(key=lambda r: (r.ts, r.event.event_id, r.rule_id))
    return out


# ---------------------------------------------------------------------------
# stage 2: execution matching


def match_execution(trace_events: Sequence[AuditEvent], anchor: Union[ProcessRef, str],
                    g: ProvenanceGraph, rules: RuleSet,
                    down: Optional[Mapping] = None) -> list[MatchRecord]:
    """Execution records found on the backward trace of a remote process.

    A record needs (a) the rule predicates to hold on a trace event whose
    actor lies on the anchor's process lineage, and (b) ``required_ancestor``
    to match some process on the Start path from that actor down to the
    anchor. Rules may also pin the anchor (``anchor: actor|child``) and
    demand that the actor launched the next lineage process within
    ``launch_window_ms`` with no other same-technique trigger in between.
    """
    if down is None:
        down = lineage(g, proc_id(anchor.guid if isinstance(anchor, ProcessRef) else anchor))
    store = g.store
    by_actor: dict = {}
    for e in trace_events:
        a = proc_id(e.actor.guid)
        if a not in down:
            continue
        for rule in rules.execution_for(e.event_type):
            if rule.conditions[0].matches(e):
                by_actor.setdefault(a, []).append((store.position(e.event_id), rule))
    survivors = [x for a, hs in by_actor.items() for x in ActorHits(a, hs, g).survivors(down[a])]
    return finish_executions(survivors, anchor, g, down)


class ActorHits:
    """Anchor-independent checks on the predicate hits of one lineage actor.

    ``hits`` holds ``(store position, rule)`` for events whose actor is
    ``a``. :meth:`survivors` takes the process ``a`` leads to on a lineage
    and returns ``(position, rule, captures)`` for hits passing the child
    and launch-window checks.
    """

    def __init__(self, a: str, hits: Sequence[tuple], g: ProvenanceGraph):
        self.a, self.g = a, g
        uniq = sorted({(p, r.id): (p, r) for p, r in hits}.values(), key=lambda h: (h[0], h[1].id))
        self.per_tech: dict = {}
        for p, r in uniq:
            self.per_tech.setdefault(r.technique, []).append(p)
        self.fixed, self.creates, self.windowed = [], [], []
        for p, r in uniq:
            e = g.store.events[p]
            if e.event_type is EventType.PROCESS_CREATE:
                self.creates.append((p, r))
            elif r.launch_window_ms is not None:
                self.windowed.append((p, r))
            else:
                self.fixed.append((p, r))
        self.wpos = [p for p, _ in self.windowed]
        self.max_window = max((r.launch_window_ms for _, r in self.windowed), default=0)
        self._caps: dict = {}
        self._fixed_out = None

    def _cap(self, pos, rule):
        k = (pos, rule.id)
        if k not in self._caps:
            self._caps[k] = rule.conditions[0].capture(self.g.store.events[pos])
        return self._caps[k]

    def _window_ok(self, pos, rule, start) -> bool:
        e = self.g.store.events[pos]
        if start is None or start.src != self.a or not 0 <= start.ts - e.ts <= rule.launch_window_ms:
            return False
        hi = self.g.store.position(start.provenance)
        if hi < pos:
            return False
        between = self.per_tech[rule.technique]
        k = bisect.bisect_right(between, pos)
        return not (k < len(between) and between[k] < hi)

    def survivors(self, nxt: Optional[str]) -> list[tuple]:
        if self._fixed_out is None:
            self._fixed_out = [(p, r, c) for p, r in self.fixed if (c := self._cap(p, r)) is not None]
        out = list(self._fixed_out)
        store = self.g.store
        start = self.g.start_edge(nxt) if nxt is not None else None
        for p, r in self.creates:
            if nxt != proc_id(store.events[p].object.child.guid):
                continue
            if r.launch_window_ms is not None and not self._window_ok(p, r, start):
                continue
            c = self._cap(p, r)
            if c is not None:
                out.append((p, r, c))
        if self.windowed and start is not None and start.src == self.a:
            lo = bisect.bisect_left(store._ts, start.ts - self.max_window)
            hi = store.position(start.provenance)
            for k in range(bisect.bisect_left(self.wpos, lo), bisect.bisect_left(self.wpos, hi + 1)):
                p, r = self.windowed[k]
                if self._window_ok(p, r, start):
                    c = self._cap(p, r)
                    if c is not None:
                        out.append((p, r, c))
        return out


def finish_executions(survivors: Iterable[tuple], anchor: Union[ProcessRef, str], g: ProvenanceGraph,
                      down: Mapping, memo: Optional[dict] = None) -> list[MatchRecord]:
    """Anchor-dependent checks: ``anchor`` pinning and ``required_ancestor``."""
    guid = anchor.guid if isinstance(anchor, ProcessRef) else anchor
    anchor_id = proc_id(guid)
    memo = {} if memo is None else memo
    store = g.store
    out = []
    for pos, rule, cap in survivors:
        e = store.events[pos]
        a = proc_id(e.actor.guid)
        if rule.anchor == "actor" and a != anchor_id:
            continue
        if rule.anchor == "child" and e.object.child.guid != guid:
            continue
        if rule.required_ancestor:
            ok = False
            for n in path_down(down, a):
                k = (rule.id, n)
                v = memo.get(k)
                if v is None:
                    v = memo[k] = all(check_process(p, g.nodes[n].attrs) for p in rule.required_ancestor)
                if v:
                    ok = True
                    break
            if not ok:
                continue
        out.append(MatchRecord(
            event=e, label=rule.technique, ts=e.ts, rule_id=rule.id, captures=cap,
            tactic=rule.tactic, initiator=e.actor.guid, anchor=guid, events=(e.event_id,),
        ))
    out.sort(key=lambda r: (r.ts, r.event.event_id, r.rule_id))
    return out


def match_context(events: Iterable[AuditEvent], rules: RuleSet) -> list[MatchRecord]:
    """Kill-chain context hits (credential access, discovery, ...) among events."""
    out = []
    for e in events:
        for rule in rules.context_for(e.event_type):
            if rule.conditions[0].matches(e):
                cap = rule.conditions[0].capture(e) or {}
                out.append(MatchRecord(e, rule.technique, e.ts, rule.id, cap, rule.tactic,
                                       initiator=e.actor.guid, events=(e.event_id,)))
    return out
