"""Setup/execution alignment: pseudo-edges and persistence attack graphs."""

from __future__ import annotations

import ipaddress
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .ingest import AuditEvent, EventStore, EventType, ProcessRef, basename, canon, paused_gc
from .provenance import (
    Edge,
    EdgeLabel,
    NodeKind,
    ProvenanceGraph,
    lineage,
    path_down,
    proc_id,
)
from .rules import MatchRecord, Phase, RuleSet, ActorHits, finish_executions, match_setup

logger = logging.getLogger(__name__)

# processes at which a setup chain stops climbing (inclusive)
SYSTEM_ROOTS = frozenset({
    "explorer.exe", "services.exe", "svchost.exe", "wmiprvse.exe", "winlogon.exe",
    "userinit.exe", "wininit.exe", "systemd", "init", "sshd", "cron", "apache2",
    "httpd", "nginx", "w3wp.exe",
})
PAYLOAD_SUFFIXES = (".exe", ".dll", ".ps1", ".bat", ".cmd", ".vbs", ".js", ".lnk", ".sh", ".so", ".py")


class MatchNotInGraph(LookupError):
    pass


class Category(str, Enum):
    CAUSALITY = "Causality"
    CORRELATION_1 = "CorrelationType1"
    CORRELATION_2 = "CorrelationType2"


def is_remote(ip: str) -> bool:
    """Loopback, link-local, unspecified and multicast endpoints are not remote."""
    try:
        a = ipaddress.ip_address(ip)
    except ValueError:
        return True  # hostnames and the like
    return not (a.is_loopback or a.is_link_local or a.is_unspecified or a.is_multicast)


def find_remote_processes(store: EventStore) -> list[ProcessRef]:
    """Distinct processes with a remote NET_CONNECT/NET_ACCEPT, in first-connection order."""
    pos = sorted(i for t in (EventType.NET_CONNECT, EventType.NET_ACCEPT) for i in store.by_type.get(t, ()))
    seen: dict = {}
    for i in pos:
        e = store.events[i]
        if e.actor.guid not in seen and is_remote(e.object.ip):
            seen[e.actor.guid] = e.actor
    return list(seen.values())


@dataclass
class AtomicGraph:
    graph: ProvenanceGraph
    anchor_event_id: str
    phase: Phase
    indirection_degree: int
    root: str = ""
    process: str = ""  # initiator (setup) or remote-connection process (execution)

    def __post_init__(self):
        if self.indirection_degree < 1:
            raise ValueError("indirection degree must be >= 1")


@dataclass
class PseudoEdge:
    id: str
    setup: MatchRecord
    execution: MatchRecord
    technique: str
    src: str
    dst: str
    category: Optional[Category] = None

    def __post_init__(self):
        s, x = self.setup, self.execution
        if s.label != x.label:
            raise ValueError(f"{self.id}: label mismatch {s.label} != {x.label}")
        if not x.ts > s.ts:
            raise ValueError(f"{self.id}: execution must follow setup")
        if not captures_align(s.captures, x.captures):
            raise ValueError(f"{self.id}: captures do not align")

    @property
    def edge(self) -> Edge:
        return Edge(self.src, self.dst, EdgeLabel.PSEUDO, self.execution.ts,
                    f"{self.setup.rule_id}+{self.execution.rule_id}")


@dataclass
class PersistenceAttackGraph:
    setup: AtomicGraph
    execution: AtomicGraph
    pseudo: Edge

    def __post_init__(self):
        if self.pseudo.label is not EdgeLabel.PSEUDO:
            raise ValueError("PAG link must be a Pseudo edge")

    @property
    def graph(self) -> ProvenanceGraph:
        a, b = self.setup.graph, self.execution.graph
        nodes = {**a.nodes, **b.nodes}
        g = ProvenanceGraph(a.store or b.store)
        for nid in sorted(nodes):
            n = nodes[nid]
            g.add_node(n.kind, n.key, n.attrs)
        for e in sorted(set(a.edges) | set(b.edges) | {self.pseudo}, key=Edge.sort_key):
            g.add_edge(e)
        return g


def captures_align(a: dict, b: dict) -> bool:
    common = a.keys() & b.keys()
    return bool(common) and all(canon(a[k]) == canon(b[k]) for k in common)


# ---------------------------------------------------------------------------
# atomic graphs


def _name(g: ProvenanceGraph, nid: str) -> str:
    return canon(basename(g.nodes[nid].attrs.get("image") or ""))


def setup_chain(g: ProvenanceGraph, nid: str) -> list[str]:
    """Start-edge chain from the nearest system root (or topmost ancestor) down to ``nid``."""
    chain = [nid]
    seen = {nid}
    cur = nid
    while _name(g, cur) not in SYSTEM_ROOTS:
        p = g.parent(cur)
        if p is None or p in seen:
            break
        chain.append(p)
        seen.add(p)
        cur = p
    return chain[::-1]


def _lineage_path_edges(g: ProvenanceGraph, path: list[str]) -> list[Edge]:
    out = []
    for u, v in zip(path, path[1:]):
        e = g.start_edge(v)
        if e is None or e.src != u:
            e = min((g.edges[i] for i in g.in_adj[v]
                     if g.edges[i].src == u and g.edges[i].label is EdgeLabel.EXPERT), key=Edge.sort_key)
        out.append(e)
    return out


def _event_edge(g: ProvenanceGraph, e: AuditEvent) -> Edge:
    edge = g.event_edge(e.event_id)
    if edge is None:
        raise MatchNotInGraph(e.event_id)
    return edge


def extract_atomic_graph(match: MatchRecord, g: ProvenanceGraph, phase: Phase) -> AtomicGraph:
    """Minimal subgraph for one phase of a persistence instance.

    Setup: Start chain from the setup root to the initiating process, the
    matched event edge(s), any expert edge re-attributing the write, the
    trigger object and payload files the initiator dropped (captured values
    or executable-looking writes up to the setup time).

    Execution: path from the matched event's process (the broker) down to
    the remote-connection process, the trigger edge, and the remote
    process's socket(s).

    The indirection degree is the number of Start edges on the chain,
    floored at 1.
    """
    phase = Phase(phase)
    e = match.event
    store = g.store
    edges: list[Edge] = []
    if phase is Phase.SETUP:
        init = proc_id(match.initiator or e.actor.guid)
        if init not in g.nodes:
            raise MatchNotInGraph(init)
        chain = setup_chain(g, init)
        chain_edges = _lineage_path_edges(g, chain)
        edges += chain_edges
        event_ids = match.events or (e.event_id,)
        for eid in event_ids:
            edges.append(_event_edge(g, store.get(eid) if store is not None else e))
        obj = _event_edge(g, e)
        target = obj.dst
        for i in g.in_adj.get(target, ()):
            x = g.edges[i]
            if x.label is EdgeLabel.EXPERT and x.ts == e.ts and x.src == init:
                edges.append(x)
        captured = {canon(v) for v in match.captures.values()}
        for i in g.out_adj[init]:
            x = g.edges[i]
            if x.label is not EdgeLabel.WRITE or x.ts > e.ts:
                continue
            n = g.nodes[x.dst]
            if n.kind is not NodeKind.FILE:
                continue
            path = n.key.split("|", 1)[-1]
            if path in captured or path.lower().endswith(PAYLOAD_SUFFIXES):
                edges.append(x)
        root = chain[0]
        degree = sum(1 for x in chain_edges if x.label is EdgeLabel.START)
        proc = init
    else:
        anchor = proc_id(match.anchor)
        actor = proc_id(e.actor.guid)
        if anchor not in g.nodes:
            raise MatchNotInGraph(anchor)
        down = lineage(g, anchor)
        if actor not in down:
            raise MatchNotInGraph(actor)
        path = path_down(down, actor)
        chain_edges = _lineage_path_edges(g, path)
        edges += chain_edges
        trig = _event_edge(g, e)
        edges.append(trig)
        seen_sock = set()
        for i in list(g.out_adj[anchor]) + list(g.in_adj[anchor]):
            x = g.edges[i]
            if x.label not in (EdgeLabel.CONNECT, EdgeLabel.ACCEPT):
                continue
            sock = x.dst if x.label is EdgeLabel.CONNECT else x.src
            if sock in seen_sock or not is_remote(str(g.nodes[sock].attrs.get("ip", ""))):
                continue
            seen_sock.add(sock)
            edges.append(x)
        root = path[0]
        degree = sum(1 for x in chain_edges if x.label is EdgeLabel.START)
        proc = anchor
    nodes = {n for x in edges for n in (x.src, x.dst)} | {root, proc}
    sub = g.subgraph(nodes, edges)
    return AtomicGraph(sub, e.event_id, phase, max(1, degree), root, proc)


# ---------------------------------------------------------------------------
# setup and execution alignment


@dataclass
class DetectionResult:
    setup: list
    executions: list  # (remote guid, [MatchRecord])
    alerts: list  # [(PseudoEdge, PersistenceAttackGraph)]

    @property
    def execution_count(self) -> int:
        return len({m.key for _, ms in self.executions for m in ms})


class _CandidateCache:
    """Per-process inbound events that satisfy some execution rule's predicates."""

    def __init__(self, g: ProvenanceGraph, rules: RuleSet):
        self.g = g
        self.rules = rules
        self.cache: dict = {}
        self.memo: dict = {}
        self.actors: dict = {}
        self.types = frozenset(t for r in rules.execution for t in r.event_types)

    def hits(self, nid: str) -> list:
        hit = self.cache.get(nid)
        if hit is not None:
            return hit
        g, store, out = self.g, self.g.store, []
        for i in g.in_adj[nid]:
            x = g.edges[i]
            if x.label is EdgeLabel.EXPERT or x.label is EdgeLabel.PSEUDO:
                continue
            p = store.by_id.get(x.provenance)
            if p is None:
                continue
            ev = store.events[p]
            if ev.event_type in self.types:
                out.extend((p, r) for r in self.rules.execution_for(ev.event_type) if r.conditions[0].matches(ev))
        self.cache[nid] = out
        return out

    def actor(self, a: str) -> ActorHits:
        got = self.actors.get(a)
        if got is None:
            # events by `a` landing on `a` (reads, loads) or on a child (its creation)
            store = self.g.store
            hs = [h for h in self.hits(a) if proc_id(store.events[h[0]].actor.guid) == a]
            for i in self.g.out_adj.get(a, ()):
                x = self.g.edges[i]
                if x.label is EdgeLabel.START:
                    hs.extend(h for h in self.hits(x.dst) if proc_id(store.events[h[0]].actor.guid) == a)
            got = self.actors[a] = ActorHits(a, hs, self.g)
        return got


def _executions_for(g: ProvenanceGraph, rules: RuleSet, cache: _CandidateCache, r: ProcessRef) -> list:
    down = lineage(g, proc_id(r.guid))
    survivors = []
    for a, nxt in down.items():
        survivors.extend(cache.actor(a).survivors(nxt))
    return finish_executions(survivors, r, g, down, cache.memo) if survivors else []


def aligned(s: MatchRecord, x: MatchRecord, rules: RuleSet) -> bool:
    """Alignment checks: same label, execution after setup, equal captures.

    Host-local persistence must also fire on the host it was planted on;
    rules flagged ``cross_host`` (domain accounts) lift that.
    """
    if s.label != x.label or not x.ts > s.ts or not captures_align(s.captures, x.captures):
        return False
    return s.event.host == x.event.host or rules.get(s.rule_id).cross_host


def align(setup: list, executions: list, rules: RuleSet) -> list[tuple[MatchRecord, MatchRecord]]:
    """Aligned (setup, execution) pairs; the first remote process wins per pair."""
    by_label: dict = {}
    for s in setup:
        by_label.setdefault(s.label, []).append(s)
    pairs = {}
    for _, recs in executions:
        for x in recs:
            for s in by_label.get(x.label, ()):
                if aligned(s, x, rules):
                    pairs.setdefault((s.event.event_id, x.event.event_id), (s, x))
    return list(pairs.values())


def detect(store: EventStore, graph: ProvenanceGraph, rules: RuleSet, workers: int = 1) -> DetectionResult:
    """Stages 1 and 2: setup table, per-remote-process executions, alignment."""
    with paused_gc():
        return _detect(store, graph, rules, workers)


def _detect(store: EventStore, graph: ProvenanceGraph, rules: RuleSet, workers: int) -> DetectionResult:
    setup = match_setup(store, rules, graph)
    remote = find_remote_processes(store)
    execs: list = []
    if setup:
        labels = {s.label for s in setup}
        sub = RuleSet(r for r in rules.rules if r.phase is not Phase.EXECUTION or r.technique in labels)
        cache = _CandidateCache(graph, sub)
        if workers > 1 and len(remote) > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(lambda r: _executions_for(graph, sub, cache, r), remote))
        else:
            results = [_executions_for(graph, sub, cache, r) for r in remote]
        execs = [(r.guid, ms) for r, ms in zip(remote, results) if ms]
    alerts = []
    for s, x in align(setup, execs, rules):
        pe = PseudoEdge(
            id=f"{s.event.event_id}->{x.event.event_id}", setup=s, execution=x, technique=s.label,
            src=proc_id(s.initiator), dst=proc_id(x.anchor),
        )
        sag = extract_atomic_graph(s, graph, Phase.SETUP)
        xag = extract_atomic_graph(x, graph, Phase.EXECUTION)
        alerts.append((pe, PersistenceAttackGraph(sag, xag, pe.edge)))
    alerts.sort(key=lambda a: (a[0].setup.ts, a[0].execution.ts, a[0].setup.event.event_id,
                               a[0].execution.event.event_id))
    logger.info("setup=%d remote=%d pseudo-edges=%d", len(setup), len(remote), len(alerts))
    return DetectionResult(setup, execs, alerts)


def create_pseudo_edges(store: EventStore, graph: ProvenanceGraph, rules: RuleSet,
                        workers: int = 1) -> list[tuple[PseudoEdge, PersistenceAttackGraph]]:
    """Detection end to end, returning only the alerts. ``graph`` should already carry expert edges."""
    return detect(store, graph, rules, workers).alerts
