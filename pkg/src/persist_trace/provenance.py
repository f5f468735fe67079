"""Provenance graph construction, causal traversal and expert-guided edges.

Direction convention: information flows ``src -> dst``. Writes point
process -> object, reads point object -> process, ``Start`` points parent ->
child. A backward trace therefore answers "how was this produced".

Object nodes (files, registry keys, sockets, accounts) are per host: the
node key is ``<host>|<canonical name>``. Process nodes are keyed by GUID.
"""

from __future__ import annotations

import bisect
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence, Union

from .ingest import (
    AccountObject,
    AuditEvent,
    EventStore,
    EventType,
    FileObject,
    NetObject,
    ProcessObject,
    ProcessRef,
    RegistryObject,
    paused_gc,
)
from .predicates import Capture, FieldUnresolvable, Predicate, check_condition

logger = logging.getLogger(__name__)

INF = float("inf")
TRIAGE_DEPTH = 8


class NodeKind(str, Enum):
    PROCESS = "Process"
    FILE = "File"
    REGISTRY = "RegistryKey"
    SOCKET = "Socket"
    ACCOUNT = "Account"


_PREFIX = {
    NodeKind.PROCESS: "proc",
    NodeKind.FILE: "file",
    NodeKind.REGISTRY: "reg",
    NodeKind.SOCKET: "sock",
    NodeKind.ACCOUNT: "acct",
}
_KIND_OF_PREFIX = {v: k for k, v in _PREFIX.items()}


class EdgeLabel(str, Enum):
    START = "Start"
    WRITE = "Write"
    READ = "Read"
    DELETE = "Delete"
    CONNECT = "Connect"
    ACCEPT = "Accept"
    LOAD = "Load"
    EXPERT = "ExpertGuided"
    PSEUDO = "Pseudo"
    IPC = "Ipc"


INFERRED = frozenset({EdgeLabel.EXPERT, EdgeLabel.PSEUDO})
LINEAGE = frozenset({EdgeLabel.START, EdgeLabel.EXPERT})


def node_id(kind: NodeKind, key: str) -> str:
    return f"{_PREFIX[kind]}:{key}"


def proc_id(guid: str) -> str:
    return "proc:" + guid


@dataclass
class Node:
    kind: NodeKind
    key: str
    attrs: dict = field(default_factory=dict)

    @property
    def id(self) -> str:
        return node_id(self.kind, self.key)

    @property
    def label(self) -> str:
        if self.kind is NodeKind.PROCESS:
            image = self.attrs.get("image") or ""
            return image.replace("/", "\\").rsplit("\\", 1)[-1] or self.key
        return self.attrs.get("name") or self.key.split("|", 1)[-1]


@dataclass(frozen=True, slots=True)
class Edge:
    src: str
    dst: str
    label: EdgeLabel
    ts: int
    provenance: str

    def sort_key(self) -> tuple:
        return (self.ts, self.provenance, self.src, self.dst, self.label.value)


class UnknownNode(KeyError):
    pass


class ProvenanceGraph:
    """Typed multigraph with forward and reverse adjacency.

    ``store`` (when set) resolves event-backed edge provenance to events.
    """

    def __init__(self, store: Optional[EventStore] = None):
        self.store = store
        self.nodes: dict[str, Node] = {}
        self.edges: list[Edge] = []
        self.out_adj: dict[str, list[int]] = {}
        self.in_adj: dict[str, list[int]] = {}
        self.start_of: dict[str, int] = {}  # child node id -> index of its Start edge
        self.edge_of: dict[str, int] = {}  # event id -> index of the edge it produced
        self._edge_set: set = set()
        self._last_ref: dict = {}
        # Start/ExpertGuided edges only, for lineage walks past busy processes
        self.lin_in: dict[str, list[int]] = {}
        self.lin_out: dict[str, list[int]] = {}

    def __contains__(self, nid: str) -> bool:
        return nid in self.nodes

    def __eq__(self, other) -> bool:
        # structural: same nodes (with attributes) and same edge multiset
        if not isinstance(other, ProvenanceGraph):
            return NotImplemented
        return self.nodes == other.nodes and self.sorted_edges() == other.sorted_edges()

    __hash__ = None

    def node(self, nid: str) -> Node:
        try:
            return self.nodes[nid]
        except KeyError:
            raise UnknownNode(nid) from None

    def add_node(self, kind: NodeKind, key: str, attrs: Optional[Mapping] = None) -> str:
        nid = node_id(kind, key)
        n = self.nodes.get(nid)
        if n is None:
            self.nodes[nid] = Node(kind, key, dict(attrs or {}))
            self.out_adj[nid] = []
            self.in_adj[nid] = []
        elif attrs:
            for k, v in attrs.items():
                if v not in (None, "", -1) and not n.attrs.get(k):
                    n.attrs[k] = v
        return nid

    def add_edge(self, edge: Edge) -> bool:
        if self.has_edge(edge):
            return False
        if edge.src not in self.nodes or edge.dst not in self.nodes:
            raise UnknownNode(edge.src if edge.src not in self.nodes else edge.dst)
        if edge.label in INFERRED or edge.provenance in self.edge_of:
            # event-backed edges are keyed by their event id instead
            self._edge_set.add(edge)
        i = len(self.edges)
        self.edges.append(edge)
        self.out_adj[edge.src].append(i)
        self.in_adj[edge.dst].append(i)
        if edge.label in LINEAGE:
            self.lin_out.setdefault(edge.src, []).append(i)
            self.lin_in.setdefault(edge.dst, []).append(i)
        if edge.label is EdgeLabel.START and edge.dst not in self.start_of:
            self.start_of[edge.dst] = i
        if edge.label not in INFERRED:
            self.edge_of.setdefault(edge.provenance, i)
        return True

    def has_edge(self, edge: Edge) -> bool:
        if edge.label not in INFERRED:
            i = self.edge_of.get(edge.provenance)
            if i is None:
                return False
            if self.edges[i] == edge:
                return True
        return edge in self._edge_set

    def copy(self) -> "ProvenanceGraph":
        g = ProvenanceGraph(self.store)
        g.nodes = {nid: Node(n.kind, n.key, dict(n.attrs)) for nid, n in self.nodes.items()}
        g.edges = list(self.edges)
        g.out_adj = {k: list(v) for k, v in self.out_adj.items()}
        g.in_adj = {k: list(v) for k, v in self.in_adj.items()}
        g.lin_in = {k: list(v) for k, v in self.lin_in.items()}
        g.lin_out = {k: list(v) for k, v in self.lin_out.items()}
        g.start_of = dict(self.start_of)
        g.edge_of = dict(self.edge_of)
        g._edge_set = set(self._edge_set)
        return g

    def event_edge(self, event_id: str) -> Optional[Edge]:
        i = self.edge_of.get(event_id)
        return None if i is None else self.edges[i]

    def parent(self, nid: str) -> Optional[str]:
        i = self.start_of.get(nid)
        return None if i is None else self.edges[i].src

    def start_edge(self, nid: str) -> Optional[Edge]:
        i = self.start_of.get(nid)
        return None if i is None else self.edges[i]

    def events(self, edges: Iterable[Edge]) -> list[AuditEvent]:
        """Events behind event-backed edges, in store order."""
        if self.store is None:
            return []
        pos = {self.store.by_id[e.provenance] for e in edges
               if e.label not in INFERRED and e.provenance in self.store.by_id}
        return [self.store.events[i] for i in sorted(pos)]

    def subgraph(self, node_ids: Iterable[str], edges: Iterable[Edge] = ()) -> "ProvenanceGraph":
        g = ProvenanceGraph(self.store)
        for nid in sorted(set(node_ids)):
            n = self.node(nid)
            g.nodes[nid] = Node(n.kind, n.key, dict(n.attrs))
            g.out_adj[nid] = []
            g.in_adj[nid] = []
        for e in sorted(set(edges), key=Edge.sort_key):
            g.add_edge(e)
        return g

    def sorted_edges(self) -> list[Edge]:
        return sorted(self.edges, key=Edge.sort_key)


# ---------------------------------------------------------------------------
# construction


_OBJ_PREFIX = {FileObject: "file", RegistryObject: "reg", NetObject: "sock", AccountObject: "acct"}


def _object_node(g: ProvenanceGraph, e: AuditEvent) -> str:
    o = e.object
    prefix = _OBJ_PREFIX.get(type(o))
    if prefix is not None:
        nid = f"{prefix}:{e.host}|{o.key()}"
        if nid in g.nodes:
            return nid
    if isinstance(o, FileObject):
        return g.add_node(NodeKind.FILE, f"{e.host}|{o.key()}", {"name": o.path, "host": e.host})
    if isinstance(o, RegistryObject):
        return g.add_node(NodeKind.REGISTRY, f"{e.host}|{o.key()}", {"name": o.reg_key, "host": e.host})
    if isinstance(o, NetObject):
        return g.add_node(NodeKind.SOCKET, f"{e.host}|{o.key()}", {"name": o.key(), "ip": o.ip, "port": o.port, "host": e.host})
    if isinstance(o, AccountObject):
        return g.add_node(NodeKind.ACCOUNT, f"{e.host}|{o.key()}", {"name": o.account, "host": e.host})
    raise TypeError(type(o))


def _proc_attrs(p: ProcessRef, host: str) -> dict:
    return {"image": p.image, "cmdline": p.cmdline, "pid": p.pid, "parent": p.parent, "host": host}


_WRITE_LIKE = {
    EventType.FILE_WRITE: EdgeLabel.WRITE,
    EventType.FILE_DELETE: EdgeLabel.DELETE,
    EventType.REG_SET: EdgeLabel.WRITE,
    EventType.REG_DELETE: EdgeLabel.DELETE,
    EventType.NET_CONNECT: EdgeLabel.CONNECT,
    EventType.ACCOUNT_CREATE: EdgeLabel.WRITE,
}
_READ_LIKE = {
    EventType.FILE_READ: EdgeLabel.READ,
    EventType.REG_READ: EdgeLabel.READ,
    EventType.MODULE_LOAD: EdgeLabel.LOAD,
    EventType.NET_ACCEPT: EdgeLabel.ACCEPT,
    EventType.LOGIN: EdgeLabel.READ,
}


def _proc_node(g: ProvenanceGraph, p: ProcessRef, host: str) -> str:
    nid = "proc:" + p.guid
    # interned refs: the same record adds no new attributes
    if g._last_ref.get(nid) is p:
        return nid
    g._last_ref[nid] = p
    return g.add_node(NodeKind.PROCESS, p.guid, _proc_attrs(p, host))


def add_event(g: ProvenanceGraph, e: AuditEvent) -> Optional[Edge]:
    actor = _proc_node(g, e.actor, e.host)
    t = e.event_type
    if t is EventType.PROCESS_CREATE:
        child = e.object.child
        dst = _proc_node(g, child, e.host)
        edge = Edge(actor, dst, EdgeLabel.START, e.ts, e.event_id)
    elif t in _WRITE_LIKE:
        edge = Edge(actor, _object_node(g, e), _WRITE_LIKE[t], e.ts, e.event_id)
    elif t in _READ_LIKE:
        edge = Edge(_object_node(g, e), actor, _READ_LIKE[t], e.ts, e.event_id)
    elif t is EventType.IPC_SEND:
        peer = e.object.peer
        dst = _proc_node(g, peer, e.host)
        edge = Edge(actor, dst, EdgeLabel.IPC, e.ts, e.event_id)
    else:
        return None  # PROCESS_TERMINATE: node only
    g.add_edge(edge)
    return edge


def build_graph(store: EventStore) -> ProvenanceGraph:
    """One node per entity, one labeled edge per event (terminations add no edge)."""
    g = ProvenanceGraph(store)
    with paused_gc():
        for e in store.events:
            add_event(g, e)
    return g


# ---------------------------------------------------------------------------
# traversal

Seeds = Union[str, Iterable[str]]


def _seeds(g: ProvenanceGraph, seed: Seeds) -> list[str]:
    seeds = [seed] if isinstance(seed, str) else list(dict.fromkeys(seed))
    for s in seeds:
        if s not in g.nodes:
            raise UnknownNode(s)
    return seeds


def reach(g: ProvenanceGraph, seed: Seeds, max_depth: Optional[int] = None,
          anchor_ts: Optional[int] = None, backward: bool = True) -> tuple[dict, list[int]]:
    """BFS core of the traversals: ``(node -> depth, used edge indices)``."""
    seeds = _seeds(g, seed)
    if max_depth is not None and max_depth < 1:
        raise ValueError("max_depth must be >= 1 (or None for unlimited)")
    depth = {s: 0 for s in seeds}
    queue = deque(seeds)
    used: list[int] = []
    edges = g.edges
    near, far = (g.in_adj, g.out_adj) if backward else (g.out_adj, g.in_adj)
    while queue:
        nid = queue.popleft()
        d = depth[nid]
        if max_depth is not None and d >= max_depth:
            continue
        steps = [(i, True) for i in near[nid]]
        steps += [(i, False) for i in far[nid] if edges[i].label is EdgeLabel.EXPERT]
        for i, along in steps:
            e = edges[i]
            if anchor_ts is not None and e.ts > anchor_ts:
                continue
            if along:
                other = e.src if backward else e.dst
            else:
                other = e.dst if backward else e.src
            used.append(i)
            if other not in depth:
                depth[other] = d + 1
                queue.append(other)
    return depth, used


def _traverse(g, seed, max_depth, anchor_ts, backward: bool):
    depth, used = reach(g, seed, max_depth, anchor_ts, backward)
    sub = g.subgraph(depth.keys(), [g.edges[i] for i in used])
    return sub, g.events(sub.edges)


def traverse_backward(g: ProvenanceGraph, seed: Seeds, max_depth: Optional[int] = None,
                      anchor_ts: Optional[int] = None):
    """Causal ancestry of ``seed`` (a node id or several).

    Follows edges against their direction; ExpertGuided edges are followed
    both ways. With ``anchor_ts`` only edges at or before it are used.
    Returns ``(subgraph, events)`` with events in store order.
    """
    return _traverse(g, seed, max_depth, anchor_ts, backward=True)


def traverse_forward(g: ProvenanceGraph, seed: Seeds, max_depth: Optional[int] = None,
                     anchor_ts: Optional[int] = None):
    return _traverse(g, seed, max_depth, anchor_ts, backward=False)


def merge_graphs(a: ProvenanceGraph, b: ProvenanceGraph) -> ProvenanceGraph:
    out = ProvenanceGraph(a.store or b.store)
    for src in (a, b):
        for nid, n in src.nodes.items():
            if nid not in out.nodes:
                out.nodes[nid] = Node(n.kind, n.key, dict(n.attrs))
                out.out_adj[nid] = []
                out.in_adj[nid] = []
    ordered = ProvenanceGraph(out.store)
    for nid in sorted(out.nodes):
        ordered.nodes[nid] = out.nodes[nid]
        ordered.out_adj[nid] = []
        ordered.in_adj[nid] = []
    for e in sorted(set(a.edges) | set(b.edges), key=Edge.sort_key):
        ordered.add_edge(e)
    return ordered


def lineage_distances(g: ProvenanceGraph, src: str) -> dict[str, int]:
    """Single-source hop counts over Start/ExpertGuided edges, undirected."""
    if src not in g.nodes:
        raise UnknownNode(src)
    dist = {src: 0}
    queue = deque([src])
    edges = g.edges
    while queue:
        nid = queue.popleft()
        d = dist[nid] + 1
        for i in g.lin_out.get(nid, ()):
            e = edges[i]
            if e.dst not in dist:
                dist[e.dst] = d
                queue.append(e.dst)
        for i in g.lin_in.get(nid, ()):
            e = edges[i]
            if e.src not in dist:
                dist[e.src] = d
                queue.append(e.src)
    return dist


def hop_distance(g: ProvenanceGraph, proc_a: str, proc_b: str):
    """Shortest Start/ExpertGuided path length between two processes, or INF."""
    if proc_b not in g.nodes:
        raise UnknownNode(proc_b)
    if proc_a == proc_b:
        if proc_a not in g.nodes:
            raise UnknownNode(proc_a)
        return 0
    return lineage_distances(g, proc_a).get(proc_b, INF)


def lineage(g: ProvenanceGraph, seed: str) -> dict[str, Optional[str]]:
    """Ancestors of ``seed`` via Start/ExpertGuided edges whose source is a process.

    Maps each reached process to its successor on the path toward ``seed``
    (``None`` for the seed itself). Insertion order is BFS order.
    """
    if seed not in g.nodes:
        raise UnknownNode(seed)
    down: dict[str, Optional[str]] = {seed: None}
    queue = deque([seed])
    edges, nodes = g.edges, g.nodes
    while queue:
        nid = queue.popleft()
        for i in g.lin_in.get(nid, ()):
            e = edges[i]
            if e.src not in down and nodes[e.src].kind is NodeKind.PROCESS:
                down[e.src] = nid
                queue.append(e.src)
    return down


def lineage_trace(g: ProvenanceGraph, seed: str):
    """Backward trace restricted to the process lineage of ``seed``.

    Contains every lineage process plus all edges flowing *into* those
    processes (their starts, reads, loads, accepts, logins). Returns the
    same ``(subgraph, events)`` shape as :func:`traverse_backward`.
    """
    down = lineage(g, seed)
    nodes = set(down)
    used = []
    for nid in down:
        for i in g.in_adj[nid]:
            e = g.edges[i]
            used.append(e)
            nodes.add(e.src)
    sub = g.subgraph(nodes, used)
    return sub, g.events(sub.edges)


def path_down(down: Mapping[str, Optional[str]], start: str) -> list[str]:
    """Process ids from ``start`` down to the lineage seed (inclusive)."""
    out = [start]
    nxt = down[start]
    while nxt is not None:
        out.append(nxt)
        nxt = down[nxt]
    return out


# ---------------------------------------------------------------------------
# expert-guided edges


class RuleError(ValueError):
    def __init__(self, rule_id: str, reason: str):
        super().__init__(f"{rule_id}: {reason}")
        self.rule_id = rule_id
        self.reason = reason


ROLES_SRC = ("trigger_actor", "trigger_child", "trigger_object")
ROLES_DST = ("broker_object", "broker_actor")


@dataclass(frozen=True)
class EventMatcher:
    event_types: tuple
    where: tuple
    correlate: Capture

    def matches(self, e: AuditEvent) -> bool:
        return e.event_type in self.event_types and all(check_condition(p, e) for p in self.where)


@dataclass(frozen=True)
class ExpertEdgeRule:
    id: str
    trigger: EventMatcher
    broker: EventMatcher
    window_ms: int
    src_role: str = "trigger_actor"
    dst_role: str = "broker_object"
    technique: str = ""

    def __post_init__(self):
        if self.window_ms <= 0:
            raise RuleError(self.id, "window_ms must be > 0")
        if self.src_role not in ROLES_SRC or self.dst_role not in ROLES_DST:
            raise RuleError(self.id, f"bad edge roles {self.src_role}->{self.dst_role}")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ExpertEdgeRule":
        rid = str(doc.get("id") or "")
        if not rid:
            raise RuleError("<unnamed>", "missing id")
        try:
            def side(name):
                d = doc[name]
                types = d["event_type"]
                types = types if isinstance(types, list) else [types]
                return EventMatcher(
                    tuple(EventType(t) for t in types),
                    tuple(Predicate.from_dict(p) for p in d.get("where", [])),
                    Capture.from_spec(d["correlate"]),
                )
            edge = doc.get("edge", {})
            return cls(rid, side("trigger"), side("broker"), int(doc["window_ms"]),
                       edge.get("src", "trigger_actor"), edge.get("dst", "broker_object"),
                       str(doc.get("technique", "")))
        except RuleError:
            raise
        except (KeyError, ValueError, TypeError, FieldUnresolvable) as exc:
            raise RuleError(rid, f"bad predicate: {exc}") from None


def object_node_id(e: AuditEvent) -> Optional[str]:
    """Id of the object node an event touches (None for process-only events)."""
    o = e.object
    kind = _OBJECT_KIND.get(type(o))
    return None if kind is None else node_id(kind, f"{e.host}|{o.key()}")


_OBJECT_KIND = {
    FileObject: NodeKind.FILE,
    RegistryObject: NodeKind.REGISTRY,
    NetObject: NodeKind.SOCKET,
    AccountObject: NodeKind.ACCOUNT,
}


def _endpoint(g: ProvenanceGraph, e: AuditEvent, role: str) -> Optional[str]:
    if role.endswith("_actor"):
        return proc_id(e.actor.guid)
    if role == "trigger_child":
        return proc_id(e.object.child.guid) if isinstance(e.object, ProcessObject) else None
    nid = object_node_id(e)
    return nid if nid in g.nodes else None


def expert_pairs(store: EventStore, rule: ExpertEdgeRule) -> list[tuple[AuditEvent, AuditEvent]]:
    """Nearest-in-time broker for each trigger (same host, same token, within window)."""
    brokers: dict[tuple, list[tuple]] = {}
    for i in sorted(i for t in rule.broker.event_types for i in store.by_type.get(t, ())):
        e = store.events[i]
        if not rule.broker.matches(e):
            continue
        tok = rule.broker.correlate.apply(e)
        if tok is not None:
            brokers.setdefault((e.host, tok), []).append((e.ts, i))
    pairs = []
    seen: set = set()
    for i in sorted(i for t in rule.trigger.event_types for i in store.by_type.get(t, ())):
        t = store.events[i]
        if not rule.trigger.matches(t):
            continue
        tok = rule.trigger.correlate.apply(t)
        cands = brokers.get((t.host, tok)) if tok is not None else None
        if not cands or (t.event_id, tok) in seen:
            continue
        # first broker at or after the trigger, positioned after it in store order
        j = bisect.bisect_left(cands, (t.ts, i + 1))
        if j < len(cands) and cands[j][0] - t.ts <= rule.window_ms:
            seen.add((t.event_id, tok))
            pairs.append((t, store.events[cands[j][1]]))
    return pairs


def apply_expert_edges(store: EventStore, g: ProvenanceGraph,
                       rules: Sequence[ExpertEdgeRule], inplace: bool = False) -> ProvenanceGraph:
    """Return a copy of ``g`` with ExpertGuided edges added; ``g`` is untouched
    unless ``inplace`` is set.

    Edge timestamp is the broker event's; provenance is the rule id.
    Re-applying the same rules adds nothing.
    """
    with paused_gc():
        return _apply_expert_edges(store, g if inplace else g.copy(), rules)


def _apply_expert_edges(store: EventStore, out: ProvenanceGraph,
                        rules: Sequence[ExpertEdgeRule]) -> ProvenanceGraph:
    added = 0
    for rule in rules:
        for trig, brok in expert_pairs(store, rule):
            src = _endpoint(out, trig, rule.src_role)
            dst = _endpoint(out, brok, rule.dst_role)
            if src is None or dst is None or src == dst:
                continue
            if out.add_edge(Edge(src, dst, EdgeLabel.EXPERT, brok.ts, rule.id)):
                added += 1
    logger.debug("expert rules added %d edges", added)
    return out
