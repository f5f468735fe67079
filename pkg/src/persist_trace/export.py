"""Analyst-facing serialization of attack graphs and ranked alerts.

DOT output follows the usual provenance-figure conventions: boxes for
processes, ellipses for files, registry keys and accounts, diamonds for
sockets, single-letter labels on event edges and dashed inferred edges.
JSON output is lossless and reads back with :func:`from_json`.
"""

from __future__ import annotations

import json
from typing import Union

from .detection import AtomicGraph, Category, PersistenceAttackGraph, PseudoEdge
from .ingest import event_from_dict, event_to_dict
from .provenance import Edge, EdgeLabel, Node, NodeKind, ProvenanceGraph
from .rules import MatchRecord, Phase
from .triage import IndicatorObservation, ScoredAlert

PAG_SCHEMA = "persist-trace-pag/1"
ALERT_SCHEMA = "persist-trace-alert/1"
RANKED_SCHEMA = "persist-trace-ranked/1"

SHAPES = {
    NodeKind.PROCESS: "box",
    NodeKind.FILE: "ellipse",
    NodeKind.REGISTRY: "ellipse",
    NodeKind.ACCOUNT: "ellipse",
    NodeKind.SOCKET: "diamond",
}
EDGE_TEXT = {
    EdgeLabel.START: "S",
    EdgeLabel.WRITE: "W",
    EdgeLabel.READ: "R",
    EdgeLabel.CONNECT: "C",
    EdgeLabel.ACCEPT: "A",
    EdgeLabel.LOAD: "L",
    EdgeLabel.DELETE: "D",
    EdgeLabel.IPC: "I",
    EdgeLabel.EXPERT: "expert",
    EdgeLabel.PSEUDO: "pseudo",
}


class ExportError(ValueError):
    pass


# ---------------------------------------------------------------------------
# DOT


def _q(s: str) -> str:
    return '"' + str(s).replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


def to_dot(pag: PersistenceAttackGraph, title: str = "") -> str:
    """Graphviz digraph of a persistence attack graph, nodes and edges in a fixed order."""
    g = pag.graph
    name = title or f"{pag.setup.anchor_event_id}->{pag.execution.anchor_event_id}"
    lines = [f"digraph {_q(name)} {{", "  rankdir=LR;"]
    for nid in sorted(g.nodes):
        n = g.nodes[nid]
        lines.append(f"  {_q(nid)} [label={_q(n.label)}, shape={SHAPES[n.kind]}];")
    for e in sorted(g.edges, key=Edge.sort_key):
        attrs = [f"label={_q(EDGE_TEXT[e.label])}"]
        if e.label in (EdgeLabel.PSEUDO, EdgeLabel.EXPERT):
            attrs.append("style=dashed")
        lines.append(f"  {_q(e.src)} -> {_q(e.dst)} [{', '.join(attrs)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# dict forms


def graph_to_dict(g: ProvenanceGraph) -> dict:
    return {
        "nodes": [{"kind": n.kind.value, "key": n.key, "attrs": dict(sorted(n.attrs.items()))}
                  for _, n in sorted(g.nodes.items())],
        "edges": [edge_to_dict(e) for e in sorted(g.edges, key=Edge.sort_key)],
    }


def graph_from_dict(d: dict) -> ProvenanceGraph:
    g = ProvenanceGraph()
    for n in d["nodes"]:
        nid = Node(NodeKind(n["kind"]), n["key"]).id
        g.nodes[nid] = Node(NodeKind(n["kind"]), n["key"], dict(n["attrs"]))
        g.out_adj[nid] = []
        g.in_adj[nid] = []
    for e in d["edges"]:
        g.add_edge(edge_from_dict(e))
    return g


def edge_to_dict(e: Edge) -> dict:
    return {"src": e.src, "dst": e.dst, "label": e.label.value, "ts": e.ts, "provenance": e.provenance}


def edge_from_dict(d: dict) -> Edge:
    return Edge(d["src"], d["dst"], EdgeLabel(d["label"]), d["ts"], d["provenance"])


def record_to_dict(r: MatchRecord) -> dict:
    d = r.to_dict()
    d["event"] = event_to_dict(r.event)
    return d


def record_from_dict(d: dict) -> MatchRecord:
    return MatchRecord(
        event=event_from_dict(d["event"]), label=d["label"], ts=d["ts"], rule_id=d["rule_id"],
        captures=dict(d["captures"]), tactic=d.get("tactic", ""), initiator=d.get("initiator", ""),
        anchor=d.get("anchor", ""), events=tuple(d.get("events", ())),
    )


def atomic_to_dict(ag: AtomicGraph) -> dict:
    return {
        "phase": ag.phase.value,
        "anchor_event_id": ag.anchor_event_id,
        "indirection_degree": ag.indirection_degree,
        "root": ag.root,
        "process": ag.process,
        "graph": graph_to_dict(ag.graph),
    }


def atomic_from_dict(d: dict) -> AtomicGraph:
    return AtomicGraph(graph_from_dict(d["graph"]), d["anchor_event_id"], Phase(d["phase"]),
                       d["indirection_degree"], d.get("root", ""), d.get("process", ""))


def pag_to_dict(pag: PersistenceAttackGraph) -> dict:
    return {
        "schema": PAG_SCHEMA,
        "setup": atomic_to_dict(pag.setup),
        "execution": atomic_to_dict(pag.execution),
        "pseudo": edge_to_dict(pag.pseudo),
    }


def pag_from_dict(d: dict) -> PersistenceAttackGraph:
    return PersistenceAttackGraph(atomic_from_dict(d["setup"]), atomic_from_dict(d["execution"]),
                                  edge_from_dict(d["pseudo"]))


def alert_to_dict(pe: PseudoEdge, pag: PersistenceAttackGraph) -> dict:
    return {
        "schema": ALERT_SCHEMA,
        "id": pe.id,
        "technique": pe.technique,
        "category": pe.category.value if pe.category is not None else None,
        "src": pe.src,
        "dst": pe.dst,
        "setup": record_to_dict(pe.setup),
        "execution": record_to_dict(pe.execution),
        "pag": pag_to_dict(pag),
    }


def alert_from_dict(d: dict) -> tuple[PseudoEdge, PersistenceAttackGraph]:
    pe = PseudoEdge(d["id"], record_from_dict(d["setup"]), record_from_dict(d["execution"]), d["technique"],
                    d["src"], d["dst"], Category(d["category"]) if d.get("category") else None)
    return pe, pag_from_dict(d["pag"])


def scored_to_dict(a: ScoredAlert) -> dict:
    d = alert_to_dict(a.pseudo_edge, a.pag)
    d["schema"] = RANKED_SCHEMA
    d["category"] = a.category.value
    d["rank"] = a.rank
    d["score"] = a.score
    d["observations"] = [o.to_dict() for o in a.observations]
    return d


def scored_from_dict(d: dict) -> ScoredAlert:
    pe, pag = alert_from_dict(d)
    return ScoredAlert(pe, pag, Category(d["category"]),
                       [IndicatorObservation.from_dict(o) for o in d["observations"]], d["score"], d["rank"])


# ---------------------------------------------------------------------------
# text


Exportable = Union[PersistenceAttackGraph, ScoredAlert, tuple]


def to_dict(obj: Exportable) -> dict:
    if isinstance(obj, PersistenceAttackGraph):
        return pag_to_dict(obj)
    if isinstance(obj, ScoredAlert):
        return scored_to_dict(obj)
    if isinstance(obj, tuple) and len(obj) == 2:
        return alert_to_dict(*obj)
    raise ExportError(f"cannot export {type(obj).__name__}")


def to_json(obj: Exportable, indent: Union[int, None] = None) -> str:
    """Deterministic JSON text (sorted keys) for a PAG, an alert pair or a ranked alert."""
    return json.dumps(to_dict(obj), sort_keys=True, indent=indent,
                      separators=None if indent else (",", ":"), allow_nan=False)


_READERS = {PAG_SCHEMA: pag_from_dict, ALERT_SCHEMA: alert_from_dict, RANKED_SCHEMA: scored_from_dict}


def from_dict(d: dict):
    reader = _READERS.get(d.get("schema") if isinstance(d, dict) else None)
    if reader is None:
        raise ExportError(f"unknown document schema {d.get('schema') if isinstance(d, dict) else d!r}")
    try:
        return reader(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise ExportError(f"bad {d['schema']} document: {exc}") from None


def from_json(text: str):
    """Inverse of :func:`to_json`; the ``schema`` field picks the result type."""
    try:
        d = json.loads(text)
    except ValueError as exc:
        raise ExportError(f"not JSON: {exc}") from None
    return from_dict(d)


def write_ndjson(items, fh) -> int:
    n = 0
    for it in items:
        fh.write(to_json(it) + "\n")
        n += 1
    return n


def read_ndjson(fh) -> list:
    return [from_json(line) for line in fh if line.strip()]

