"""Alert triage: edge categories, indicator observations and anomaly scores.

Scoring:

* PAG indicator: ``N_s**2 * N_e**2`` from the two atomic graphs.
* DG indicator: per hit ``(D_c / D) * Freq * Var`` with ``D = D_s`` for hits
  at or before the execution and ``D = D_e`` after it; the indicator keeps
  its best hit.
* Alert score: ``prod(AS_i ** (w_i * rho))`` over observations, with
  ``rho = 1`` for causality edges; 0 without observations.
"""

from __future__ import annotations

import ipaddress
import logging
import sys
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .detection import AtomicGraph, Category, PersistenceAttackGraph, PseudoEdge
from .ingest import EventStore, EventType
from .provenance import (
    INF,
    INFERRED,
    LINEAGE,
    TRIAGE_DEPTH,
    ProvenanceGraph,
    merge_graphs,
    proc_id,
    reach,
    traverse_backward,
    traverse_forward,
)
from .rules import MatchRecord, RuleSet, bundled_path, match_context

logger = logging.getLogger(__name__)

CORRELATION_FAMILIES = ("T1098", "T1136", "T1078")


class ConfigError(ValueError):
    pass


@dataclass
class TriageConfig:
    d_c: float = 3.0
    dg_depth: int = TRIAGE_DEPTH
    rho: float = 0.6
    budget: int = 10
    internal_cidrs: tuple = ("10.0.0.0/8", "172.16.0.0/12", "192.168.0.0/16")
    domain_fqdns: tuple = ()
    computer_accounts: tuple = ()
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.d_c >= 1:
            raise ConfigError("d_c must be >= 1")
        if int(self.budget) < 1:
            raise ConfigError("budget must be >= 1")
        if not 0 < self.rho <= 1:
            raise ConfigError("rho must be in (0, 1]")
        if int(self.dg_depth) < 1:
            raise ConfigError("dg_depth must be >= 1")
        for k, w in self.weights.items():
            if not isinstance(w, (int, float)) or isinstance(w, bool) or not w > 0:
                raise ConfigError(f"weight {k!r} must be a positive number")
        try:
            self._nets = tuple(ipaddress.ip_network(c, strict=False) for c in self.internal_cidrs)
        except ValueError as exc:
            raise ConfigError(f"bad CIDR: {exc}") from None

    def weight(self, spec: "IndicatorSpec") -> float:
        return float(self.weights.get(spec.id, spec.weight))

    def is_internal(self, ip: Optional[str]) -> bool:
        if not ip:
            return False
        try:
            a = ipaddress.ip_address(ip)
        except ValueError:
            return False
        return any(a in n for n in self._nets)


_CONFIG_KEYS = {"d_c", "dg_depth", "rho", "budget", "internal_cidrs", "domain_fqdns", "computer_accounts", "weights"}


def load_config(path: Union[str, Path, None] = None) -> TriageConfig:
    """Read a TOML triage config; ``None`` gives the bundled defaults."""
    p = Path(path) if path is not None else bundled_path("triage.toml")
    try:
        with open(p, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config not found: {p}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kw = dict(doc)
    for k in ("internal_cidrs", "domain_fqdns", "computer_accounts"):
        if k in kw:
            kw[k] = tuple(kw[k])
    unknown_w = set(kw.get("weights", {})) - {s.id for s in DEFAULT_INDICATORS}
    if unknown_w:
        raise ConfigError(f"unknown indicator weights: {sorted(unknown_w)}")
    try:
        return TriageConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# indicators


ALL = frozenset(Category)
C1 = Category.CORRELATION_1
C2 = Category.CORRELATION_2
CAUSAL = Category.CAUSALITY


@dataclass(frozen=True)
class IndicatorSpec:
    id: str
    applies_to: frozenset
    source: str  # PAG | DG
    detector: str = "ttp"  # indirection | ttp | co_persistence | non_domain_host
    techniques: tuple = ()
    tactics: tuple = ()
    temporal_side: str = "either"  # before_execution | after_execution | either
    weight: float = 1.0

    def __post_init__(self):
        if not self.weight > 0:
            raise ConfigError(f"{self.id}: weight must be > 0")
        if self.detector == "ttp" and not (self.techniques or self.tactics):
            raise ConfigError(f"{self.id}: DG indicators need a technique or tactic")

    def wants(self, technique: str, tactic: str) -> bool:
        if tactic in self.tactics:
            return True
        return any(technique == t or technique.startswith(t + ".") for t in self.techniques)


DEFAULT_INDICATORS = (
    IndicatorSpec("indirection", frozenset({CAUSAL}), "PAG", "indirection"),
    IndicatorSpec("credential_access", frozenset({CAUSAL, C1}), "DG", tactics=("credential-access",)),
    IndicatorSpec("co_persistence", frozenset({CAUSAL}), "DG", "co_persistence"),
    IndicatorSpec("initial_access_lateral", frozenset({CAUSAL}), "DG",
                  tactics=("initial-access", "lateral-movement"), temporal_side="before_execution"),
    IndicatorSpec("discovery", frozenset({CAUSAL}), "DG", tactics=("discovery",),
                  temporal_side="before_execution", weight=0.25),
    IndicatorSpec("non_domain_host", frozenset({C1}), "DG", "non_domain_host"),
    IndicatorSpec("local_account_creation", frozenset({C1, C2}), "DG", techniques=("T1136",)),
    IndicatorSpec("remote_access_tools", frozenset({C1, C2}), "DG", techniques=("T1219",)),
    IndicatorSpec("remote_system_discovery", frozenset({C2}), "DG", techniques=("T1018",),
                  temporal_side="before_execution"),
    IndicatorSpec("ingress_tool_transfer", frozenset({C2}), "DG", techniques=("T1105",),
                  temporal_side="before_execution"),
    IndicatorSpec("credential_access_before", frozenset({C2}), "DG", tactics=("credential-access",),
                  temporal_side="before_execution"),
)


@dataclass(frozen=True)
class Hit:
    technique: str
    tactic: str
    ts: int
    d_s: float
    d_e: float
    freq: int = 1
    var: int = 1
    event_id: str = ""


@dataclass(frozen=True)
class IndicatorObservation:
    spec_id: str
    technique: str
    tactic: str
    t_teq: int
    d_s: float
    d_e: float
    freq: int
    var: int
    as_value: float
    weight: float = 1.0
    event_id: str = ""

    def to_dict(self) -> dict:
        def num(x):
            return None if x == INF else x
        return {"spec_id": self.spec_id, "technique": self.technique, "tactic": self.tactic,
                "t_teq": self.t_teq, "d_s": num(self.d_s), "d_e": num(self.d_e), "freq": self.freq,
                "var": self.var, "as": self.as_value, "weight": self.weight, "event_id": self.event_id}

    @classmethod
    def from_dict(cls, d: dict) -> "IndicatorObservation":
        def num(x):
            return INF if x is None else x
        return cls(d["spec_id"], d["technique"], d["tactic"], d["t_teq"], num(d["d_s"]), num(d["d_e"]),
                   d["freq"], d["var"], d["as"], d.get("weight", 1.0), d.get("event_id", ""))


def indirection_score(n_s: int, n_e: int) -> float:
    """``N_s**2 * N_e**2`` for setup and execution indirection degrees."""
    if n_s < 1 or n_e < 1:
        raise ValueError("indirection degrees must be >= 1")
    return float(n_s * n_s * n_e * n_e)


def score_pag_indicator(setup_ag: AtomicGraph, exec_ag: AtomicGraph) -> float:
    """Degree-of-indirection score of a persistence attack graph."""
    return indirection_score(setup_ag.indirection_degree, exec_ag.indirection_degree)


def hit_score(hit: Hit, t_e: int, d_c: float) -> float:
    d = hit.d_s if hit.ts <= t_e else hit.d_e
    if d == INF:
        return 0.0
    d = max(d, 1)
    return (d_c / d) * hit.freq * hit.var


def best_hit(hits: Sequence[Hit], t_e: int, d_c: float) -> tuple[float, Optional[Hit]]:
    """Highest-scoring hit and its score; the first one wins ties."""
    best, arg = 0.0, None
    for h in hits:
        s = hit_score(h, t_e, d_c)
        if s > best:
            best, arg = s, h
    return best, arg


def score_dg_indicator(hits: Sequence[Hit], t_e: int, d_c: float) -> float:
    """Dependency-graph indicator score: the maximum over its hits (0 without any)."""
    return best_hit(hits, t_e, d_c)[0]


def with_freq_var(hits: Sequence[Hit]) -> list[Hit]:
    """Fill Freq (same technique) and Var (distinct techniques of the tactic)."""
    freq: dict = {}
    per_tactic: dict = {}
    for h in hits:
        freq[h.technique] = freq.get(h.technique, 0) + 1
        per_tactic.setdefault(h.tactic, set()).add(h.technique)
    return [replace(h, freq=freq[h.technique], var=len(per_tactic[h.tactic])) for h in hits]


def sum_score(observations: Iterable[IndicatorObservation], category: Category,
              cfg: TriageConfig) -> float:
    obs = list(observations)
    if not obs:
        return 0.0
    rho = 1.0 if Category(category) is Category.CAUSALITY else cfg.rho
    out = 1.0
    for o in obs:
        out *= o.as_value ** (o.weight * rho)
    return out


def classify_edge(pe: PseudoEdge, cfg: TriageConfig, store: Optional[EventStore] = None) -> Category:
    """Account techniques are correlation edges; external sources make them type 1."""
    t = pe.technique
    if not any(t == f or t.startswith(f + ".") for f in CORRELATION_FAMILIES):
        return Category.CAUSALITY
    return Category.CORRELATION_2 if cfg.is_internal(source_ip(pe, store)) else Category.CORRELATION_1


def source_ip(pe: PseudoEdge, store: Optional[EventStore] = None) -> Optional[str]:
    e = pe.execution.event
    ip = getattr(e.object, "ip", None)
    if ip or store is None:
        return ip
    for i in store.by_actor.get(pe.execution.anchor, ()):
        x = store.events[i]
        if x.event_type is EventType.NET_ACCEPT:
            return x.object.ip
    return None


# ---------------------------------------------------------------------------
# triage driver


@dataclass
class ScoredAlert:
    pseudo_edge: PseudoEdge
    pag: PersistenceAttackGraph
    category: Category
    observations: list
    score: float
    rank: int = 0


def dependency_graph(g: ProvenanceGraph, pag: PersistenceAttackGraph, depth: int) -> tuple:
    """Backward and forward traces of the PAG nodes, merged: ``(graph, events)``."""
    seeds = sorted(n for n in pag.graph.nodes if n in g.nodes)
    back, bev = traverse_backward(g, seeds, depth)
    fwd, fev = traverse_forward(g, seeds, depth)
    dg = merge_graphs(back, fwd)
    pos = sorted({g.store.by_id[e.event_id] for e in bev + fev})
    return dg, [g.store.events[i] for i in pos]


def _dependency_view(g: ProvenanceGraph, pag: PersistenceAttackGraph, depth: int) -> tuple[list, dict]:
    # same content as dependency_graph() without materializing subgraphs:
    # events in store order plus undirected lineage adjacency inside the DG
    seeds = sorted(n for n in pag.graph.nodes if n in g.nodes)
    _, back = reach(g, seeds, depth, backward=True)
    _, fwd = reach(g, seeds, depth, backward=False)
    used = set(back)
    used.update(fwd)
    store = g.store
    pos = set()
    adj: dict = {}
    for i in used:
        e = g.edges[i]
        if e.label in LINEAGE:
            adj.setdefault(e.src, []).append(e.dst)
            adj.setdefault(e.dst, []).append(e.src)
        if e.label not in INFERRED:
            p = store.by_id.get(e.provenance)
            if p is not None:
                pos.add(p)
    return [store.events[p] for p in sorted(pos)], adj


def _bfs(adj: dict, src: str) -> dict:
    dist = {src: 0}
    queue = deque([src])
    while queue:
        n = queue.popleft()
        for m in adj.get(n, ()):
            if m not in dist:
                dist[m] = dist[n] + 1
                queue.append(m)
    return dist


def _in_side(ts: int, t_e: int, side: str) -> bool:
    if side == "before_execution":
        return ts <= t_e
    if side == "after_execution":
        return ts > t_e
    return True


def observe(pe: PseudoEdge, pag: PersistenceAttackGraph, category: Category, g: ProvenanceGraph,
            cfg: TriageConfig, rules: RuleSet, setup_table: Sequence[MatchRecord],
            indicators: Sequence[IndicatorSpec] = DEFAULT_INDICATORS) -> list[IndicatorObservation]:
    specs = [s for s in indicators if category in s.applies_to]
    t_e = pe.execution.ts
    obs: list[IndicatorObservation] = []
    need_dg = any(s.source == "DG" and s.detector in ("ttp", "co_persistence") for s in specs)
    ctx: list = []
    dist_s: dict = {}
    dist_e: dict = {}
    if need_dg:
        events, adj = _dependency_view(g, pag, cfg.dg_depth)
        ctx = match_context(events, rules)
        in_dg = {e.event_id for e in events}
        own = set(pe.setup.events) | {pe.setup.event.event_id}
        ctx += [m for m in setup_table if m.event.event_id in in_dg and m.event.event_id not in own
                and not own.intersection(m.events)]
        dist_s = _bfs(adj, pe.src)
        dist_e = _bfs(adj, pe.dst)
    setup_ids = {id(m) for m in setup_table}
    for spec in specs:
        w = cfg.weight(spec)
        if spec.detector == "indirection":
            v = score_pag_indicator(pag.setup, pag.execution)
            if v > 1:
                obs.append(IndicatorObservation(spec.id, pe.technique, "persistence", pe.setup.ts,
                                                0, 0, 1, 1, v, w))
        elif spec.detector == "non_domain_host":
            e = pe.execution.event
            host = getattr(e.object, "src_host", None)
            legit = bool(host) and (host in cfg.domain_fqdns or f"{host}$" in cfg.computer_accounts)
            if not legit:
                obs.append(IndicatorObservation(spec.id, pe.technique, "initial-access", e.ts, 1, 1, 1, 1,
                                                float(cfg.d_c), w, e.event_id))
        else:
            hits = []
            for m in ctx:
                is_setup = id(m) in setup_ids
                if spec.detector == "co_persistence" and not is_setup:
                    continue
                if spec.detector == "ttp" and (is_setup or not spec.wants(m.label, m.tactic)):
                    continue
                if not _in_side(m.ts, t_e, spec.temporal_side):
                    continue
                actor = proc_id(m.initiator or m.event.actor.guid)
                hits.append(Hit(m.label, m.tactic, m.ts, dist_s.get(actor, INF), dist_e.get(actor, INF),
                                event_id=m.event.event_id))
            if not hits:
                continue
            hits.sort(key=lambda h: (h.ts, h.event_id, h.technique))
            best, h = best_hit(with_freq_var(hits), t_e, cfg.d_c)
            if h is not None and best > 0:
                obs.append(IndicatorObservation(spec.id, h.technique, h.tactic, h.ts, h.d_s, h.d_e,
                                                h.freq, h.var, best, w, h.event_id))
    return obs


def rank(alerts: list, budget: Optional[int]) -> list:
    alerts.sort(key=lambda a: (-a.score, a.pseudo_edge.setup.ts, a.pseudo_edge.id))
    for i, a in enumerate(alerts, 1):
        a.rank = i
    return alerts if budget is None else alerts[:budget]


def triage(alerts: Sequence[tuple], store: EventStore, graph: ProvenanceGraph, cfg: TriageConfig,
           rules: RuleSet, setup_table: Optional[Sequence[MatchRecord]] = None,
           budget: Optional[int] = None, workers: int = 1,
           indicators: Sequence[IndicatorSpec] = DEFAULT_INDICATORS) -> list[ScoredAlert]:
    """Score every (PseudoEdge, PAG), sort by score and keep the top ``budget``.

    Ties are broken by earlier setup time, then edge id.
    """
    if setup_table is None:
        from .rules import match_setup
        setup_table = match_setup(store, rules, graph)
    n = cfg.budget if budget is None else budget
    if n < 1:
        raise ConfigError("budget must be >= 1")

    def one(item):
        pe, pag = item
        cat = classify_edge(pe, cfg, store)
        pe = replace(pe, category=cat)
        obs = observe(pe, pag, cat, graph, cfg, rules, setup_table, indicators)
        return ScoredAlert(pe, pag, cat, obs, sum_score(obs, cat, cfg))

    items = list(alerts)
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            scored = list(ex.map(one, items))
    else:
        scored = [one(a) for a in items]
    return rank(scored, n)
