"""Command line entry point: ``persist-trace <command>``.

Commands write files so each stage can be run, inspected and resumed on
its own; ``run`` chains them and produces the same files.

Exit codes:

  0  success, no alerts survive
  1  success, at least one alert survives (detect, triage, run)
  2  usage error
  3  configuration error (triage config, scenario spec, missing rules path)
  4  malformed input (corpus, store or alert documents)
  5  I/O error
  6  invalid detection or expert-edge rule
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .detection import detect
from .export import ExportError, read_ndjson, to_dot, to_json, write_ndjson
from .ingest import AbortOnMalformed, EventStore, ParseError, load_corpus, open_store, save_store
from .provenance import RuleError, apply_expert_edges, build_graph
from .rules import bundled_path, load_expert_rules, load_ruleset, match_setup
from .scenario import SCENARIOS, SpecError, emit_alpc_variant, generate_corpus, load_spec, named_scenario
from .triage import ConfigError, ScoredAlert, load_config, triage

logger = logging.getLogger("persist_trace")

SUMMARY_SCHEMA = "persist-trace-summary/1"
THREADS_ENV = "PERSIST_TRACE_THREADS"

EXIT_OK, EXIT_ALERTS, EXIT_USAGE, EXIT_CONFIG, EXIT_PARSE, EXIT_IO, EXIT_RULE = range(7)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def workers(flag: Optional[int]) -> int:
    """Worker count from ``--workers``, capped by the thread env var."""
    cap = os.environ.get(THREADS_ENV)
    n = flag if flag is not None else 1
    if cap:
        try:
            n = min(n, max(1, int(cap))) if flag is not None else max(1, int(cap))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    if n < 1:
        raise UsageError("--workers must be >= 1")
    return n


def _existing(path: Optional[str], what: str, default: Path) -> Path:
    p = Path(path) if path else default
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def load_rules(args):
    rules = load_ruleset(_existing(args.rules, "rules path", bundled_path("rules")))
    if getattr(args, "no_expert", False):
        return rules, []
    expert = load_expert_rules(_existing(args.expert_rules, "expert rules path", bundled_path("expert")))
    return rules, expert


def _inputs(paths: Sequence[str]) -> list:
    out: list = []
    for p in paths:
        if p == "-":
            out.append(sys.stdin)
            continue
        path = Path(p)
        if path.is_dir():
            out.extend(sorted(str(f) for f in path.iterdir() if f.suffix in (".ndjson", ".jsonl", ".json")))
        elif path.exists():
            out.append(str(path))
        else:
            raise FileNotFoundError(f"input not found: {p}")
    return out


def _store(args) -> EventStore:
    if getattr(args, "inputs", None):
        return load_corpus(_inputs(args.inputs), strict=args.strict)
    if not args.store:
        raise UsageError("give corpus inputs or --store")
    return open_store(args.store)


def _graph(store, expert):
    g = build_graph(store)
    return apply_expert_edges(store, g, expert, inplace=True) if expert else g


def _summary(command: str, **fields) -> dict:
    d = {"schema": SUMMARY_SCHEMA, "command": command}
    d.update(fields)
    print(json.dumps(d, sort_keys=True), flush=True)
    return d


class _Timer:
    def __init__(self):
        self.marks: dict = {}
        self._t = time.perf_counter()

    def lap(self, name: str) -> None:
        now = time.perf_counter()
        self.marks[name] = round((now - self._t) * 1000)
        self._t = now


def _write_alerts(path: Path, alerts) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_ndjson(alerts, fh)


def _read_alerts(path: str) -> list:
    with open(path, encoding="utf-8") as fh:
        return read_ndjson(fh)


def _write_graphs(out_dir: Path, ranked: Sequence[ScoredAlert], fmt: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for a in ranked:
        text = to_dot(a.pag, a.pseudo_edge.id) if fmt == "dot" else to_json(a.pag, indent=2) + "\n"
        (out_dir / f"rank-{a.rank:03d}.{fmt}").write_text(text, encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    spec = load_spec(args.spec) if args.spec else named_scenario(args.scenario, args.seed or 0)
    if args.spec and args.seed is not None:
        spec.seed = args.seed
    corpus = generate_corpus(spec)
    out = corpus.write(args.out)
    n = len(corpus.events)
    if spec.ipc_volume > 0:
        full, _, report = emit_alpc_variant(spec)
        (out / "events.ndjson").write_text(full, encoding="utf-8", newline="\n")
        n += report["ipc_events"]
    _summary("gen", scenario=spec.name, seed=spec.seed, events=n, attacks=len(corpus.truth.attacks),
             mimics=len(corpus.truth.mimics), out=str(out))
    return EXIT_OK


def cmd_ingest(args) -> int:
    t = _Timer()
    store = load_corpus(_inputs(args.inputs), strict=args.strict)
    t.lap("ingest")
    save_store(store, args.store)
    t.lap("write")
    _summary("ingest", events=len(store), skipped=store.skipped, store=args.store, timings_ms=t.marks)
    return EXIT_OK


def cmd_detect(args) -> int:
    rules, expert = load_rules(args)
    t = _Timer()
    store = _store(args)
    t.lap("ingest")
    g = _graph(store, expert)
    t.lap("graph")
    res = detect(store, g, rules, workers(args.workers))
    t.lap("detect")
    _write_alerts(Path(args.out), res.alerts)
    _summary("detect", events=len(store), stage1=len(res.setup), stage2=len(res.alerts), timings_ms=t.marks)
    return EXIT_ALERTS if res.alerts else EXIT_OK


def cmd_triage(args) -> int:
    rules, expert = load_rules(args)
    cfg = load_config(args.config)
    t = _Timer()
    alerts = [(a.pseudo_edge, a.pag) if isinstance(a, ScoredAlert) else a for a in _read_alerts(args.alerts)]
    store = _store(args)
    g = _graph(store, expert)
    setup = match_setup(store, rules, g)
    t.lap("load")
    ranked = triage(alerts, store, g, cfg, rules, setup, budget=args.budget, workers=workers(args.workers))
    t.lap("triage")
    _write_alerts(Path(args.out), ranked)
    _summary("triage", stage2=len(alerts), stage3=len(ranked), top=[a.pseudo_edge.id for a in ranked],
             timings_ms=t.marks)
    return EXIT_ALERTS if ranked else EXIT_OK


def cmd_graph(args) -> int:
    items = _read_alerts(args.alerts)
    chosen = None
    for i, it in enumerate(items, 1):
        pe, pag = (it.pseudo_edge, it.pag) if isinstance(it, ScoredAlert) else it
        rank = it.rank if isinstance(it, ScoredAlert) else i
        if args.alert_id in (pe.id, str(rank)):
            chosen = (pe, pag)
            break
    if chosen is None:
        raise UsageError(f"no alert {args.alert_id!r} in {args.alerts}")
    pe, pag = chosen
    text = to_dot(pag, pe.id) if args.format == "dot" else to_json(pag, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def run_pipeline(store: Optional[EventStore], inputs: Sequence[str], rules, expert, cfg, out_dir: Path,
                 budget: Optional[int] = None, fmt: str = "dot", n_workers: int = 1,
                 strict: bool = False) -> dict:
    """ingest -> graph + expert edges -> detect -> triage -> export; returns the summary fields."""
    t = _Timer()
    if store is None:
        store = load_corpus(_inputs(inputs), strict=strict)
    t.lap("ingest")
    g = _graph(store, expert)
    t.lap("graph")
    res = detect(store, g, rules, n_workers)
    t.lap("detect")
    ranked = triage(res.alerts, store, g, cfg, rules, res.setup, budget=budget, workers=n_workers)
    t.lap("triage")
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_alerts(out_dir / "alerts.ndjson", res.alerts)
    _write_alerts(out_dir / "ranked.ndjson", ranked)
    _write_graphs(out_dir / "graphs", ranked, fmt)
    t.lap("export")
    return {
        "events": len(store), "skipped": store.skipped, "stage1": len(res.setup), "stage2": len(res.alerts),
        "stage3": len(ranked), "top": [a.pseudo_edge.id for a in ranked], "timings_ms": t.marks,
    }


def cmd_run(args) -> int:
    rules, expert = load_rules(args)
    cfg = load_config(args.config)
    if not args.inputs and not args.store:
        raise UsageError("give corpus inputs or --store")
    store = open_store(args.store) if args.store and not args.inputs else None
    s = run_pipeline(store, args.inputs, rules, expert, cfg, Path(args.out), args.budget, args.format,
                     workers(args.workers), args.strict)
    _summary("run", **s)
    return EXIT_ALERTS if s["stage3"] else EXIT_OK


def cmd_rules_lint(args) -> int:
    rules, expert = load_rules(args)
    _summary("rules-lint", rules=len(rules.rules), setup=len(rules.setup), execution=len(rules.execution),
             context=len(rules.context), expert=len(expert), techniques=sorted(rules.techniques()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_rules(p) -> None:
    p.add_argument("--rules", help="detection rule file or directory (default: bundled rules)")
    p.add_argument("--expert-rules", help="expert-edge rule file or directory (default: bundled)")
    p.add_argument("--no-expert", action="store_true", help="do not add expert-guided edges")


def _add_corpus(p, required: bool = False) -> None:
    p.add_argument("inputs", nargs="+" if required else "*", help="NDJSON files, directories or '-'")
    p.add_argument("--strict", action="store_true", help="abort on the first malformed line")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="persist-trace", description="Two-phase persistence detection over audit logs.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a labeled synthetic corpus")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--scenario", default="fig3", help=f"named scenario ({', '.join(SCENARIOS)})")
    src.add_argument("--spec", help="scenario spec YAML")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory (events.ndjson, truth.ndjson)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("ingest", help="parse NDJSON into an event store")
    _add_corpus(p, required=True)
    p.add_argument("--store", required=True, help="store directory to write")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("detect", help="stages 1 and 2: pseudo-edges and attack graphs")
    _add_corpus(p)
    p.add_argument("--store", help="event store directory")
    _add_rules(p)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True, help="alerts NDJSON to write")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("triage", help="stage 3: score, rank and cut to the budget")
    _add_corpus(p)
    p.add_argument("--store", help="event store directory")
    p.add_argument("--alerts", required=True, help="alerts NDJSON from detect")
    _add_rules(p)
    p.add_argument("--config", help="triage TOML config (default: bundled)")
    p.add_argument("--budget", type=int, help="alert budget N (default: from config)")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True, help="ranked NDJSON to write")
    p.set_defaults(func=cmd_triage)

    p = sub.add_parser("graph", help="export one alert's attack graph")
    p.add_argument("alert_id", help="pseudo-edge id or rank")
    p.add_argument("--alerts", required=True, help="alerts or ranked NDJSON")
    p.add_argument("--format", choices=("dot", "json"), default="dot")
    p.add_argument("--out")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("run", help="end-to-end pipeline")
    _add_corpus(p)
    p.add_argument("--store", help="event store directory (instead of corpus inputs)")
    _add_rules(p)
    p.add_argument("--config", help="triage TOML config (default: bundled)")
    p.add_argument("--budget", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--format", choices=("dot", "json"), default="dot", help="attack graph format")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("rules", help="rule utilities")
    rsub = p.add_subparsers(dest="rules_command", required=True)
    q = rsub.add_parser("lint", help="load and validate rules")
    _add_rules(q)
    q.set_defaults(func=cmd_rules_lint)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"persist-trace: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, SpecError) as exc:
        print(f"persist-trace: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuleError as exc:
        print(f"persist-trace: rule error: {exc}", file=sys.stderr)
        return EXIT_RULE
    except (AbortOnMalformed, ParseError, ExportError) as exc:
        print(f"persist-trace: malformed input: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except OSError as exc:
        print(f"persist-trace: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # store header / index problems
        print(f"persist-trace: malformed input: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
