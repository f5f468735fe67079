import functools
import io
import json

import pytest

from persist_trace.detection import detect
from persist_trace.ingest import event_from_dict, load_corpus
from persist_trace.provenance import apply_expert_edges, build_graph
from persist_trace.rules import default_expert_rules, default_ruleset
from persist_trace.scenario import generate, named_scenario


@functools.lru_cache(maxsize=None)
def bundled_rules():
    return default_ruleset()


@functools.lru_cache(maxsize=None)
def bundled_expert():
    return tuple(default_expert_rules())


@pytest.fixture(scope="session")
def rules():
    return bundled_rules()


@pytest.fixture(scope="session")
def expert():
    return list(bundled_expert())


class Pipeline:
    """Generated corpus carried through ingest, graph build and detection."""

    def __init__(self, text, truth, expert=True):
        self.text = text
        self.truth = truth
        self.store = load_corpus([io.StringIO(text)])
        g = build_graph(self.store)
        self.graph = apply_expert_edges(self.store, g, list(bundled_expert())) if expert else g
        self.result = detect(self.store, self.graph, bundled_rules())

    @property
    def alerts(self):
        return self.result.alerts


@functools.lru_cache(maxsize=None)
def pipeline(name, seed=0, expert=True):
    text, truth = generate(named_scenario(name, seed))
    return Pipeline(text, truth, expert)


def proc(guid, image="C:\\Windows\\System32\\cmd.exe", pid=100, parent="", cmdline=None):
    d = {"guid": guid, "pid": pid, "image": image, "parent": parent}
    if cmdline is not None:
        d["cmdline"] = cmdline
    return d


def ev(eid, ts, etype, actor, obj=None, host="h1"):
    """Build an AuditEvent through the parser, as a corpus line would."""
    d = {"id": eid, "ts": ts, "host": host, "type": etype, "actor": actor}
    if obj is not None:
        d["object"] = obj
    return event_from_dict(d)


def line(eid, ts, etype, actor, obj=None, host="h1"):
    d = {"id": eid, "ts": ts, "host": host, "type": etype, "actor": actor}
    if obj is not None:
        d["object"] = obj
    return json.dumps(d)


# acceptance results, one line per criterion, echoed at the end of the session
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
