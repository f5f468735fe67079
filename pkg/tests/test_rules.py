import itertools
import textwrap

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import bundled_expert, ev, pipeline, proc
from persist_trace.ingest import EventStore, EventType, canon
from persist_trace.predicates import FieldUnresolvable, Predicate, check_condition, extract
from persist_trace.provenance import EdgeLabel, NodeKind, apply_expert_edges, build_graph, object_node_id, proc_id
from persist_trace.provenance import lineage, traverse_backward
from persist_trace.rules import (
    DEFAULT_ALLOWLIST,
    Phase,
    RuleError,
    RuleSet,
    load_ruleset,
    match_execution,
    match_setup,
    parse_rule,
)
from persist_trace.scenario import TECHNIQUES
from strategies import event_doc

RUN = "HKCU\\Software\\Microsoft\\Windows\\CurrentVersion\\Run"
EXPLORER = "C:\\Windows\\explorer.exe"
PS = "C:\\Windows\\System32\\WindowsPowerShell\\v1.0\\powershell.exe"


def reg_set(eid, ts, actor, value, key=RUN):
    return ev(eid, ts, "REG_SET", actor, {"reg_key": key, "value_name": "upd", "value": value})


# ---------------------------------------------------------------------------
# predicates


def test_prefix_on_run_key():
    e = reg_set("e1", 1, proc("g1", PS), "C:\\u\\hostui.exe")
    assert check_condition(Predicate("object.reg_key", "prefix", (RUN,)), e)


def test_equals_is_case_insensitive_for_windows_paths():
    e = ev("e1", 1, "FILE_READ", proc("g1", "C:\\Windows\\explorer.exe"), {"path": "C:\\x"})
    assert check_condition(Predicate("actor.image", "equals", ("C:\\windows\\EXPLORER.EXE",)), e)


def test_negated_contains():
    e = ev("e1", 1, "FILE_READ", proc("g1", PS), {"path": "C:\\x"})
    p = Predicate("actor.image", "contains", ("powershell",), negate=True)
    assert not check_condition(p, e)
    assert check_condition(Predicate("actor.image", "contains", ("cmd.exe",), negate=True), e)


def test_missing_field_is_no_match_before_negation():
    e = ev("e1", 1, "FILE_READ", proc("g1", PS), {"path": "C:\\x"})
    assert not check_condition(Predicate("object.reg_key", "equals", ("x",)), e)
    assert check_condition(Predicate("object.reg_key", "equals", ("x",), negate=True), e)


def test_glob_and_in_set_and_suffix():
    e = ev("e1", 1, "FILE_WRITE", proc("g1", PS),
           {"path": "C:\\Users\\a\\AppData\\Roaming\\Microsoft\\Windows\\Start Menu\\Programs\\Startup\\x.lnk"})
    assert check_condition(Predicate("object.path", "glob", ("*\\start menu\\programs\\startup\\*",)), e)
    assert check_condition(Predicate("object.name", "in_set", ("a.lnk", "X.LNK")), e)
    assert check_condition(Predicate("object.name", "suffix", (".lnk",)), e)


def test_predicate_validation():
    with pytest.raises(ValueError):
        Predicate("actor.image", "regex", ("x",))
    with pytest.raises(ValueError):
        Predicate("actor.image", "in_set", ())
    with pytest.raises(FieldUnresolvable):
        Predicate.from_dict({"field": "actor.colour", "value": "x"})
    with pytest.raises(FieldUnresolvable):
        check_condition(Predicate("actor.colour", "equals", ("x",)), ev("e1", 1, "PROCESS_TERMINATE", proc("g")))


@pytest.mark.parametrize("raw, how, arg, want", [
    ("schtasks /create /tn Updater /tr x", "token_after", "/tn ", "updater"),
    ('schtasks /create /tn "My Task" /tr x', "token_after", "/tn ", "my task"),
    ("HKLM\\SYSTEM\\CurrentControlSet\\Services\\evil\\x", "segment_after", "services", "evil"),
    ('"C:\\u\\hostui.exe" -silent', "first_token", "", "c:\\u\\hostui.exe"),
    ("C:\\a\\b.dll", "stem", "", "b"),
    ("C:\\a\\b.dll", "basename", "", "b.dll"),
    ("abc", "token_after", "zz", None),
])
def test_extractors(raw, how, arg, want):
    assert extract(raw, how, arg) == want


@settings(max_examples=100, deadline=None)
@given(event_doc(), st.sampled_from(["actor.image", "object.path", "object.reg_key", "actor.name", "host"]),
       st.sampled_from(["equals", "prefix", "suffix", "contains", "in_set", "glob"]),
       st.sampled_from(["c:\\windows", "powershell.exe", "*\\temp\\*", "/tmp", "h1"]), st.booleans())
def test_predicate_is_pure(doc, field, op, value, negate):
    from persist_trace.ingest import event_from_dict
    e = event_from_dict(doc)
    p = Predicate(field, op, (value,), negate)
    assert check_condition(p, e) == check_condition(p, e) == check_condition(Predicate(field, op, (value,), negate), e)


# ---------------------------------------------------------------------------
# loading


def test_bundled_ruleset_covers_ten_techniques(rules):
    top10 = [t for t in TECHNIQUES if t != "T1543.002"]  # systemd service is an extra
    assert len(top10) == 10
    for t in TECHNIQUES:
        family = [r for r in rules if r.technique == t]
        assert {r.phase for r in family} >= {Phase.SETUP, Phase.EXECUTION}, t
    for r in rules:
        if r.phase is not Phase.EXECUTION:
            assert not r.required_ancestor
        if r.phase is not Phase.CONTEXT:
            assert r.capture_names


def test_web_shell_setup_is_partial(rules):
    partial = {r.technique for r in rules if r.sensitivity == "partial"}
    assert partial == {"T1505.003"}


def test_empty_dir_gives_empty_ruleset(tmp_path, caplog):
    rs = load_ruleset(tmp_path)
    assert len(rs) == 0
    assert "no detection rules" in caplog.text


def _doc(rid="r1", **kw):
    d = {
        "schema": "persist-trace-rule/1", "kind": "detection", "id": rid, "technique": "T1547.001",
        "phase": "setup",
        "conditions": [{"event_type": "REG_SET", "where": [{"field": "object.reg_key", "op": "prefix", "value": RUN}],
                        "captures": {"trigger": "object.value"}}],
    }
    d.update(kw)
    return d


def test_duplicate_id_rejected(tmp_path):
    import yaml
    (tmp_path / "a.yaml").write_text(yaml.safe_dump_all([_doc(), _doc()]))
    with pytest.raises(RuleError) as ei:
        load_ruleset(tmp_path)
    assert ei.value.reason == "duplicate_id"


@pytest.mark.parametrize("kw", [
    {"technique": "T15"},
    {"technique": "t1547.001"},
    {"phase": "later"},
    {"schema": "other/1"},
    {"conditions": []},
    {"required_ancestor": [{"field": "name", "value": "explorer.exe"}]},
    {"conditions": [{"event_type": "REG_SET", "captures": {"x": "object.nope"}}]},
    {"conditions": [{"event_type": "REG_SET", "where": [{"field": "object.nope", "value": "x"}],
                     "captures": {"x": "object.value"}}]},
    {"conditions": [{"event_type": "REG_SET", "where": [{"field": "object.reg_key", "op": "in_set", "values": []}],
                     "captures": {"x": "object.value"}}]},
    {"conditions": [{"event_type": "REG_SET"}]},
    {"max_span_ms": 0},
])
def test_invalid_rules(kw):
    with pytest.raises(RuleError):
        parse_rule(_doc(**kw))


def test_yaml_container(tmp_path):
    (tmp_path / "r.yaml").write_text(textwrap.dedent("""\
        schema: persist-trace-rule/1
        kind: detection
        id: demo
        technique: T1547.001
        phase: setup
        conditions:
          - event_type: REG_SET
            where:
              - {field: object.reg_key, op: prefix, value: 'HKCU\\Software'}
            captures:
              trigger: object.value
        ---
        schema: persist-trace-rule/1
        kind: expert-edge
        id: ignored-here
        window_ms: 1
        trigger: {event_type: FILE_WRITE, correlate: object.path}
        broker: {event_type: FILE_READ, correlate: object.path}
        """))
    rs = load_ruleset(tmp_path)
    assert [r.id for r in rs] == ["demo"]


# ---------------------------------------------------------------------------
# stage 1 examples


def test_run_key_setup_record(rules):
    store = EventStore([reg_set("e1", 5, proc("g1", PS), "\"C:\\u\\hostui.exe\" -bg")])
    (m,) = match_setup(store, rules)
    assert m.label == "T1547.001" and m.captures == {"trigger": "c:\\u\\hostui.exe"}
    assert m.initiator == "g1" and m.events == ("e1",)


def _schtasks(ts, guid="g1", name="Upd"):
    return ev(f"c{ts}", ts, "PROCESS_CREATE", proc(guid, PS),
              {"child": proc(f"s{ts}", "C:\\Windows\\System32\\schtasks.exe", parent=guid,
                             cmdline=f"schtasks /create /tn {name} /tr C:\\u\\x.exe")})


def _task_file(ts, name="Upd"):
    return ev(f"w{ts}", ts, "FILE_WRITE", proc("svc", "C:\\Windows\\System32\\svchost.exe"),
              {"path": f"C:\\Windows\\System32\\Tasks\\{name}"})


def test_sequenced_task_rule(rules):
    store = EventStore([_schtasks(1000), _task_file(3000)])
    (m,) = match_setup(store, rules)
    assert m.label == "T1053.005" and m.events == ("c1000", "w3000") and m.captures == {"task": "upd"}
    # the sequence is attributed to its first actor, so the svchost allowlist does not apply
    assert m.initiator == "g1"


def test_sequence_span_and_correlation(rules):
    late = EventStore([_schtasks(1000), _task_file(1000 + 30_001)])
    assert match_setup(late, rules) == []
    other = EventStore([_schtasks(1000, name="A"), _task_file(2000, name="B")])
    assert match_setup(other, rules) == []


def test_deleted_dll_suppressed(rules):
    drop = ev("e1", 10, "FILE_WRITE", proc("g1", PS), {"path": "C:\\app\\version.dll"})
    gone = ev("e2", 20, "FILE_DELETE", proc("g1", PS), {"path": "C:\\app\\version.dll"})
    assert [m.label for m in match_setup(EventStore([drop]), rules)] == ["T1574.001"]
    assert match_setup(EventStore([drop, gone]), rules) == []


def test_allowlisted_writer_suppressed_unless_modified(rules):
    svc = proc("s1", "C:\\Windows\\System32\\svchost.exe")
    write = reg_set("e2", 20, svc, "C:\\u\\x.exe")
    assert match_setup(EventStore([write]), rules) == []
    tamper = ev("e1", 10, "FILE_WRITE", proc("g1", PS), {"path": "C:\\Windows\\System32\\svchost.exe"})
    assert len(match_setup(EventStore([tamper, write]), rules)) == 1
    tamper_later = ev("e3", 30, "FILE_WRITE", proc("g1", PS), {"path": "C:\\Windows\\System32\\svchost.exe"})
    assert match_setup(EventStore([write, tamper_later]), rules) == []


def test_expert_edge_rescues_broker_write(rules):
    p = pipeline("fig5")
    plain = pipeline("fig5", expert=False)
    got = [m for m in match_setup(p.store, rules, p.graph) if m.label == "T1543.003"]
    assert got and all(proc_id(m.initiator) in p.graph.nodes for m in got)
    assert any(p.graph.nodes[proc_id(m.initiator)].label.lower() == "sc.exe" for m in got)
    assert not [m for m in match_setup(plain.store, rules, plain.graph) if m.label == "T1543.003"]


# ---------------------------------------------------------------------------
# stage 1 oracle


def _all_chains(rule, store):
    """Every (positions, captures) chain for the rule, by exhaustive enumeration."""
    groups = rule.conditions
    hits = [[i for i, e in enumerate(store.events) if g.matches(e)] for g in groups]
    for combo in itertools.product(*hits):
        if any(a >= b for a, b in zip(combo, combo[1:])):
            continue
        evs = [store.events[i] for i in combo]
        if evs[0].ts < evs[-1].ts - rule.max_span_ms:
            continue
        caps = [g.capture(e) for g, e in zip(groups, evs)]
        if any(c is None for c in caps):
            continue
        ok = True
        for k in range(1, len(groups)):
            on = groups[k].correlate_on
            if on is None:
                ok = ok and evs[k - 1].actor.guid == evs[k].actor.guid
            else:
                ok = ok and caps[k - 1].get(on) == caps[k].get(on)
        if ok:
            yield list(combo), caps


def _oracle_setup(store, rules, graph):
    out = []
    for rule in rules.setup:
        best = {}
        for combo, caps in _all_chains(rule, store):
            last = combo[-1]
            key = tuple(reversed(combo))
            if last not in best or key > best[last][0]:
                best[last] = (key, combo, caps)
        for last, (_, combo, caps) in best.items():
            first, e = store.events[combo[0]], store.events[last]
            initiator = first.actor.guid
            image = canon(first.actor.image)
            modified = any(x.event_type is EventType.FILE_WRITE and x.host == first.host
                           and x.object.key() == image for x in store.events[:combo[0]])
            if image in DEFAULT_ALLOWLIST and not modified:
                nid = object_node_id(e)
                srcs = sorted(ed.src for ed in graph.edges
                              if ed.label is EdgeLabel.EXPERT and ed.dst == nid and ed.ts == e.ts
                              and graph.nodes[ed.src].kind is NodeKind.PROCESS)
                if not srcs:
                    continue
                initiator = srcs[0][len("proc:"):]
            if rule.suppress_if_deleted and any(
                    x.event_type is EventType.FILE_DELETE and x.host == e.host and x.object.key() == e.object.key()
                    for x in store.events[last + 1:]):
                continue
            merged = {}
            for c in caps:
                merged.update(c)
            out.append((e.ts, e.event_id, rule.id, tuple(store.events[i].event_id for i in combo),
                        tuple(sorted(merged.items())), initiator))
    return sorted(out)


def _as_tuples(records):
    return [(m.ts, m.event.event_id, m.rule_id, m.events, tuple(sorted(m.captures.items())), m.initiator)
            for m in records]


@pytest.mark.parametrize("name, seed", [("fig3", 0), ("fig5", 2), ("fig6", 1), ("mixed", 0), ("t1053.005", 4),
                                        ("all-techniques", 0), ("all-techniques", 7), ("t1574.001", 3), ("t1574.002", 5)])
def test_match_setup_equals_brute_force(rules, name, seed):
    p = pipeline(name, seed)
    assert len(p.store) <= 10_000
    assert _as_tuples(match_setup(p.store, rules, p.graph)) == _oracle_setup(p.store, rules, p.graph)


def test_sequence_picks_latest_chain(rules):
    store = EventStore([_schtasks(1000), _schtasks(2000), _task_file(3000), _task_file(4000)])
    got = _as_tuples(match_setup(store, rules))
    assert got == _oracle_setup(store, rules, build_graph(store))
    assert [r[3] for r in got] == [("c2000", "w3000"), ("c2000", "w4000")]


# ---------------------------------------------------------------------------
# stage 2


def _run_key_execution(parent_of_payload="explorer", gap=2000):
    explorer = proc("ex", EXPLORER)
    other = proc("oth", "C:\\Windows\\System32\\svchost.exe")
    launcher = explorer if parent_of_payload == "explorer" else other
    payload = proc("pay", "C:\\u\\hostui.exe", parent=launcher["guid"])
    shell = proc("sh", PS, parent="pay")
    evs = [
        ev("e1", 1000, "REG_READ", explorer, {"reg_key": RUN, "value_name": "upd", "value": "C:\\u\\hostui.exe"}),
        ev("e2", 1000 + gap, "PROCESS_CREATE", launcher, {"child": payload}),
        ev("e3", 1100 + gap, "PROCESS_CREATE", payload, {"child": shell}),
        ev("e4", 1200 + gap, "NET_CONNECT", shell, {"ip": "203.0.113.7", "port": 443}),
    ]
    store = EventStore(evs)
    g = build_graph(store)
    return store, g


def test_execution_needs_explorer_ancestor(rules):
    _, g = _run_key_execution()
    _, events = traverse_backward(g, "proc:sh")
    (m,) = match_execution(events, "sh", g, rules)
    assert m.label == "T1547.001" and m.captures == {"trigger": "c:\\u\\hostui.exe"} and m.anchor == "sh"
    _, g2 = _run_key_execution("other")
    _, events2 = traverse_backward(g2, "proc:sh")
    assert match_execution(events2, "sh", g2, rules) == []


def test_execution_launch_window(rules):
    _, g = _run_key_execution(gap=10_001)
    _, events = traverse_backward(g, "proc:sh")
    assert match_execution(events, "sh", g, rules) == []


def test_module_load_by_anchor(rules):
    shell = proc("sh", "C:\\app\\tool.exe")
    store = EventStore([
        ev("e1", 100, "MODULE_LOAD", shell, {"path": "C:\\app\\version.dll"}),
        ev("e2", 200, "NET_CONNECT", shell, {"ip": "203.0.113.7", "port": 443}),
    ])
    g = build_graph(store)
    _, events = traverse_backward(g, "proc:sh")
    (m,) = match_execution(events, "sh", g, rules)
    assert m.label == "T1574.001" and m.captures == {"dll": "c:\\app\\version.dll"}


def test_match_execution_accepts_precomputed_lineage(rules):
    _, g = _run_key_execution()
    _, events = traverse_backward(g, "proc:sh")
    assert match_execution(events, "sh", g, rules, lineage(g, "proc:sh")) == match_execution(events, "sh", g, rules)


def test_ruleset_helpers(rules):
    assert rules.techniques(Phase.SETUP)
    assert len(rules.without(Phase.CONTEXT).context) == 0
    with pytest.raises(RuleError):
        RuleSet([rules.setup[0], rules.setup[0]])


def test_expert_rules_bundled():
    ids = [r.id for r in bundled_expert()]
    assert "xe-sc-create-services" in ids and len(ids) == len(set(ids))
    g = apply_expert_edges(EventStore([]), build_graph(EventStore([])), list(bundled_expert()))
    assert len(g.edges) == 0
