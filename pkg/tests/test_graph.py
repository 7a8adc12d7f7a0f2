from __future__ import annotations

import itertools
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import HIGH, LOW, random_workflow, reach_pairs

from slimflow.graph import (
    CyclicGraphError,
    Edge,
    GraphError,
    InvalidGraphError,
    Node,
    ProtectedNodeError,
    SchemaError,
    UnknownNodeError,
    WorkflowGraph,
    build,
    deserialize,
    dumps,
    load,
    loads,
    remove_node_with_patch,
    serialize,
    substitute_model,
    topo_order,
    validate,
)
from slimflow.config import demo_config_path

DEMO = demo_config_path().parent


def chain(*ids: str) -> WorkflowGraph:
    nodes = [Node(ids[0], "Input", HIGH)]
    nodes += [Node(v, "Custom", HIGH) for v in ids[1:-1]]
    nodes.append(Node(ids[-1], "AnswerFormat", HIGH, dataset="demo"))
    return build(nodes, list(zip(ids, ids[1:])), [ids[0]], ids[-1])


def custom(edges, entry="a", final="z", extra=()):
    ids = sorted({x for e in edges for x in e} | set(extra))
    return build([Node(v, "Custom", HIGH) for v in ids], edges, [entry], final)


@pytest.fixture
def minimal() -> WorkflowGraph:
    return load(DEMO / "minimal.json")


class TestValidate:
    def test_minimal_chain_ok(self, minimal):
        rep = validate(minimal)
        assert rep.ok and not rep.violations
        assert [n.id for n in minimal.nodes] == ["Formatter", "Input", "Reasoner"]

    def test_self_loop(self):
        g = custom([("a", "b"), ("b", "z"), ("b", "b")])
        assert "self-loop at b" in validate(g).violations

    def test_final_unreachable(self):
        g = custom([("a", "b"), ("c", "z")])
        rep = validate(g)
        assert any("final node z unreachable" in v for v in rep.violations)

    def test_cycle_reported(self):
        g = custom([("a", "b"), ("b", "c"), ("c", "b"), ("c", "z")])
        rep = validate(g)
        assert any(v.startswith("cycle") for v in rep.violations)

    def test_duplicate_edge_and_unknown_endpoint(self):
        g = WorkflowGraph(
            (Node("a", "Input", HIGH, protected=True), Node("z", "Custom", HIGH, protected=True)),
            (Edge("a", "z"), Edge("a", "z"), Edge("a", "q")),
            ("a",),
            "z",
        )
        rep = validate(g)
        assert "duplicate edge a->z" in rep.violations
        assert any("unknown node q" in v for v in rep.violations)

    def test_anchor_must_be_protected(self):
        g = WorkflowGraph((Node("a", "Input", HIGH), Node("z", "Custom", HIGH)), (Edge("a", "z"),), ("a",), "z")
        assert len(validate(g).violations) == 2

    def test_operator_rules(self):
        g = build(
            [Node("a", "Input", HIGH, prompt_ref="p"), Node("z", "AnswerFormat", HIGH)],
            [("a", "z")], ["a"], "z",
        )
        rep = validate(g)
        assert any("input node a" in v for v in rep.violations)
        assert any("answer-format node z" in v for v in rep.violations)

    def test_unpriced_model(self, minimal):
        assert any("not priced" in v for v in validate(minimal, pricing={LOW: None}).violations)

    def test_dangling_unprotected_node_is_warning(self):
        g = custom([("a", "z"), ("a", "b")])
        rep = validate(g)
        assert rep.ok
        assert rep.warnings == ("unprotected node b has no successors",)


class TestSurgery:
    def test_chain(self):
        g = chain("a", "v", "b")
        out = remove_node_with_patch(g, "v")
        assert out.node_ids == ["a", "b"]
        assert out.edges == (Edge("a", "b"),)

    def test_diamond_no_duplicate(self):
        g = custom([("a", "v"), ("a", "z"), ("v", "z")], final="z")
        out = remove_node_with_patch(g, "v")
        assert out.edges == (Edge("a", "z"),)

    def test_fan_in_fan_out(self):
        edges = [("s", "a"), ("s", "c"), ("a", "v"), ("c", "v"), ("v", "b"), ("v", "d"), ("b", "z"), ("d", "z")]
        g = custom(edges, entry="s")
        out = remove_node_with_patch(g, "v")
        added = set(out.edges) - set(g.edges)
        expected = {Edge(p, q) for p, q in itertools.product(g.predecessors("v"), g.successors("v"))}
        assert added == expected == {Edge("a", "b"), Edge("a", "d"), Edge("c", "b"), Edge("c", "d")}
        assert validate(out).ok

    def test_errors(self, minimal):
        with pytest.raises(UnknownNodeError):
            remove_node_with_patch(minimal, "nope")
        with pytest.raises(ProtectedNodeError):
            remove_node_with_patch(minimal, "Input")
        with pytest.raises(ProtectedNodeError):
            substitute_model(minimal, "Formatter", LOW)

    def test_source_or_sink_node_is_noop_patch(self):
        g = custom([("a", "z"), ("a", "b")])
        out = remove_node_with_patch(g, "b")
        assert out.edges == (Edge("a", "z"),)


class TestSubstitution:
    def test_changes_only_binding(self, minimal):
        out = substitute_model(minimal, "Reasoner", LOW)
        assert out.edges == minimal.edges
        diff = [(a, b) for a, b in zip(minimal.nodes, out.nodes) if a != b]
        assert len(diff) == 1 and diff[0][1].model == LOW

    def test_identity(self, minimal):
        assert substitute_model(minimal, "Reasoner", HIGH) == minimal

    def test_unpriced_surrogate(self, minimal):
        with pytest.raises(GraphError):
            substitute_model(minimal, "Reasoner", "mystery", pricing={HIGH: 1})

    def test_commutes_with_surgery(self):
        rng = random.Random(5)
        for _ in range(20):
            g = random_workflow(rng, 3)
            a, b = rng.sample([v for v in g.node_ids if v.startswith("v")], 2)
            one = remove_node_with_patch(substitute_model(g, a, LOW), b)
            two = substitute_model(remove_node_with_patch(g, b), a, LOW)
            assert one == two and dumps(one) == dumps(two)


class TestTopo:
    def test_chain(self):
        assert topo_order(chain("a", "b", "c")) == ["a", "b", "c"]

    def test_branch_heads_by_id(self):
        g = custom([("a", "y"), ("a", "x"), ("x", "z"), ("y", "z")])
        assert topo_order(g) == ["a", "x", "y", "z"]

    def test_random_edges_point_forward(self):
        rng = random.Random(0)
        for _ in range(30):
            g = random_workflow(rng, 6)
            pos = {v: i for i, v in enumerate(topo_order(g))}
            assert all(pos[e.source] < pos[e.target] for e in g.edges)

    def test_cycle_raises(self):
        with pytest.raises(CyclicGraphError):
            topo_order(custom([("a", "b"), ("b", "a"), ("b", "z")]))


class TestSerialization:
    def test_minimal_round_trip_byte_identical(self, minimal):
        text = dumps(minimal)
        assert loads(text) == minimal
        assert dumps(loads(text)) == text

    def test_case_study_graph(self):
        g = load(DEMO / "workflow.json")
        assert {"Programmer", "RefineWithCode", "DetailedSolution", "GenerateSolutionA", "GenerateSolutionB", "ScEnsembler", "AnswerFormatter"} <= set(g.node_ids)
        assert [g.node(v).operator for v in ("GenerateSolutionA", "GenerateSolutionB")] == ["AnswerGenerate"] * 2
        assert deserialize(serialize(g)) == g
        assert dumps(deserialize(json.loads(dumps(g)))) == dumps(g)

    def test_missing_final_id(self, minimal):
        doc = serialize(minimal)
        del doc["final_id"]
        with pytest.raises(SchemaError) as info:
            deserialize(doc)
        assert info.value.field == "final_id"
        assert "final_id" in str(info.value)

    def test_malformed(self):
        with pytest.raises(SchemaError):
            loads("{not json")
        with pytest.raises(SchemaError):
            loads("[]")

    def test_invalid_graph_rejected(self, minimal):
        doc = serialize(minimal)
        doc["edges"].append({"source": "Formatter", "target": "Input"})
        with pytest.raises(InvalidGraphError) as info:
            deserialize(doc)
        assert any("cycle" in v for v in info.value.violations)

    def test_node_and_edge_order_canonical(self, minimal):
        doc = serialize(minimal)
        doc["nodes"].reverse()
        doc["edges"].reverse()
        assert dumps(deserialize(doc)) == dumps(minimal)
        assert deserialize(doc).digest() == minimal.digest()


@st.composite
def workflows(draw):
    seed = draw(st.integers(0, 10**6))
    n = draw(st.integers(1, 7))
    p = draw(st.floats(0.1, 0.8))
    return random_workflow(random.Random(seed), n, p)


@settings(max_examples=150, deadline=None)
@given(workflows(), st.data())
def test_surgery_closure_reachability_purity(g, data):
    victim = data.draw(st.sampled_from(g.unprotected_ids))
    before = dumps(g)
    out = remove_node_with_patch(g, victim)
    assert dumps(g) == before  # purity
    assert validate(out).ok
    kept = {(s, t) for s, t in reach_pairs(g) if victim not in (s, t)}
    assert kept == reach_pairs(out)
    assert len(out) == len(g) - 1
