from __future__ import annotations

import itertools
import random

import pytest
from oracles import HIGH, LOW, PRICING, SURROGATES, additive_task, closed_form, exhaustive_optimum, isclose

from slimflow.compressor import (
    ACCEPTED,
    QUANTIZE_FIRST,
    REJECTED,
    ROLLED_BACK,
    CandidatePool,
    EvalContext,
    StageAborted,
    StageConfig,
    check_surrogates,
    meets_threshold,
    prune_stage,
    quant_stage,
    run_pipeline,
)
from slimflow.evaluation import (
    EvalOutcome,
    InstanceResult,
    SyntheticEvaluator,
    SyntheticTaskSpec,
    synthetic_dataset,
    synthetic_evaluate,
)
from slimflow.importance import FusionConfig
from slimflow.graph import Node, build, substitute_model

DS = synthetic_dataset(6)
CFG = StageConfig(probe_size=6)


def fan(inner: dict[str, str], chain: bool = False):
    """in -> each inner node -> out (or a chain through them)."""
    ids = list(inner)
    nodes = [Node("in", "Input", HIGH), Node("out", "AnswerFormat", HIGH, dataset="d")]
    nodes += [Node(v, op, HIGH) for v, op in inner.items()]
    if chain:
        seq = ["in", *ids, "out"]
        edges = list(zip(seq, seq[1:]))
    else:
        edges = [("in", v) for v in ids] + [(v, "out") for v in ids]
    return build(nodes, edges, ["in"], "out")


def ev(**kw):
    kw.setdefault("low_tier_models", frozenset({LOW}))
    return SyntheticEvaluator(SyntheticTaskSpec(**kw))


def test_threshold_arithmetic():
    assert meets_threshold(0.93, 0.95, 0.95)
    assert not meets_threshold(0.90, 0.95, 0.95)
    assert meets_threshold(0.9025, 0.95, 0.95)


def test_threshold_in_stage():
    g = fan({"a": "Custom", "b": "Custom"})
    res = prune_stage(g, CFG, ev(contributions={"out": 0.88, "a": 0.02, "b": 0.05}), PRICING, DS)
    first, second = res.records
    assert res.baseline.avg_score == pytest.approx(0.95)
    assert (first.candidate, first.verdict) == ("a", ACCEPTED)
    assert first.score_after == pytest.approx(0.93) and first.threshold == pytest.approx(0.9025)
    assert (second.candidate, second.verdict) == ("b", ROLLED_BACK)
    assert second.score_after == pytest.approx(0.88)
    assert res.graph.node_ids == ["b", "in", "out"]


def test_zero_contribution_pruned_first():
    g = fan({"a": "Custom", "b": "Custom", "c": "Custom"}, chain=True)
    spec = dict(contributions={"out": 0.4, "a": 0.2, "b": 0.0, "c": 0.2}, tokens={v: (100, 100) for v in "abc"})
    res = prune_stage(g, CFG, ev(**spec), PRICING, DS)
    assert res.records[0].candidate == "b" and res.records[0].verdict == ACCEPTED
    assert res.records[0].action == "remove b; patch [a->c]"
    assert res.records[0].signals.delta_score == 0
    assert res.graph.node_ids == ["a", "c", "in", "out"]
    assert len(res.records) > 1  # stage carried on after the acceptance


def test_adversarial_rolls_back():
    inner = {f"v{i}": "Custom" for i in range(5)}
    g = fan(inner)
    res = prune_stage(g, CFG, ev(contributions={v: 0.2 for v in inner}), PRICING, DS)
    assert res.graph == g
    assert res.acceptance_evals <= CFG.k + 1
    assert len(res.records) == CFG.k
    assert all(r.verdict == ROLLED_BACK for r in res.records)


def test_rejected_then_accepted_in_one_round():
    # d is expensive and peripheral enough to lead the ranking but is load-bearing
    g = fan({"a": "Custom", "c": "Custom", "d": "Custom"})
    spec = dict(
        contributions={"out": 0.5, "a": 0.0, "c": 0.0, "d": 0.3},
        tokens={"d": (5000, 5000), "a": (10, 10), "c": (20, 20)},
    )
    res = prune_stage(g, StageConfig(probe_size=6, fusion=FusionConfig(w_shap=0.5)), ev(**spec), PRICING, DS)
    first_round = [(r.candidate, r.verdict) for r in res.records if r.iteration == 0]
    assert first_round == [("d", REJECTED), ("c", ACCEPTED)]
    assert "d" in res.graph


class TestQuantize:
    def test_penalty_rules(self):
        g = fan({"free": "Custom", "lossy": "Custom"})
        spec = dict(contributions={"out": 0.8}, quant_penalty={"free": 0.0, "lossy": 0.2}, tokens={"free": (100, 100), "lossy": (100, 100)})
        res = quant_stage(g, CFG, SURROGATES, ev(**spec), PRICING, DS)
        assert res.graph.node("free").model == LOW
        assert res.graph.node("lossy").model == HIGH
        assert [r.verdict for r in res.records] == [ACCEPTED, ROLLED_BACK]
        assert res.records[0].action == f"substitute free: {HIGH} -> {LOW}"
        assert res.graph.edges == g.edges and len(res.graph) == len(g)

    def test_all_low_tier(self):
        g = fan({"a": "Custom"})
        g = substitute_model(g, "a", LOW)
        res = quant_stage(g, CFG, SURROGATES, ev(), PRICING, DS)
        assert res.records == [] and res.graph == g

    def test_surrogate_checks(self):
        with pytest.raises(ValueError, match="chain"):
            check_surrogates({"a": "b", "b": "c"})
        with pytest.raises(ValueError, match="not priced"):
            check_surrogates({HIGH: "ghost"}, PRICING)
        with pytest.raises(ValueError):
            quant_stage(fan({"a": "Custom"}), CFG, {HIGH: HIGH}, ev(), PRICING, DS)

    def test_mixed_matches_subset_enumeration(self):
        inner = {f"v{i}": "Custom" for i in range(5)}
        g = fan(inner)
        pen = {"v0": 0.0, "v1": 0.0, "v2": 0.3, "v3": 0.0, "v4": 0.0}
        g = substitute_model(substitute_model(g, "v3", LOW), "v4", LOW)  # already low tier
        spec = SyntheticTaskSpec(
            contributions={"out": 0.9}, quant_penalty=pen, tokens={v: (200, 300) for v in inner}, low_tier_models=frozenset({LOW})
        )
        res = quant_stage(g, CFG, SURROGATES, SyntheticEvaluator(spec), PRICING, DS)
        quantized = {r.candidate for r in res.records if r.verdict == ACCEPTED}
        rejected = {r.candidate for r in res.records if r.verdict != ACCEPTED}
        assert (quantized, rejected) == ({"v0", "v1"}, {"v2"})
        # brute force: the largest feasible substitution set among the candidates
        cands = ["v0", "v1", "v2"]
        present = set(g.node_ids)
        s0, _ = closed_form(spec, present, {"v3", "v4"})
        feasible = [
            set(q) for r in range(4) for q in itertools.combinations(cands, r)
            if closed_form(spec, present, set(q) | {"v3", "v4"})[0] >= 0.95 * s0
        ]
        assert max(feasible, key=len) == quantized


def test_quant_stage_matches_enumeration_random():
    rng = random.Random(12)
    for _ in range(30):
        g, spec = additive_task(rng, rng.randint(1, 5), max_load_bearing=2)
        res = quant_stage(g, CFG, SURROGATES, SyntheticEvaluator(spec), PRICING, DS)
        cands = g.unprotected_ids
        present = set(g.node_ids)
        s0, _ = closed_form(spec, present, set())
        best = min(
            (closed_form(spec, present, set(q)) for r in range(len(cands) + 1) for q in itertools.combinations(cands, r)
             if closed_form(spec, present, set(q))[0] >= 0.95 * s0),
            key=lambda sc: (-sc[0], sc[1]),
        )
        assert isclose(res.outcome.avg_score, best[0]) and isclose(res.outcome.avg_cost_usd, best[1])


def test_rollback_soundness_and_chain():
    rng = random.Random(2)
    for _ in range(20):
        g, spec = additive_task(rng, rng.randint(2, 6))
        spec = SyntheticTaskSpec(spec.contributions, spec.tokens, (), spec.quant_penalty, spec.low_tier_models, noise=0.03, seed=1)
        res = prune_stage(g, CFG, SyntheticEvaluator(spec), PRICING, DS)
        accepted = [r for r in res.records if r.verdict == ACCEPTED]
        assert res.graph.digest() == (accepted[-1].after_digest if accepted else g.digest())
        state = g.digest()
        for r in res.records:
            assert r.before_digest == state
            if r.verdict == ACCEPTED:
                assert r.score_after >= r.threshold
                state = r.after_digest
        assert len(res.graph) == len(g) - len(accepted)


def test_max_iterations():
    g = fan({"a": "Custom", "b": "Custom", "c": "Custom"})
    res = prune_stage(g, StageConfig(max_iterations=1, probe_size=6), ev(contributions={"out": 0.5}), PRICING, DS)
    assert len(res.graph) == len(g) - 1
    assert [r.verdict for r in res.records] == [ACCEPTED]


def test_config_validation():
    for bad in (dict(tau=1.0), dict(tau=0), dict(k=0), dict(max_iterations=-1)):
        with pytest.raises(ValueError):
            StageConfig(**bad)


def test_hard_failure_aborts_with_partial_records():
    g = fan({"a": "Custom", "b": "Custom"})
    calls = {"n": 0}
    spec = SyntheticTaskSpec(contributions={"out": 0.5})

    def dying(graph, inst):
        calls["n"] += 1
        if len(graph) < 4 and "a" not in graph:
            raise RuntimeError("endpoint exploded")
        return synthetic_evaluate(graph, inst, spec)

    with pytest.raises(StageAborted) as info:
        prune_stage(g, CFG, dying, PRICING, DS)
    assert info.value.stage == "prune"
    assert isinstance(info.value.cause, RuntimeError)


def test_pool_and_budget():
    pool = CandidatePool()
    g = fan({"a": "Custom"})
    g2 = substitute_model(g, "a", LOW)
    pool.add(g, EvalOutcome(0.9, 2e-3), "base")
    pool.add(g2, EvalOutcome(0.85, 1e-3), "quantize")
    pool.add(g2, EvalOutcome(0.1, 9.0), "ignored")  # same digest keeps the first entry
    assert len(pool) == 2
    assert pool.best()[0].graph == g
    assert pool.best(1.5e-3)[0].graph == g2
    entry, warning = pool.best(1e-6)
    assert entry.graph == g2 and "budget" in warning
    with pytest.raises(ValueError):
        CandidatePool().best()


def test_pipeline_budget_fallback_warns():
    g = fan({"a": "Custom", "b": "Custom"})
    spec = dict(contributions={"out": 0.5, "a": 0.3, "b": 0.2}, tokens={"a": (100, 100), "b": (100, 100), "out": (10, 10)})
    res = run_pipeline(g, DS, ev(**spec), PRICING, SURROGATES, CFG, CFG, budget=1e-9)
    assert res.budget_violated and res.warnings
    assert res.outcome.avg_cost_usd == min(e.outcome.avg_cost_usd for e in res.pool)


def test_pipeline_returns_stage_two_output():
    g = fan({"a": "Custom", "b": "Custom", "c": "Custom"})
    spec = dict(contributions={"out": 0.5, "a": 0.3}, tokens={v: (100, 100) for v in "abc"}, quant_penalty={"a": 0.0})
    res = run_pipeline(g, DS, ev(**spec), PRICING, SURROGATES, CFG, CFG)
    assert res.graph.digest() == res.stage_outputs["quantize"][0]
    assert res.graph.node_ids == ["a", "in", "out"] and res.graph.node("a").model == LOW
    assert g.digest() in res.pool
    assert res.acceptance_evals["base"] == 1
    assert set(res.evaluator_calls) == {"base", "prune", "quantize"}


def test_pipeline_quantize_first_and_determinism():
    rng = random.Random(21)
    g, spec = additive_task(rng, 5)
    spec = SyntheticTaskSpec(spec.contributions, spec.tokens, (), spec.quant_penalty, spec.low_tier_models, noise=0.02, seed=3)
    logs = []
    for _ in range(2):
        seen = []
        run_pipeline(g, DS, SyntheticEvaluator(spec), PRICING, SURROGATES, CFG, CFG, order=QUANTIZE_FIRST, on_record=lambda r: seen.append(r.to_dict()))
        logs.append(seen)
    assert logs[0] == logs[1]
    stages = [r["stage"] for r in logs[0]]
    assert stages == sorted(stages, key=lambda s: s != "quantize")


def test_pipeline_rejects_unpriced_before_evaluating():
    g = fan({"a": "Custom"})
    g = substitute_model(g, "a", "ghost-model")
    calls = []
    with pytest.raises(Exception, match="ghost-model"):
        run_pipeline(g, DS, lambda gr, i: calls.append(1) or InstanceResult(1.0), PRICING, SURROGATES)
    assert calls == []


def test_eval_context_cache_and_counts():
    g = fan({"a": "Custom"})
    ctx = EvalContext(ev(contributions={"out": 0.5}), PRICING, DS.instances)
    ctx.stage = "x"
    ctx.accept(g)
    ctx.accept(g)
    ctx.probe(g)
    assert ctx.evaluator_calls == {"x": 1} and ctx.acceptance_evals == {"x": 2}
    ctx.accept(g, fresh=True)
    assert ctx.evaluator_calls == {"x": 2}


def test_topk_width_limits_greedy():
    """Three load-bearing nodes that look more prunable than a free one fill
    the whole top-3 window, so the free node is never tried. This is the
    greedy's known blind spot; widening k recovers the optimum."""
    heavy = ["h1", "h2", "h3"]
    nodes = [Node("in", "Input", HIGH), Node("f", "Custom", HIGH), Node("out", "AnswerFormat", HIGH, dataset="d")]
    nodes += [Node(h, "Custom", HIGH) for h in heavy]
    edges = [("in", "f")] + [("f", h) for h in heavy] + [(h, "out") for h in heavy]
    g = build(nodes, edges, ["in"], "out")
    spec = SyntheticTaskSpec(
        contributions={"out": 0.5, **{h: 0.1 for h in heavy}},
        tokens={"f": (10, 10), **{h: (1000, 1000) for h in heavy}},
        quant_penalty={"f": 0.2, **{h: 0.2 for h in heavy}},
        low_tier_models=frozenset({LOW}),
    )
    narrow = run_pipeline(g, DS, SyntheticEvaluator(spec), PRICING, SURROGATES, CFG, CFG)
    oracle = exhaustive_optimum(g, spec, 0.95, 0.95)
    assert (oracle.pruned, oracle.quantized) == ({"f"}, set())
    assert narrow.graph == g and narrow.outcome.avg_cost_usd > oracle.cost
    wide_cfg = StageConfig(k=4, probe_size=6)
    wide = run_pipeline(g, DS, SyntheticEvaluator(spec), PRICING, SURROGATES, wide_cfg, wide_cfg)
    assert isclose(wide.outcome.avg_cost_usd, oracle.cost) and isclose(wide.outcome.avg_score, oracle.score)
