"""Optional post-compression search over local workflow edits.

Parents are drawn from the pool of evaluated workflows with a mix of
uniform and softmax-on-score probabilities; a random applicable mutation is
applied and the child is scored. The search stops once the top-k set has
not changed for ``patience`` rounds. The result is adopted only if it
strictly beats the starting graph.
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, replace

import numpy as np

from .compressor import ACCEPTED, REJECTED, EvalContext, StepRecord
from .evaluation import DatasetInstance, EvalOutcome, Evaluator, PricingTable
from .graph import (
    GENERATOR_OPERATORS,
    Edge,
    WorkflowGraph,
    validate,
    with_node,
)

TUNE = "tune"


@dataclass(frozen=True)
class TunerConfig:
    lam: float = 0.3
    alpha: float = 0.2
    k: int = 3
    patience: int = 5
    max_rounds: int = 50
    repeats: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.k < 1 or self.repeats < 1 or self.max_rounds < 0:
            raise ValueError("k and repeats must be >= 1, max_rounds >= 0")


@dataclass(frozen=True)
class SearchCandidate:
    digest: str
    graph: WorkflowGraph
    score: float
    cost: float
    parent: str | None = None
    mutation: str | None = None
    evaluations: int = 1


def mixed_probabilities(scores: Sequence[float], lam: float, alpha: float) -> np.ndarray:
    """lam / n + (1 - lam) * softmax(alpha * (s - s_max))."""
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise ValueError("no candidates to select from")
    w = np.exp(alpha * (s - s.max()))
    return lam / s.size + (1.0 - lam) * w / w.sum()


def mixed_select(
    candidates: Sequence[SearchCandidate] | Sequence[float],
    lam: float,
    alpha: float,
    rng: np.random.Generator,
) -> int:
    scores = [c.score if isinstance(c, SearchCandidate) else float(c) for c in candidates]
    p = mixed_probabilities(scores, lam, alpha)
    return int(rng.choice(len(p), p=p))


# -- mutations -------------------------------------------------------------


@dataclass(frozen=True)
class MutationOp:
    """A local edit. ``apply`` must be pure and return a valid graph."""

    name: str
    applicable: Callable[[WorkflowGraph], bool]
    apply: Callable[[WorkflowGraph, np.random.Generator], tuple[WorkflowGraph, str]]


def _prompt_cycle_targets(graph: WorkflowGraph, variants: Mapping[str, Sequence[str]]):
    nxt = {}
    for cycle in variants.values():
        cycle = list(cycle)
        for i, ref in enumerate(cycle):
            nxt[ref] = cycle[(i + 1) % len(cycle)]
    return [v for v in graph.unprotected_ids if graph.node(v).prompt_ref in nxt], nxt


def swap_prompt_variant(variants: Mapping[str, Sequence[str]]) -> MutationOp:
    """Advance one node's ``prompt_ref`` to the next variant in its cycle."""

    def applicable(g: WorkflowGraph) -> bool:
        targets, nxt = _prompt_cycle_targets(g, variants)
        return any(nxt[g.node(v).prompt_ref] != g.node(v).prompt_ref for v in targets)

    def apply(g: WorkflowGraph, rng: np.random.Generator):
        targets, nxt = _prompt_cycle_targets(g, variants)
        targets = [v for v in targets if nxt[g.node(v).prompt_ref] != g.node(v).prompt_ref]
        v = targets[int(rng.integers(len(targets)))]
        node = g.node(v)
        return with_node(g, replace(node, prompt_ref=nxt[node.prompt_ref])), f"{v}: prompt {node.prompt_ref} -> {nxt[node.prompt_ref]}"

    return MutationOp("swap-prompt-variant", applicable, apply)


def rewire_moves(g: WorkflowGraph) -> list[tuple[Edge, Edge]]:
    """All single-endpoint edge moves that keep the graph valid."""
    existing = set(g.edges)
    moves = []
    for e in g.edges:
        for w in g.node_ids:
            for new in (Edge(e.source, w), Edge(w, e.target)):
                if new == e or new in existing or new.source == new.target:
                    continue
                if rewire_ok(g, e, new):
                    moves.append((e, new))
    return sorted(set(moves))


def rewire_ok(g: WorkflowGraph, old: Edge, new: Edge) -> bool:
    """Would replacing ``old`` by ``new`` keep every graph invariant (incl. acyclicity)?"""
    if new.source == new.target or new in set(g.edges):
        return False
    trial = replace(g, edges=tuple(e for e in g.edges if e != old) + (new,))
    return validate(trial).ok


def rewire_edge() -> MutationOp:
    def applicable(g: WorkflowGraph) -> bool:
        return bool(rewire_moves(g))

    def apply(g: WorkflowGraph, rng: np.random.Generator):
        moves = rewire_moves(g)
        old, new = moves[int(rng.integers(len(moves)))]
        graph = replace(g, edges=tuple(e for e in g.edges if e != old) + (new,))
        return graph, f"rewire {old.source}->{old.target} to {new.source}->{new.target}"

    return MutationOp("rewire-edge", applicable, apply)


def toggle_model_tier(surrogates: Mapping[str, str]) -> MutationOp:
    """Flip one unprotected node between a model and its surrogate."""
    flip = dict(surrogates)
    flip.update({lo: hi for hi, lo in surrogates.items()})

    def targets(g: WorkflowGraph) -> list[str]:
        return [v for v in g.unprotected_ids if g.node(v).model in flip]

    def apply(g: WorkflowGraph, rng: np.random.Generator):
        ts = targets(g)
        v = ts[int(rng.integers(len(ts)))]
        node = g.node(v)
        return with_node(g, replace(node, model=flip[node.model])), f"{v}: model {node.model} -> {flip[node.model]}"

    return MutationOp("toggle-model-tier", lambda g: bool(targets(g)), apply)


def _ensemble_targets(g: WorkflowGraph) -> list[tuple[str, str]]:
    out = []
    for v in g.unprotected_ids:
        if g.node(v).operator not in GENERATOR_OPERATORS:
            continue
        for t in g.successors(v):
            if g.node(t).operator == "ScEnsemble":
                out.append((v, t))
    return out


def duplicate_then_ensemble() -> MutationOp:
    """Clone a generator feeding an ensemble node and route the clone into it."""

    def apply(g: WorkflowGraph, rng: np.random.Generator):
        pairs = _ensemble_targets(g)
        v, ens = pairs[int(rng.integers(len(pairs)))]
        node = g.node(v)
        new_id = next(f"{v}_dup{i}" for i in itertools.count(1) if f"{v}_dup{i}" not in g)
        clone = replace(node, id=new_id, protected=False)
        edges = list(g.edges) + [Edge(p, new_id) for p in g.predecessors(v)] + [Edge(new_id, ens)]
        graph = replace(g, nodes=g.nodes + (clone,), edges=tuple(edges))
        return graph, f"duplicate {v} as {new_id} into {ens}"

    return MutationOp("duplicate-then-ensemble", lambda g: bool(_ensemble_targets(g)), apply)


def builtin_mutations(
    prompt_variants: Mapping[str, Sequence[str]] | None = None,
    surrogates: Mapping[str, str] | None = None,
) -> list[MutationOp]:
    return [
        swap_prompt_variant(prompt_variants or {}),
        rewire_edge(),
        toggle_model_tier(surrogates or {}),
        duplicate_then_ensemble(),
    ]


# -- search ----------------------------------------------------------------


@dataclass
class TuneResult:
    graph: WorkflowGraph
    outcome: EvalOutcome
    records: list[StepRecord]
    candidates: list[SearchCandidate]
    rounds: int
    adopted: bool


def _rank_key(c: SearchCandidate):
    return (-c.score, c.cost, c.digest)


def _top_k(cands: Sequence[SearchCandidate], k: int) -> frozenset[str]:
    return frozenset(c.digest for c in sorted(cands, key=_rank_key)[:k])


def tune(
    start: WorkflowGraph,
    cfg: TunerConfig,
    mutations: Sequence[MutationOp],
    evaluator: Evaluator,
    pricing: PricingTable,
    instances: Sequence[DatasetInstance] | None = None,
    ctx: EvalContext | None = None,
    on_record: Callable[[StepRecord], None] | None = None,
) -> TuneResult:
    if ctx is None:
        if instances is None:
            raise ValueError("either instances or ctx is required")
        ctx = EvalContext(evaluator, pricing, instances)
    ctx.stage = TUNE
    rng = np.random.default_rng(cfg.seed)
    records: list[StepRecord] = []

    def emit(r: StepRecord) -> None:
        records.append(r)
        if on_record:
            on_record(r)

    def score(g: WorkflowGraph) -> tuple[float, float]:
        outs = [ctx.accept(g, fresh=i > 0) for i in range(cfg.repeats)]
        return (
            math.fsum(o.avg_score for o in outs) / len(outs),
            math.fsum(o.avg_cost_usd for o in outs) / len(outs),
        )

    s0, c0 = score(start)
    root = SearchCandidate(start.digest(), start, s0, c0, evaluations=cfg.repeats)
    pool = [root]
    seen = {root.digest}
    top = _top_k(pool, cfg.k)
    stable = 0
    rounds = 0

    while rounds < cfg.max_rounds:
        rounds += 1
        parent = pool[mixed_select(pool, cfg.lam, cfg.alpha, rng)]
        ops = [m for m in mutations if m.applicable(parent.graph)]
        if ops:
            op = ops[int(rng.integers(len(ops)))]
            child, detail = op.apply(parent.graph, rng)
            d = child.digest()
            s, c = score(child)
            if d not in seen:
                seen.add(d)
                pool.append(SearchCandidate(d, child, s, c, parent.digest, f"{op.name}: {detail}", cfg.repeats))
            emit(
                StepRecord(
                    stage=TUNE, iteration=rounds, candidate=op.name, action=detail,
                    score_before=parent.score, cost_before=parent.cost,
                    score_after=s, cost_after=c, threshold=s0, verdict=REJECTED,
                    before_digest=parent.digest, after_digest=d,
                )
            )
        new_top = _top_k(pool, cfg.k)
        stable = stable + 1 if new_top == top else 0
        top = new_top
        if stable >= cfg.patience:
            break

    best = min(pool, key=_rank_key)
    adopted = best.score > s0
    final = best if adopted else root
    if adopted:
        emit(
            StepRecord(
                stage=TUNE, iteration=rounds, candidate="adopt", action=best.mutation or "",
                score_before=s0, cost_before=c0, score_after=best.score, cost_after=best.cost,
                threshold=s0, verdict=ACCEPTED, before_digest=root.digest, after_digest=best.digest,
            )
        )
    return TuneResult(
        graph=final.graph,
        outcome=ctx.pool.get(final.digest).outcome,
        records=records,
        candidates=pool,
        rounds=rounds,
        adopted=adopted,
    )
