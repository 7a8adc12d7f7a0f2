"""Greedy prune and quantize stages with baseline-anchored acceptance.

Each stage repeats: measure signals for every candidate on the probe slice,
fuse their ranks, then try the top-k candidates in fused order on the
acceptance slice. The first candidate scoring at least ``tau`` times the
stage baseline is kept and the loop restarts from the new graph. If none
of the k is kept, the stage rolls back to its last accepted graph and ends.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from typing import Any

from .evaluation import (
    DEFAULT_PROBE_SIZE,
    Dataset,
    DatasetInstance,
    EvalOutcome,
    Evaluator,
    PricingError,
    PricingTable,
    evaluate,
    instances_for,
    sample_probe,
)
from .graph import WorkflowGraph
from .importance import PRUNE, QUANTIZE, FusionConfig, SignalSet, compute_signals, make_variant, rank_and_fuse

logger = logging.getLogger(__name__)

ACCEPTED = "accepted"
REJECTED = "rejected"
ROLLED_BACK = "rolled_back"

PRUNE_FIRST = "prune-first"
QUANTIZE_FIRST = "quantize-first"


@dataclass(frozen=True)
class StageConfig:
    tau: float = 0.95
    k: int = 3
    max_iterations: int | None = None  # accepted operations; None means |V|
    fusion: FusionConfig = field(default_factory=FusionConfig)
    probe_size: int = DEFAULT_PROBE_SIZE
    acceptance_size: int | None = None  # None: reuse the probe slice
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_iterations is not None and self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")


def check_surrogates(surrogates: Mapping[str, str], pricing: Mapping[str, Any] | None = None) -> None:
    """Reject chained maps (a surrogate that itself has a surrogate) and unpriced targets."""
    for src, dst in surrogates.items():
        if dst in surrogates:
            raise ValueError(f"surrogate chain {src} -> {dst} -> {surrogates[dst]}")
        if src == dst:
            raise ValueError(f"model {src} maps to itself")
        if pricing is not None and dst not in pricing:
            raise ValueError(f"surrogate {dst} is not priced")


def meets_threshold(score: float, tau: float, baseline: float) -> bool:
    return score >= tau * baseline


@dataclass(frozen=True)
class StepRecord:
    stage: str
    iteration: int
    candidate: str
    action: str
    score_before: float
    cost_before: float
    score_after: float
    cost_after: float
    threshold: float
    verdict: str
    before_digest: str
    after_digest: str
    signals: SignalSet | None = None
    ranks: Mapping[str, int] | None = None
    fused: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage": self.stage,
            "iteration": self.iteration,
            "candidate": self.candidate,
            "action": self.action,
            "signals": self.signals.to_dict() if self.signals else None,
            "ranks": dict(self.ranks) if self.ranks else None,
            "fused": self.fused,
            "score_before": self.score_before,
            "cost_before": repr(self.cost_before),
            "score_after": self.score_after,
            "cost_after": repr(self.cost_after),
            "threshold": self.threshold,
            "verdict": self.verdict,
            "before_digest": self.before_digest,
            "after_digest": self.after_digest,
        }


@dataclass(frozen=True)
class PoolEntry:
    digest: str
    graph: WorkflowGraph
    outcome: EvalOutcome
    stage: str


class CandidatePool:
    """Every workflow scored on the acceptance slice, keyed by digest."""

    def __init__(self) -> None:
        self._entries: dict[str, PoolEntry] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, digest: object) -> bool:
        return digest in self._entries

    def __iter__(self):
        return iter(self._entries.values())

    def get(self, digest: str) -> PoolEntry | None:
        return self._entries.get(digest)

    def add(self, graph: WorkflowGraph, outcome: EvalOutcome, stage: str) -> PoolEntry:
        d = graph.digest()
        if d not in self._entries:
            self._entries[d] = PoolEntry(d, graph, outcome, stage)
        return self._entries[d]

    def best(self, budget: float | None = None) -> tuple[PoolEntry, str | None]:
        """Highest score, then lowest cost, among members within ``budget``.

        If nothing fits the budget, the cheapest member is returned along
        with a warning message.
        """
        if not self._entries:
            raise ValueError("candidate pool is empty")
        members = list(self._entries.values())
        feasible = [e for e in members if budget is None or e.outcome.avg_cost_usd <= budget]
        if feasible:
            return min(feasible, key=lambda e: (-e.outcome.avg_score, e.outcome.avg_cost_usd, e.digest)), None
        cheapest = min(members, key=lambda e: (e.outcome.avg_cost_usd, -e.outcome.avg_score, e.digest))
        msg = (
            f"no candidate meets budget {budget!r}; returning cheapest "
            f"(cost {cheapest.outcome.avg_cost_usd!r})"
        )
        return cheapest, msg


class EvalContext:
    """Shared evaluation state for one pipeline run.

    Caches outcomes by (graph digest, slice), feeds the candidate pool and
    counts evaluator invocations and acceptance evaluations per stage.
    """

    def __init__(
        self,
        evaluator: Evaluator,
        pricing: PricingTable,
        probe: Sequence[DatasetInstance],
        acceptance: Sequence[DatasetInstance] | None = None,
        pool: CandidatePool | None = None,
        max_workers: int | None = None,
    ):
        self.evaluator = evaluator
        self.pricing = pricing
        self.probe_instances = list(probe)
        self.acceptance_instances = list(acceptance) if acceptance is not None else list(probe)
        same = [x.id for x in self.probe_instances] == [x.id for x in self.acceptance_instances]
        self._probe_key = "acceptance" if same else "probe"
        self.pool = pool if pool is not None else CandidatePool()
        self.max_workers = max_workers
        self._cache: dict[tuple[str, str], EvalOutcome] = {}
        self.evaluator_calls: dict[str, int] = {}
        self.acceptance_evals: dict[str, int] = {}
        self.spend_usd = 0.0  # model spend of all evaluations actually run
        self.stage = "setup"

    def _run(self, graph: WorkflowGraph, key: str, instances, fresh: bool = False) -> EvalOutcome:
        ck = (graph.digest(), key)
        out = None if fresh else self._cache.get(ck)
        if out is None:
            out = evaluate(graph, instances, self.evaluator, self.pricing, self.max_workers)
            self._cache.setdefault(ck, out)
            self.spend_usd += out.avg_cost_usd * len(instances)
            self.evaluator_calls[self.stage] = self.evaluator_calls.get(self.stage, 0) + 1
        return out

    def probe(self, graph: WorkflowGraph) -> EvalOutcome:
        return self._run(graph, self._probe_key, self.probe_instances)

    def accept(self, graph: WorkflowGraph, fresh: bool = False) -> EvalOutcome:
        """Score on the acceptance slice; counted and pooled.

        ``fresh`` skips the cache (repeated evaluations of noisy evaluators).
        """
        out = self._run(graph, "acceptance", self.acceptance_instances, fresh)
        self.acceptance_evals[self.stage] = self.acceptance_evals.get(self.stage, 0) + 1
        self.pool.add(graph, out, self.stage)
        return out


@dataclass
class StageResult:
    graph: WorkflowGraph
    outcome: EvalOutcome
    baseline: EvalOutcome
    records: list[StepRecord]
    acceptance_evals: int
    evaluator_calls: int


class StageAborted(Exception):
    """An evaluator hard failure stopped a stage; partial records are attached."""

    def __init__(self, stage: str, records: list[StepRecord], cause: BaseException):
        super().__init__(f"{stage} stage aborted: {cause}")
        self.stage = stage
        self.records = records
        self.cause = cause


def _action(mode: str, graph: WorkflowGraph, v: str, trial: WorkflowGraph) -> str:
    if mode == PRUNE:
        before = {(e.source, e.target) for e in graph.edges}
        added = sorted(f"{e.source}->{e.target}" for e in trial.edges if (e.source, e.target) not in before)
        return f"remove {v}; patch [{', '.join(added)}]"
    return f"substitute {v}: {graph.node(v).model} -> {trial.node(v).model}"


def _greedy_stage(
    graph: WorkflowGraph,
    cfg: StageConfig,
    mode: str,
    ctx: EvalContext,
    surrogates: Mapping[str, str] | None = None,
    on_record: Callable[[StepRecord], None] | None = None,
) -> StageResult:
    stage = mode
    ctx.stage = stage
    calls0 = ctx.evaluator_calls.get(stage, 0)
    evals0 = ctx.acceptance_evals.get(stage, 0)
    records: list[StepRecord] = []

    def emit(recs: list[StepRecord]) -> None:
        records.extend(recs)
        if on_record:
            for r in recs:
                on_record(r)

    try:
        baseline = ctx.accept(graph)
        threshold = cfg.tau * baseline.avg_score
        budget = len(graph) if cfg.max_iterations is None else cfg.max_iterations
        current, cur_out = graph, baseline
        cur_digest = graph.digest()
        accepted = 0
        substituted: set[str] = set()

        while accepted < budget:
            if mode == PRUNE:
                cands = current.unprotected_ids
            else:
                cands = [
                    v
                    for v in current.unprotected_ids
                    if v not in substituted and surrogates and current.node(v).model in surrogates
                ]
            if not cands:
                break
            signals, _ = compute_signals(
                current, cands, ctx.probe_instances, ctx.evaluator, ctx.pricing,
                mode=mode, surrogates=surrogates, evaluate_fn=ctx.probe,
            )
            table = rank_and_fuse(signals, cfg.fusion, n_nodes=len(current))

            trials: list[StepRecord] = []
            hit = None
            for v in table.top(cfg.k):
                trial = make_variant(current, v, mode, surrogates)
                out = ctx.accept(trial)
                ok = meets_threshold(out.avg_score, cfg.tau, baseline.avg_score)
                trials.append(
                    StepRecord(
                        stage=stage,
                        iteration=accepted,
                        candidate=v,
                        action=_action(mode, current, v, trial),
                        score_before=cur_out.avg_score,
                        cost_before=cur_out.avg_cost_usd,
                        score_after=out.avg_score,
                        cost_after=out.avg_cost_usd,
                        threshold=threshold,
                        verdict=ACCEPTED if ok else REJECTED,
                        before_digest=cur_digest,
                        after_digest=trial.digest(),
                        signals=table.signals[v],
                        ranks=table.ranks_of(v),
                        fused=table.fused[v],
                    )
                )
                if ok:
                    hit = (v, trial, out)
                    break

            if hit is None:
                emit([replace(r, verdict=ROLLED_BACK) for r in trials])
                logger.info("%s: no top-%d candidate accepted; rolling back and stopping", stage, cfg.k)
                break
            emit(trials)
            v, current, cur_out = hit
            cur_digest = current.digest()
            if mode == QUANTIZE:
                substituted.add(v)
            accepted += 1
            logger.info("%s: accepted %s (score %.4f, cost %.3e)", stage, v, cur_out.avg_score, cur_out.avg_cost_usd)
    except Exception as exc:
        raise StageAborted(stage, records, exc) from exc

    return StageResult(
        graph=current,
        outcome=cur_out,
        baseline=baseline,
        records=records,
        acceptance_evals=ctx.acceptance_evals.get(stage, 0) - evals0,
        evaluator_calls=ctx.evaluator_calls.get(stage, 0) - calls0,
    )


def _context(
    base: WorkflowGraph,
    cfg: StageConfig,
    evaluator: Evaluator,
    pricing: PricingTable,
    instances: Sequence[DatasetInstance] | Dataset,
) -> EvalContext:
    dataset = instances if isinstance(instances, Dataset) else Dataset(tuple(instances))
    probe, acceptance = make_slices(dataset, cfg.probe_size, cfg.acceptance_size, cfg.seed)
    return EvalContext(evaluator, pricing, probe, acceptance)


def make_slices(
    dataset: Dataset, probe_size: int, acceptance_size: int | None, seed: int
) -> tuple[list[DatasetInstance], list[DatasetInstance]]:
    probe = instances_for(dataset, sample_probe(dataset, probe_size, seed).ids)
    if acceptance_size is None:
        return probe, probe
    return probe, instances_for(dataset, sample_probe(dataset, acceptance_size, seed + 1).ids)


def prune_stage(
    base: WorkflowGraph,
    cfg: StageConfig,
    evaluator: Evaluator,
    pricing: PricingTable,
    instances: Sequence[DatasetInstance] | Dataset | None = None,
    ctx: EvalContext | None = None,
    on_record: Callable[[StepRecord], None] | None = None,
) -> StageResult:
    """Greedily remove nodes while S(G_p) >= tau * S(G_base)."""
    if ctx is None:
        if instances is None:
            raise ValueError("either instances or ctx is required")
        ctx = _context(base, cfg, evaluator, pricing, instances)
    return _greedy_stage(base, cfg, PRUNE, ctx, on_record=on_record)


def quant_stage(
    pruned: WorkflowGraph,
    cfg: StageConfig,
    surrogates: Mapping[str, str],
    evaluator: Evaluator,
    pricing: PricingTable,
    instances: Sequence[DatasetInstance] | Dataset | None = None,
    ctx: EvalContext | None = None,
    on_record: Callable[[StepRecord], None] | None = None,
) -> StageResult:
    """Greedily rebind nodes to surrogates while S(G_q) >= tau * S(G_p)."""
    check_surrogates(surrogates, pricing)
    if ctx is None:
        if instances is None:
            raise ValueError("either instances or ctx is required")
        ctx = _context(pruned, cfg, evaluator, pricing, instances)
    return _greedy_stage(pruned, cfg, QUANTIZE, ctx, surrogates=surrogates, on_record=on_record)


@dataclass
class PipelineResult:
    graph: WorkflowGraph
    outcome: EvalOutcome
    records: list[StepRecord]
    pool: CandidatePool
    stage_outputs: dict[str, tuple[str, EvalOutcome]]
    evaluator_calls: dict[str, int]
    acceptance_evals: dict[str, int]
    spend_usd: float = 0.0
    warnings: list[str] = field(default_factory=list)
    budget_violated: bool = False


def run_pipeline(
    base: WorkflowGraph,
    dataset: Dataset | Sequence[DatasetInstance],
    evaluator: Evaluator,
    pricing: PricingTable,
    surrogates: Mapping[str, str] | None = None,
    prune_cfg: StageConfig | None = None,
    quant_cfg: StageConfig | None = None,
    tune_cfg=None,
    mutations=None,
    budget: float | None = None,
    order: str = PRUNE_FIRST,
    stages: Sequence[str] = (PRUNE, QUANTIZE),
    on_record: Callable[[StepRecord], None] | None = None,
    max_workers: int | None = None,
) -> PipelineResult:
    """Prune, quantize and optionally tune, then pick the pool's best graph.

    The probe and acceptance slices are drawn once, from ``prune_cfg``'s
    sizes and seed, and shared by all stages so pool scores are comparable.
    """
    from .tuner import TunerConfig, builtin_mutations, tune

    prune_cfg = prune_cfg or StageConfig()
    quant_cfg = quant_cfg or StageConfig()
    surrogates = dict(surrogates or {})
    if order not in (PRUNE_FIRST, QUANTIZE_FIRST):
        raise ValueError(f"unknown order {order!r}")
    unknown = set(stages) - {PRUNE, QUANTIZE, "tune"}
    if unknown:
        raise ValueError(f"unknown stages: {sorted(unknown)}")
    check_surrogates(surrogates, pricing)
    missing = pricing.missing(base)
    if missing:
        raise PricingError("unpriced models: " + ", ".join(missing))

    dataset = dataset if isinstance(dataset, Dataset) else Dataset(tuple(dataset))
    probe, acceptance = make_slices(dataset, prune_cfg.probe_size, prune_cfg.acceptance_size, prune_cfg.seed)
    ctx = EvalContext(evaluator, pricing, probe, acceptance, max_workers=max_workers)
    ctx.stage = "base"
    try:
        base_out = ctx.accept(base)
    except Exception as exc:
        raise StageAborted("base", [], exc) from exc

    records: list[StepRecord] = []
    outputs: dict[str, tuple[str, EvalOutcome]] = {"base": (base.digest(), base_out)}
    sequence = [PRUNE, QUANTIZE] if order == PRUNE_FIRST else [QUANTIZE, PRUNE]
    current = base
    for stage in sequence:
        if stage not in stages:
            continue
        try:
            if stage == PRUNE:
                res = prune_stage(current, prune_cfg, evaluator, pricing, ctx=ctx, on_record=on_record)
            else:
                res = quant_stage(current, quant_cfg, surrogates, evaluator, pricing, ctx=ctx, on_record=on_record)
        except StageAborted as exc:
            records.extend(exc.records)
            exc.records = records
            raise
        records.extend(res.records)
        current = res.graph
        outputs[stage] = (current.digest(), res.outcome)

    if "tune" in stages:
        tcfg = tune_cfg or TunerConfig()
        muts = mutations if mutations is not None else builtin_mutations(surrogates=surrogates)
        try:
            tres = tune(current, tcfg, muts, evaluator, pricing, ctx=ctx, on_record=on_record)
        except Exception as exc:
            raise StageAborted("tune", records, exc) from exc
        records.extend(tres.records)
        current = tres.graph
        outputs["tune"] = (current.digest(), tres.outcome)

    best, warning = ctx.pool.best(budget)
    warnings = [warning] if warning else []
    if warning:
        logger.warning(warning)
    return PipelineResult(
        graph=best.graph,
        outcome=best.outcome,
        records=records,
        pool=ctx.pool,
        stage_outputs=outputs,
        evaluator_calls=dict(ctx.evaluator_calls),
        acceptance_evals=dict(ctx.acceptance_evals),
        spend_usd=ctx.spend_usd,
        warnings=warnings,
        budget_violated=warning is not None,
    )
