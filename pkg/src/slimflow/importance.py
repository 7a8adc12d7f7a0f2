"""Per-node importance signals and their reciprocal-rank fusion.

Four signals are measured for each candidate node: degree, directed
betweenness, the leave-one-out score drop and the cost saving. Each is turned
into a dense rank where 1 means "most worth removing", and the ranks are
fused as ``sum_m w_m / (kappa + r_m)``.
"""

from __future__ import annotations

from collections import deque
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .evaluation import DatasetInstance, EvalOutcome, Evaluator, PricingTable, evaluate
from .graph import WorkflowGraph, remove_node_with_patch, substitute_model

METRICS = ("deg", "bet", "shap", "cost")
PRUNE = "prune"
QUANTIZE = "quantize"


@dataclass(frozen=True)
class SignalSet:
    node: str
    s_deg: int
    s_bet: float
    delta_score: float
    delta_cost: float

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "s_deg": self.s_deg,
            "s_bet": self.s_bet,
            "delta_score": self.delta_score,
            "delta_cost": repr(self.delta_cost),
        }


@dataclass(frozen=True)
class FusionConfig:
    w_deg: float = 1.0
    w_bet: float = 1.0
    w_shap: float = 2.0
    w_cost: float = 1.0
    min_kappa: int = 10

    def __post_init__(self) -> None:
        ws = self.weights
        if any(w < 0 for w in ws.values()):
            raise ValueError("fusion weights must be non-negative")
        if not any(w > 0 for w in ws.values()):
            raise ValueError("at least one fusion weight must be positive")

    @property
    def weights(self) -> dict[str, float]:
        return {"deg": self.w_deg, "bet": self.w_bet, "shap": self.w_shap, "cost": self.w_cost}

    def kappa(self, n_nodes: int) -> int:
        return max(self.min_kappa, n_nodes)


@dataclass(frozen=True)
class RankTable:
    ranks: Mapping[str, Mapping[str, int]]
    fused: Mapping[str, float]
    order: tuple[str, ...]
    kappa: int
    signals: Mapping[str, SignalSet] = field(default_factory=dict, compare=False)

    def ranks_of(self, node: str) -> dict[str, int]:
        return {m: self.ranks[m][node] for m in METRICS}

    def top(self, k: int) -> list[str]:
        return list(self.order[:k])


# -- structural signals ----------------------------------------------------


def degree_signal(graph: WorkflowGraph, v: str) -> int:
    return len(graph.predecessors(v)) + len(graph.successors(v))


def betweenness(graph: WorkflowGraph) -> dict[str, float]:
    """Unnormalized directed betweenness for every node (Brandes, unit lengths).

    Sums over ordered pairs (s, t) with s != v != t of the fraction of
    shortest s->t paths that pass through v.
    """
    ids = graph.node_ids
    succ = {v: graph.successors(v) for v in ids}
    bc = dict.fromkeys(ids, 0.0)
    for s in ids:
        stack = []
        preds: dict[str, list[str]] = {v: [] for v in ids}
        sigma = dict.fromkeys(ids, 0)
        dist = dict.fromkeys(ids, -1)
        sigma[s] = 1
        dist[s] = 0
        queue = deque([s])
        while queue:
            u = queue.popleft()
            stack.append(u)
            for w in succ[u]:
                if dist[w] < 0:
                    dist[w] = dist[u] + 1
                    queue.append(w)
                if dist[w] == dist[u] + 1:
                    sigma[w] += sigma[u]
                    preds[w].append(u)
        delta = dict.fromkeys(ids, 0.0)
        while stack:
            w = stack.pop()
            for u in preds[w]:
                delta[u] += sigma[u] / sigma[w] * (1.0 + delta[w])
            if w != s:
                bc[w] += delta[w]
    return bc


def betweenness_signal(graph: WorkflowGraph, v: str) -> float:
    graph.node(v)
    return betweenness(graph)[v]


# -- functional signals ----------------------------------------------------


def make_variant(
    graph: WorkflowGraph, v: str, mode: str, surrogates: Mapping[str, str] | None = None
) -> WorkflowGraph:
    """The graph with ``v`` removed (prune) or rebound to its surrogate (quantize)."""
    if mode == PRUNE:
        return remove_node_with_patch(graph, v)
    if mode == QUANTIZE:
        model = graph.node(v).model
        if not surrogates or model not in surrogates:
            raise ValueError(f"no surrogate for model {model!r} of node {v}")
        return substitute_model(graph, v, surrogates[model])
    raise ValueError(f"unknown mode {mode!r}")


def loo_contribution(
    graph: WorkflowGraph,
    v: str,
    instances: Sequence[DatasetInstance],
    evaluator: Evaluator,
    pricing: PricingTable,
    mode: str = PRUNE,
    surrogates: Mapping[str, str] | None = None,
    baseline: EvalOutcome | None = None,
) -> float:
    """Score drop S(G) - S(variant) on ``instances``."""
    base = baseline or evaluate(graph, instances, evaluator, pricing)
    var = evaluate(make_variant(graph, v, mode, surrogates), instances, evaluator, pricing)
    return base.avg_score - var.avg_score


def cost_delta(
    graph: WorkflowGraph,
    v: str,
    instances: Sequence[DatasetInstance],
    evaluator: Evaluator,
    pricing: PricingTable,
    mode: str = PRUNE,
    surrogates: Mapping[str, str] | None = None,
    baseline: EvalOutcome | None = None,
) -> float:
    """Cost saving C(G) - C(variant) in USD per problem."""
    base = baseline or evaluate(graph, instances, evaluator, pricing)
    var = evaluate(make_variant(graph, v, mode, surrogates), instances, evaluator, pricing)
    return base.avg_cost_usd - var.avg_cost_usd


def compute_signals(
    graph: WorkflowGraph,
    candidates: Sequence[str],
    instances: Sequence[DatasetInstance],
    evaluator: Evaluator,
    pricing: PricingTable,
    mode: str = PRUNE,
    surrogates: Mapping[str, str] | None = None,
    baseline: EvalOutcome | None = None,
    evaluate_fn: Callable[[WorkflowGraph], EvalOutcome] | None = None,
    max_workers: int = 1,
) -> tuple[list[SignalSet], EvalOutcome]:
    """All four signals for ``candidates``.

    The baseline is evaluated once and each variant once; the variant
    outcome yields both the score drop and the cost saving.
    """
    if evaluate_fn is None:

        def evaluate_fn(g: WorkflowGraph) -> EvalOutcome:
            return evaluate(g, instances, evaluator, pricing)

    base = baseline or evaluate_fn(graph)
    bet = betweenness(graph)

    def one(v: str) -> SignalSet:
        var = evaluate_fn(make_variant(graph, v, mode, surrogates))
        return SignalSet(
            node=v,
            s_deg=degree_signal(graph, v),
            s_bet=bet[v],
            delta_score=base.avg_score - var.avg_score,
            delta_cost=base.avg_cost_usd - var.avg_cost_usd,
        )

    if max_workers > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            signals = list(pool.map(one, candidates))
    else:
        signals = [one(v) for v in candidates]
    return signals, base


# -- fusion ----------------------------------------------------------------


def dense_rank(values: Mapping[str, float], descending: bool = False) -> dict[str, int]:
    """Dense ranks starting at 1; equal values share a rank (1, 1, 2)."""
    distinct = sorted(set(values.values()), reverse=descending)
    pos = {x: i + 1 for i, x in enumerate(distinct)}
    return {k: pos[x] for k, x in values.items()}


def rank_and_fuse(
    signals: Sequence[SignalSet],
    config: FusionConfig | None = None,
    n_nodes: int | None = None,
) -> RankTable:
    """Rank candidates for removal and fuse the ranks.

    Peripheral (low degree, low betweenness), low-contribution and expensive
    (high cost saving) nodes rank first. ``n_nodes`` is |V| of the current
    graph and sets kappa; it defaults to the number of candidates.
    """
    if not signals:
        raise ValueError("no candidates to rank")
    config = config or FusionConfig()
    kappa = config.kappa(len(signals) if n_nodes is None else n_nodes)
    ranks = {
        "deg": dense_rank({s.node: s.s_deg for s in signals}),
        "bet": dense_rank({s.node: s.s_bet for s in signals}),
        "shap": dense_rank({s.node: s.delta_score for s in signals}),
        "cost": dense_rank({s.node: s.delta_cost for s in signals}, descending=True),
    }
    weights = config.weights
    fused = {}
    for s in signals:
        total = 0.0
        for m in METRICS:
            if weights[m]:
                total += weights[m] / (kappa + ranks[m][s.node])
        fused[s.node] = total
    order = tuple(sorted(fused, key=lambda v: (-fused[v], v)))
    return RankTable(ranks, fused, order, kappa, {s.node: s for s in signals})
