"""Scoring and costing workflow graphs over dataset slices.

An evaluator turns ``(graph, instance)`` into a score in ``[0, 1]`` and the
list of model calls it made. :func:`evaluate` averages scores and prices the
calls with a :class:`PricingTable` to give S(G) and C(G) in USD per problem.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import yaml

from .graph import WorkflowGraph

logger = logging.getLogger(__name__)

DEFAULT_PROBE_SIZE = 50


class EvaluationError(Exception):
    """Hard failure: aborts the evaluation run."""


class PricingError(EvaluationError):
    pass


class InstanceError(Exception):
    """Failure confined to one instance; scored 0 and recorded."""


# -- data ------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetInstance:
    id: str
    input: str
    target: Any = None


@dataclass(frozen=True)
class Dataset:
    instances: tuple[DatasetInstance, ...]
    name: str = "dataset"

    def __post_init__(self) -> None:
        ids = [x.id for x in self.instances]
        if len(set(ids)) != len(ids):
            raise ValueError(f"dataset {self.name}: duplicate instance ids")

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    @property
    def ids(self) -> list[str]:
        return [x.id for x in self.instances]

    def subset(self, probe: ProbeSlice) -> list[DatasetInstance]:
        by_id = {x.id: x for x in self.instances}
        return [by_id[i] for i in probe.ids]


def load_dataset(path: str | Path, name: str | None = None) -> Dataset:
    """Read line-delimited ``{id, input, target}`` records."""
    path = Path(path)
    items = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        try:
            items.append(DatasetInstance(str(rec["id"]), str(rec["input"]), rec.get("target")))
        except KeyError as exc:
            raise ValueError(f"{path}:{lineno}: missing field {exc.args[0]}") from None
    return Dataset(tuple(items), name=name or path.stem)


@dataclass(frozen=True)
class ModelRate:
    input_rate: float  # USD per input token
    output_rate: float  # USD per output token

    def __post_init__(self) -> None:
        if self.input_rate < 0 or self.output_rate < 0:
            raise ValueError("rates must be non-negative")


class PricingTable(Mapping[str, ModelRate]):
    """Model id -> per-token USD rates."""

    def __init__(self, rates: Mapping[str, ModelRate | Mapping[str, Any] | tuple[float, float]]):
        self._rates: dict[str, ModelRate] = {}
        for model, r in rates.items():
            if isinstance(r, ModelRate):
                self._rates[model] = r
            elif isinstance(r, Mapping):
                self._rates[model] = ModelRate(float(r["input_rate"]), float(r["output_rate"]))
            else:
                self._rates[model] = ModelRate(float(r[0]), float(r[1]))

    def __getitem__(self, model: str) -> ModelRate:
        return self._rates[model]

    def __iter__(self):
        return iter(self._rates)

    def __len__(self) -> int:
        return len(self._rates)

    def call_cost(self, model: str, input_tokens: int, output_tokens: int) -> float:
        try:
            r = self._rates[model]
        except KeyError:
            raise PricingError(f"model {model!r} is not priced") from None
        return input_tokens * r.input_rate + output_tokens * r.output_rate

    def missing(self, graph: WorkflowGraph) -> list[str]:
        return sorted({n.model for n in graph.nodes if n.model not in self._rates})

    def to_dict(self) -> dict[str, dict[str, str]]:
        return {m: {"input_rate": repr(r.input_rate), "output_rate": repr(r.output_rate)} for m, r in sorted(self._rates.items())}


def load_pricing(path: str | Path) -> PricingTable:
    """Pricing file: mapping of model id to ``{input_rate, output_rate}`` (USD/token)."""
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, Mapping):
        raise ValueError(f"{path}: pricing file must be a mapping")
    return PricingTable(doc.get("models", doc))


# -- probe slices ----------------------------------------------------------


@dataclass(frozen=True)
class ProbeSlice:
    dataset: str
    ids: tuple[str, ...]
    seed: int
    note: str | None = None


def sample_probe(dataset: Dataset, m: int = DEFAULT_PROBE_SIZE, seed: int = 0) -> ProbeSlice:
    """Uniform sample of ``m`` ids without replacement, returned sorted."""
    if m < 1:
        raise ValueError("probe size must be >= 1")
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    ids = sorted(dataset.ids)
    note = None
    if m >= len(ids):
        if m > len(ids):
            note = f"requested {m} instances but dataset has {len(ids)}; using all"
            logger.warning(note)
        chosen = ids
    else:
        chosen = sorted(random.Random(seed).sample(ids, m))
    return ProbeSlice(dataset.name, tuple(chosen), seed, note)


# -- evaluation ------------------------------------------------------------


@dataclass(frozen=True)
class ModelCall:
    node: str
    model: str
    input_tokens: int
    output_tokens: int


@dataclass(frozen=True)
class InstanceResult:
    score: float
    calls: tuple[ModelCall, ...] = ()
    output: Any = None


@dataclass(frozen=True)
class InstanceRecord:
    id: str
    score: float
    cost: float
    input_tokens: int
    output_tokens: int
    error: str | None = None


@dataclass(frozen=True)
class EvalOutcome:
    avg_score: float
    avg_cost_usd: float
    per_instance: tuple[InstanceRecord, ...] = field(default=(), repr=False)

    @property
    def n_failed(self) -> int:
        return sum(r.error is not None for r in self.per_instance)


class Evaluator(Protocol):
    """Scores one graph on one instance.

    Raise :class:`InstanceError` for a per-instance failure; anything else is
    treated as a hard failure. Set ``max_workers = 1`` to force serial use.
    """

    max_workers: int

    def __call__(self, graph: WorkflowGraph, instance: DatasetInstance) -> InstanceResult: ...


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def evaluate(
    graph: WorkflowGraph,
    instances: Sequence[DatasetInstance],
    evaluator: Evaluator,
    pricing: PricingTable,
    max_workers: int | None = None,
) -> EvalOutcome:
    """Average score and USD cost of ``graph`` over ``instances``."""
    missing = pricing.missing(graph)
    if missing:
        raise PricingError("unpriced models: " + ", ".join(missing))
    if not instances:
        raise EvaluationError("empty evaluation slice")

    def run(inst: DatasetInstance) -> InstanceRecord:
        try:
            res = evaluator(graph, inst)
        except InstanceError as exc:
            return InstanceRecord(inst.id, 0.0, 0.0, 0, 0, error=str(exc))
        cost = math.fsum(pricing.call_cost(c.model, c.input_tokens, c.output_tokens) for c in res.calls)
        return InstanceRecord(
            inst.id,
            _clamp01(res.score),
            cost,
            sum(c.input_tokens for c in res.calls),
            sum(c.output_tokens for c in res.calls),
        )

    workers = min(max_workers or getattr(evaluator, "max_workers", 1), len(instances))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run, instances))
    else:
        records = [run(x) for x in instances]

    n = len(records)
    return EvalOutcome(
        avg_score=math.fsum(r.score for r in records) / n,
        avg_cost_usd=math.fsum(r.cost for r in records) / n,
        per_instance=tuple(records),
    )


# -- synthetic evaluator ---------------------------------------------------


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Closed-form stand-in for an LLM task.

    A node's score contribution counts while it is present; within a
    redundancy group only the largest present member counts. Nodes bound to
    a low-tier model lose their quantization penalty. Token usage per call is
    fixed per node.
    """

    contributions: Mapping[str, float] = field(default_factory=dict)
    tokens: Mapping[str, tuple[int, int]] = field(default_factory=dict)
    redundancy_groups: tuple[frozenset[str], ...] = ()
    quant_penalty: Mapping[str, float] = field(default_factory=dict)
    low_tier_models: frozenset[str] = frozenset()
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if any(w < 0 for w in self.contributions.values()):
            raise ValueError("contributions must be non-negative")
        if self.noise < 0:
            raise ValueError("noise amplitude must be non-negative")
        groups = tuple(frozenset(g) for g in self.redundancy_groups)
        seen: set[str] = set()
        for g in groups:
            if seen & g:
                raise ValueError("redundancy groups must be disjoint")
            seen |= g
        object.__setattr__(self, "redundancy_groups", groups)
        object.__setattr__(self, "low_tier_models", frozenset(self.low_tier_models))
        object.__setattr__(self, "tokens", {k: (int(v[0]), int(v[1])) for k, v in self.tokens.items()})

    def to_dict(self) -> dict[str, Any]:
        return {
            "contributions": dict(sorted(self.contributions.items())),
            "tokens": {k: list(v) for k, v in sorted(self.tokens.items())},
            "redundancy_groups": [sorted(g) for g in self.redundancy_groups],
            "quant_penalty": dict(sorted(self.quant_penalty.items())),
            "low_tier_models": sorted(self.low_tier_models),
            "noise": self.noise,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> SyntheticTaskSpec:
        return cls(
            contributions={k: float(v) for k, v in doc.get("contributions", {}).items()},
            tokens={k: tuple(v) for k, v in doc.get("tokens", {}).items()},
            redundancy_groups=tuple(frozenset(g) for g in doc.get("redundancy_groups", [])),
            quant_penalty={k: float(v) for k, v in doc.get("quant_penalty", {}).items()},
            low_tier_models=frozenset(doc.get("low_tier_models", [])),
            noise=float(doc.get("noise", 0.0)),
            seed=int(doc.get("seed", 0)),
        )


def load_synthetic_spec(path: str | Path) -> SyntheticTaskSpec:
    return SyntheticTaskSpec.from_dict(yaml.safe_load(Path(path).read_text(encoding="utf-8")))


def _noise(spec: SyntheticTaskSpec, graph: WorkflowGraph, instance_id: str) -> float:
    if spec.noise == 0:
        return 0.0
    key = f"{spec.seed}:{instance_id}:{graph.digest()}".encode()
    rng = random.Random(int.from_bytes(hashlib.sha256(key).digest()[:8], "big"))
    return spec.noise * rng.uniform(-1.0, 1.0)


def synthetic_evaluate(
    graph: WorkflowGraph, instance: DatasetInstance, spec: SyntheticTaskSpec
) -> InstanceResult:
    present = set(graph.node_ids)
    grouped = set().union(*spec.redundancy_groups) if spec.redundancy_groups else set()
    terms = [spec.contributions.get(v, 0.0) for v in sorted(present - grouped)]
    for g in spec.redundancy_groups:
        members = [spec.contributions.get(v, 0.0) for v in g & present]
        if members:
            terms.append(max(members))
    penalty = math.fsum(
        spec.quant_penalty.get(n.id, 0.0) for n in graph.nodes if n.model in spec.low_tier_models
    )
    score = _clamp01(math.fsum(terms) - penalty + _noise(spec, graph, instance.id))
    calls = tuple(
        ModelCall(n.id, n.model, *spec.tokens[n.id]) for n in graph.nodes if n.id in spec.tokens
    )
    return InstanceResult(score, calls)


class SyntheticEvaluator:
    """Deterministic evaluator backed by a :class:`SyntheticTaskSpec`."""

    max_workers = 1

    def __init__(self, spec: SyntheticTaskSpec):
        self.spec = spec

    def __call__(self, graph: WorkflowGraph, instance: DatasetInstance) -> InstanceResult:
        return synthetic_evaluate(graph, instance, self.spec)


def synthetic_dataset(n: int, name: str = "synthetic") -> Dataset:
    return Dataset(tuple(DatasetInstance(f"q{i:04d}", f"question {i}", None) for i in range(n)), name=name)


def instances_for(dataset: Dataset, ids: Iterable[str]) -> list[DatasetInstance]:
    by_id = {x.id: x for x in dataset.instances}
    return [by_id[i] for i in ids]
