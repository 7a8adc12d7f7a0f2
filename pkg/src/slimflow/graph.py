"""Workflow graphs: immutable DAGs of operator nodes bound to models.

All edits (node removal with edge patching, model substitution) return new
graphs; inputs are never mutated. Serialization is canonical (nodes and
edges sorted) so documents and digests are byte-stable.
"""

from __future__ import annotations

import hashlib
import heapq
import json
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema

INPUT = "Input"
ANSWER_FORMAT = "AnswerFormat"

# Catalogue of standard operator kinds. Anything else is accepted as a
# user-defined kind.
STANDARD_OPERATORS = frozenset(
    {
        "AnswerGenerate",
        "Programmer",
        "CustomCodeGenerate",
        "Test",
        "ScEnsemble",
        "CodeRefine",
        "Custom",
        INPUT,
        ANSWER_FORMAT,
    }
)

# Operators that produce candidate answers (used by the tuner's ensemble
# mutation).
GENERATOR_OPERATORS = frozenset({"AnswerGenerate", "Custom", "Programmer", "CustomCodeGenerate"})


class GraphError(Exception):
    """Base class for workflow graph errors."""


class UnknownNodeError(GraphError, KeyError):
    def __init__(self, node_id: str):
        super().__init__(node_id)
        self.node_id = node_id

    def __str__(self) -> str:
        return f"unknown node: {self.node_id!r}"


class ProtectedNodeError(GraphError):
    def __init__(self, node_id: str):
        super().__init__(f"node {node_id!r} is protected")
        self.node_id = node_id


class CyclicGraphError(GraphError):
    pass


class SchemaError(GraphError):
    """A workflow document does not match the document schema."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class InvalidGraphError(GraphError):
    """A document parsed but the graph it describes violates an invariant."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class Node:
    id: str
    operator: str
    model: str
    prompt_ref: str | None = None
    description: str = ""
    protected: bool = False
    dataset: str | None = None  # AnswerFormat nodes only


@dataclass(frozen=True, order=True)
class Edge:
    source: str
    target: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


@dataclass(frozen=True)
class WorkflowGraph:
    """A workflow DAG.

    ``nodes`` and ``edges`` are stored sorted by id so that two graphs with
    the same content compare equal and serialize identically. Construction
    does not validate; call :func:`validate` (``deserialize`` does).
    """

    nodes: tuple[Node, ...]
    edges: tuple[Edge, ...]
    entry_ids: tuple[str, ...]
    final_id: str
    description: str = ""
    _index: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(sorted(self.nodes, key=lambda n: n.id)))
        object.__setattr__(self, "edges", tuple(sorted(Edge(*e) if not isinstance(e, Edge) else e for e in self.edges)))
        object.__setattr__(self, "entry_ids", tuple(self.entry_ids))
        object.__setattr__(self, "_index", {n.id: n for n in self.nodes})

    def __contains__(self, node_id: object) -> bool:
        return node_id in self._index

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, node_id: str) -> Node:
        try:
            return self._index[node_id]
        except KeyError:
            raise UnknownNodeError(node_id) from None

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    @cached_property
    def _adjacency(self) -> tuple[dict[str, list[str]], dict[str, list[str]]]:
        succ: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        pred: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            if e.source in succ and e.target in pred and e.target not in succ[e.source]:
                succ[e.source].append(e.target)
                pred[e.target].append(e.source)
        return succ, pred

    def successors(self, node_id: str) -> list[str]:
        self.node(node_id)
        return list(self._adjacency[0][node_id])

    def predecessors(self, node_id: str) -> list[str]:
        self.node(node_id)
        return list(self._adjacency[1][node_id])

    @property
    def protected_ids(self) -> frozenset[str]:
        """Flagged nodes plus the entry and final anchors."""
        flagged = {n.id for n in self.nodes if n.protected}
        return frozenset(flagged | set(self.entry_ids) | {self.final_id})

    def is_protected(self, node_id: str) -> bool:
        self.node(node_id)
        return node_id in self.protected_ids

    @property
    def unprotected_ids(self) -> list[str]:
        prot = self.protected_ids
        return [n.id for n in self.nodes if n.id not in prot]

    def digest(self) -> str:
        return hashlib.sha256(dumps(self).encode("utf-8")).hexdigest()


def predecessors(graph: WorkflowGraph, v: str) -> list[str]:
    return graph.predecessors(v)


def successors(graph: WorkflowGraph, v: str) -> list[str]:
    return graph.successors(v)


def _reachable(start: Iterable[str], succ: Mapping[str, list[str]]) -> set[str]:
    seen = set(start)
    stack = list(seen)
    while stack:
        u = stack.pop()
        for w in succ.get(u, ()):
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return seen


def _find_cycle_nodes(ids: list[str], succ: Mapping[str, list[str]]) -> list[str]:
    indeg = {v: 0 for v in ids}
    for u in ids:
        for w in succ[u]:
            indeg[w] += 1
    queue = [v for v in ids if indeg[v] == 0]
    removed = set()
    while queue:
        u = queue.pop()
        removed.add(u)
        for w in succ[u]:
            indeg[w] -= 1
            if indeg[w] == 0:
                queue.append(w)
    return sorted(set(ids) - removed)


def validate(graph: WorkflowGraph, pricing: Mapping[str, Any] | None = None) -> ValidationReport:
    """Check every structural invariant; violations are returned, not raised.

    If ``pricing`` (any mapping keyed by model id) is given, unpriced model
    bindings are reported too.
    """
    violations: list[str] = []
    warnings: list[str] = []

    seen: set[str] = set()
    for n in graph.nodes:
        if not n.id:
            violations.append("empty node id")
        if n.id in seen:
            violations.append(f"duplicate node id {n.id}")
        seen.add(n.id)
        if n.operator == INPUT and n.prompt_ref:
            violations.append(f"input node {n.id} carries a prompt")
        if n.operator == ANSWER_FORMAT and not n.dataset:
            violations.append(f"answer-format node {n.id} has no dataset name")
        if pricing is not None and n.model not in pricing:
            violations.append(f"model {n.model} of node {n.id} is not priced")

    pairs: set[tuple[str, str]] = set()
    for e in graph.edges:
        if e.source == e.target:
            violations.append(f"self-loop at {e.source}")
        if (e.source, e.target) in pairs:
            violations.append(f"duplicate edge {e.source}->{e.target}")
        pairs.add((e.source, e.target))
        for end in (e.source, e.target):
            if end not in seen:
                violations.append(f"edge {e.source}->{e.target} references unknown node {end}")

    if not graph.entry_ids:
        violations.append("no entry nodes")
    for eid in graph.entry_ids:
        if eid not in seen:
            violations.append(f"entry node {eid} does not exist")
    if graph.final_id not in seen:
        violations.append(f"final node {graph.final_id} does not exist")

    for anchor in (*graph.entry_ids, graph.final_id):
        if anchor in seen and not graph.node(anchor).protected:
            violations.append(f"anchor node {anchor} is not flagged protected")

    succ, pred = graph._adjacency
    ids = graph.node_ids
    cyc = _find_cycle_nodes(ids, succ)
    if cyc:
        violations.append("cycle through nodes " + ",".join(cyc))

    entries = [e for e in graph.entry_ids if e in seen]
    reach = _reachable(entries, succ)
    for v in ids:
        if v not in reach:
            violations.append(f"node {v} unreachable from every entry")
    if graph.final_id in seen:
        for eid in entries:
            if graph.final_id not in _reachable([eid], succ):
                violations.append(f"final node {graph.final_id} unreachable from entry {eid}")

    prot = graph.protected_ids
    for v in ids:
        if v in prot:
            continue
        if not pred[v]:
            warnings.append(f"unprotected node {v} has no predecessors")
        if not succ[v]:
            warnings.append(f"unprotected node {v} has no successors")

    return ValidationReport(tuple(violations), tuple(warnings))


def topo_order(graph: WorkflowGraph) -> list[str]:
    """Kahn's algorithm; ties broken by lexicographic node id."""
    succ, _ = graph._adjacency
    indeg = {v: 0 for v in succ}
    for u, ws in succ.items():
        for w in ws:
            indeg[w] += 1
    heap = [v for v, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        u = heapq.heappop(heap)
        order.append(u)
        for w in succ[u]:
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(heap, w)
    if len(order) != len(succ):
        raise CyclicGraphError("cycle through nodes " + ",".join(sorted(set(succ) - set(order))))
    return order


def remove_node_with_patch(graph: WorkflowGraph, victim: str) -> WorkflowGraph:
    """Remove ``victim`` and connect each predecessor to each successor.

    Patch edges are added only where absent, never as self-loops.
    """
    graph.node(victim)
    if graph.is_protected(victim):
        raise ProtectedNodeError(victim)
    ins = graph.predecessors(victim)
    outs = graph.successors(victim)
    kept = {(e.source, e.target) for e in graph.edges if victim not in (e.source, e.target)}
    for s in ins:
        for t in outs:
            if s != t:
                kept.add((s, t))
    return WorkflowGraph(
        nodes=tuple(n for n in graph.nodes if n.id != victim),
        edges=tuple(Edge(s, t) for s, t in kept),
        entry_ids=graph.entry_ids,
        final_id=graph.final_id,
        description=graph.description,
    )


def substitute_model(
    graph: WorkflowGraph,
    target: str,
    surrogate: str,
    pricing: Mapping[str, Any] | None = None,
) -> WorkflowGraph:
    """Rebind ``target`` to ``surrogate``; topology is untouched."""
    node = graph.node(target)
    if graph.is_protected(target):
        raise ProtectedNodeError(target)
    if pricing is not None and surrogate not in pricing:
        raise GraphError(f"surrogate model {surrogate!r} is not priced")
    if node.model == surrogate:
        return graph
    return with_node(graph, replace(node, model=surrogate))


def with_node(graph: WorkflowGraph, node: Node) -> WorkflowGraph:
    """Return a copy of ``graph`` with ``node`` replacing the node of the same id."""
    graph.node(node.id)
    return replace(graph, nodes=tuple(node if n.id == node.id else n for n in graph.nodes))


# -- serialization ---------------------------------------------------------


def serialize(graph: WorkflowGraph) -> dict[str, Any]:
    nodes = []
    for n in graph.nodes:
        doc: dict[str, Any] = {"id": n.id, "operator": n.operator, "model": n.model}
        if n.prompt_ref is not None:
            doc["prompt_ref"] = n.prompt_ref
        if n.dataset is not None:
            doc["dataset"] = n.dataset
        if n.protected:
            doc["protected"] = True
        if n.description:
            doc["description"] = n.description
        nodes.append(doc)
    return {
        "description": graph.description,
        "entry_ids": list(graph.entry_ids),
        "final_id": graph.final_id,
        "nodes": nodes,
        "edges": [{"source": e.source, "target": e.target} for e in graph.edges],
    }


def dumps(graph: WorkflowGraph) -> str:
    return json.dumps(serialize(graph), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


_SCHEMA: dict | None = None


def document_schema() -> dict:
    global _SCHEMA
    if _SCHEMA is None:
        text = resources.files("slimflow").joinpath("data/workflow.schema.json").read_text()
        _SCHEMA = json.loads(text)
    return _SCHEMA


def deserialize(doc: Mapping[str, Any]) -> WorkflowGraph:
    """Build a graph from a document, rejecting schema or invariant violations."""
    try:
        jsonschema.validate(doc, document_schema())
    except jsonschema.ValidationError as exc:
        path = [str(p) for p in exc.absolute_path]
        missing = None
        if exc.validator == "required":
            # message looks like "'final_id' is a required property"
            missing = exc.message.split("'")[1]
        fld = missing or (".".join(path) if path else None)
        raise SchemaError(f"{fld}: {exc.message}" if fld else exc.message, field=fld) from None

    nodes = tuple(
        Node(
            id=n["id"],
            operator=n["operator"],
            model=n["model"],
            prompt_ref=n.get("prompt_ref"),
            description=n.get("description", ""),
            protected=bool(n.get("protected", False)),
            dataset=n.get("dataset"),
        )
        for n in doc["nodes"]
    )
    ids = [n.id for n in nodes]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise InvalidGraphError([f"duplicate node id {d}" for d in dupes])
    graph = WorkflowGraph(
        nodes=nodes,
        edges=tuple(Edge(e["source"], e["target"]) for e in doc["edges"]),
        entry_ids=tuple(doc["entry_ids"]),
        final_id=doc["final_id"],
        description=doc.get("description", ""),
    )
    report = validate(graph)
    if not report.ok:
        raise InvalidGraphError(list(report.violations))
    return graph


def loads(text: str) -> WorkflowGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed document: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("document must be an object")
    return deserialize(doc)


def load(path: str | Path) -> WorkflowGraph:
    return loads(Path(path).read_text(encoding="utf-8"))


def dump(graph: WorkflowGraph, path: str | Path) -> None:
    Path(path).write_text(dumps(graph), encoding="utf-8")


def build(
    nodes: Iterable[Node],
    edges: Iterable[tuple[str, str] | Edge],
    entry_ids: Iterable[str],
    final_id: str,
    description: str = "",
) -> WorkflowGraph:
    """Convenience constructor that flags the anchors as protected."""
    entry_ids = tuple(entry_ids)
    anchors = set(entry_ids) | {final_id}
    nodes = tuple(replace(n, protected=True) if n.id in anchors and not n.protected else n for n in nodes)
    return WorkflowGraph(
        nodes=nodes,
        edges=tuple(e if isinstance(e, Edge) else Edge(*e) for e in edges),
        entry_ids=entry_ids,
        final_id=final_id,
        description=description,
    )
