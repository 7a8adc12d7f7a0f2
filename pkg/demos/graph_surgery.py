"""Load the bundled case-study workflow, validate it, and remove a node with edge patching."""

from __future__ import annotations

from importlib import resources

from slimflow.graph import ProtectedNodeError, load, remove_node_with_patch, substitute_model, topo_order, validate

path = resources.files("slimflow").joinpath("data/demo/workflow.json")
g = load(str(path))
print(f"{len(g)} nodes, {len(g.edges)} edges, digest {g.digest()[:12]}")
print("execution order:", " -> ".join(topo_order(g)))
print("validation ok:", validate(g).ok)

# removing Programmer wires its predecessor straight to its successor
print("\nbefore: Input -> Programmer -> RefineWithCode")
h = remove_node_with_patch(g, "Programmer")
print("after:  Input ->", [s for s in h.successors("Input") if s == "RefineWithCode"])
print(f"{len(h)} nodes, valid: {validate(h).ok}, original untouched: {'Programmer' in g}")

# swapping a model keeps the topology and changes the digest
q = substitute_model(h, "ScEnsembler", "gpt-4.1-nano")
print("\nScEnsembler model:", q.node("ScEnsembler").model, "| same edges:", q.edges == h.edges, "| new digest:", q.digest() != h.digest())

try:
    remove_node_with_patch(g, "AnswerFormatter")
except ProtectedNodeError as exc:
    print("\nprotected nodes refuse surgery:", exc)
