"""Run the local-edit search from a workflow whose generator was downgraded too far."""

from __future__ import annotations

from slimflow.evaluation import PricingTable, SyntheticEvaluator, SyntheticTaskSpec, synthetic_dataset
from slimflow.graph import Node, build
from slimflow.tuner import TunerConfig, builtin_mutations, mixed_probabilities, tune

print("parent selection for scores (1.0, 0.8, 0.5):", mixed_probabilities([1.0, 0.8, 0.5], 0.3, 0.2).round(4))

nodes = [
    Node("in", "Input", "gpt-4.1-mini"),
    Node("gen", "AnswerGenerate", "gpt-4.1-nano"),
    Node("sol", "Custom", "gpt-4.1-mini", prompt_ref="sol_a"),
    Node("ens", "ScEnsemble", "gpt-4.1-mini"),
    Node("out", "AnswerFormat", "gpt-4.1-mini", dataset="demo"),
]
g = build(nodes, [("in", "gen"), ("in", "sol"), ("gen", "ens"), ("sol", "ens"), ("ens", "out")], ["in"], "out")
spec = SyntheticTaskSpec(
    contributions={"gen": 0.5, "sol": 0.2, "out": 0.1},
    quant_penalty={"gen": 0.08},
    low_tier_models=frozenset({"gpt-4.1-nano"}),
    noise=0.02,
    seed=3,
)
pricing = PricingTable({"gpt-4.1-mini": (4e-7, 1.6e-6), "gpt-4.1-nano": (1e-7, 4e-7)})
mutations = builtin_mutations({"sol_a": ["sol_a", "sol_b"]}, {"gpt-4.1-mini": "gpt-4.1-nano"})
res = tune(g, TunerConfig(seed=1, max_rounds=25), mutations, SyntheticEvaluator(spec), pricing, synthetic_dataset(30).instances)
for c in res.candidates:
    print(f"{c.digest[:10]}  score {c.score:.3f}  from {str(c.parent)[:10]:<10}  {c.mutation or 'start'}")
print(f"\n{res.rounds} rounds, adopted: {res.adopted}, final score {res.outcome.avg_score:.3f}, gen model {res.graph.node('gen').model}")
