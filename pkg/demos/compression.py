"""Prune then quantize the case-study workflow and pick the best graph under a budget."""

from __future__ import annotations

from slimflow.compressor import StageConfig, run_pipeline
from slimflow.config import demo_config_path
from slimflow.evaluation import SyntheticEvaluator, load_dataset, load_pricing, load_synthetic_spec
from slimflow.graph import load

demo = demo_config_path().parent
g = load(demo / "workflow.json")
dataset = load_dataset(demo / "dataset.jsonl")
pricing = load_pricing(demo / "pricing.yaml")
evaluator = SyntheticEvaluator(load_synthetic_spec(demo / "synthetic.yaml"))
cfg = StageConfig(tau=0.95, k=3, probe_size=50, seed=42)

res = run_pipeline(
    g, dataset, evaluator, pricing,
    surrogates={"gpt-4.1-mini": "gpt-4.1-nano"},
    prune_cfg=cfg, quant_cfg=cfg, budget=0.003,
)
for r in res.records:
    print(f"{r.stage:<9} round {r.iteration}  {r.action:<40} score {r.score_after:.3f} (needs {r.threshold:.3f})  {r.verdict}")

print()
for name, (digest, out) in res.stage_outputs.items():
    print(f"{name:<9} {digest[:10]}  score {out.avg_score:.3f}  cost {out.avg_cost_usd:.2e}")
print(f"\nchosen: {len(res.graph)} nodes, score {res.outcome.avg_score:.3f}, cost {res.outcome.avg_cost_usd:.2e}")
print("models:", {n.id: n.model for n in res.graph.nodes if not n.protected})
print("evaluator calls per stage:", res.evaluator_calls)
