"""Compute the four per-node signals on the case-study workflow and fuse them into one ranking."""

from __future__ import annotations

from slimflow.config import demo_config_path
from slimflow.evaluation import SyntheticEvaluator, load_dataset, load_pricing, load_synthetic_spec
from slimflow.graph import load
from slimflow.importance import FusionConfig, compute_signals, rank_and_fuse

demo = demo_config_path().parent
g = load(demo / "workflow.json")
instances = load_dataset(demo / "dataset.jsonl").instances[:20]
pricing = load_pricing(demo / "pricing.yaml")
evaluator = SyntheticEvaluator(load_synthetic_spec(demo / "synthetic.yaml"))

signals, base = compute_signals(g, g.unprotected_ids, instances, evaluator, pricing)
table = rank_and_fuse(signals, FusionConfig(), n_nodes=len(g))
print(f"baseline score {base.avg_score:.3f}, cost {base.avg_cost_usd:.2e} USD/problem, kappa {table.kappa}\n")
print(f"{'node':<18}{'deg':>4}{'bet':>6}{'dS':>8}{'dC':>10}   ranks(deg,bet,shap,cost)  fused")
for v in table.order:
    s = table.signals[v]
    r = table.ranks_of(v)
    print(f"{v:<18}{s.s_deg:>4}{s.s_bet:>6.1f}{s.delta_score:>8.3f}{s.delta_cost:>10.2e}   {tuple(r.values())!s:<24}{table.fused[v]:.4f}")
print("\nmost prunable first:", ", ".join(table.top(3)))
