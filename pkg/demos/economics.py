"""Cost reduction and break-even for the reference benchmark costs, plus a Pareto frontier."""

from __future__ import annotations

from slimflow.report import benchmark_scenarios, format_econ_table, pareto_frontier

rows = benchmark_scenarios()
print(format_econ_table(rows))
hotpot = next(r for r in rows if r.name == "HotpotQA")
print(f"\nHotpotQA: {hotpot.c_optimize} / {hotpot.delta} = {hotpot.c_optimize / hotpot.delta:.2f} executions (reference table lists 8889)")

points = [(0.955, 4.38e-3), (0.955, 9.30e-4), (0.935, 3.57e-3), (0.905, 2.48e-4), (0.949, 4.79e-3)]
print("\nfrontier (score, cost):")
for p in pareto_frontier(points):
    print(f"  {p.score:.3f}  {p.cost:.2e}")
