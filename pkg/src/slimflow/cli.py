"""Command-line entry point: ``slimflow run | report | audit``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import __version__
from .compressor import StageAborted, run_pipeline
from .config import ConfigError, RunConfig, demo_config_path, load_config
from .evaluation import EvaluationError, PricingError, SyntheticEvaluator, load_dataset, load_pricing, load_synthetic_spec
from .graph import GraphError, dump, load
from .report import (
    ParetoPoint,
    RunLog,
    audit_log,
    benchmark_scenarios,
    econ_report,
    format_econ_table,
    load_scenarios,
    pareto_frontier,
    read_log,
    read_pareto_table,
    write_pareto_table,
)
from .tuner import builtin_mutations

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_EVALUATOR = 3
EXIT_BUDGET = 4
EXIT_AUDIT = 5

logger = logging.getLogger("slimflow")


def _build_evaluator(cfg: RunConfig):
    ev = cfg.evaluator
    if "synthetic" in ev:
        return SyntheticEvaluator(load_synthetic_spec(ev["synthetic"]))
    from .remote import HttpEvaluator

    http = dict(ev["http"])
    prompts = {}
    if "prompts" in http:
        prompts = yaml.safe_load(Path(http.pop("prompts")).read_text(encoding="utf-8")) or {}
    return HttpEvaluator.from_env(prompts=prompts, **http)


def cmd_run(args: argparse.Namespace) -> int:
    config_path = demo_config_path() if args.demo else args.config
    if config_path is None:
        print("error: --config or --demo is required", file=sys.stderr)
        return EXIT_CONFIG
    overrides = {
        "workflow": args.workflow,
        "dataset": args.dataset,
        "pricing": args.pricing,
        "seed": args.seed,
        "stages": args.stages,
        "order": args.order,
        "tau_p": args.tau_p,
        "tau_q": args.tau_q,
        "top_k": args.top_k,
        "probe_size": args.probe_size,
        "budget": args.budget,
        "out": args.out,
    }
    try:
        cfg = load_config(config_path, overrides)
        graph = load(cfg.workflow)
        dataset = load_dataset(cfg.dataset)
        pricing = load_pricing(cfg.pricing)
        missing = pricing.missing(graph) + sorted(m for m in cfg.surrogates.values() if m not in pricing)
        if missing:
            raise ConfigError("models missing from pricing table: " + ", ".join(sorted(set(missing))))
        evaluator = _build_evaluator(cfg)
    except (ConfigError, GraphError, EvaluationError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    mutations = builtin_mutations(cfg.prompt_variants, cfg.surrogates)
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")

    with RunLog(out / "run_log.jsonl") as log:
        log.header(cfg.snapshot(), __version__, started)
        try:
            result = run_pipeline(
                graph,
                dataset,
                evaluator,
                pricing,
                surrogates=cfg.surrogates,
                prune_cfg=cfg.prune,
                quant_cfg=cfg.quantize,
                tune_cfg=cfg.tuner,
                mutations=mutations,
                budget=cfg.budget,
                order=cfg.order,
                stages=cfg.stages,
                on_record=lambda r: log.step(r.to_dict()),
            )
        except (StageAborted, EvaluationError, PricingError) as exc:
            log.summary({"status": "evaluator_failure", "error": str(exc)})
            print(f"evaluator failure: {exc}", file=sys.stderr)
            return EXIT_EVALUATOR

        base_digest, base_out = result.stage_outputs["base"]
        log.summary(
            {
                "status": "ok",
                "stage_order": ["base", *(["prune", "quantize"] if cfg.order == "prune-first" else ["quantize", "prune"]), "tune"],
                "stage_outputs": {
                    k: {"digest": d, "score": o.avg_score, "cost": repr(o.avg_cost_usd)}
                    for k, (d, o) in result.stage_outputs.items()
                },
                "chosen_digest": result.graph.digest(),
                "score": result.outcome.avg_score,
                "cost": repr(result.outcome.avg_cost_usd),
                "evaluator_calls": result.evaluator_calls,
                "acceptance_evals": result.acceptance_evals,
                "optimization_spend_usd": repr(result.spend_usd),
                "pool_size": len(result.pool),
                "warnings": result.warnings,
            }
        )

    dump(result.graph, out / "best_workflow.json")
    points = [ParetoPoint(e.outcome.avg_score, e.outcome.avg_cost_usd, e.digest) for e in result.pool]
    with open(out / "pareto.tsv", "w", encoding="utf-8") as fh:
        write_pareto_table(sorted(points, key=lambda p: (p.cost, -p.score, p.label)), fh)
    with open(out / "pareto_frontier.tsv", "w", encoding="utf-8") as fh:
        write_pareto_table(pareto_frontier(points), fh)

    print(
        f"base   score={base_out.avg_score:.4f} cost={base_out.avg_cost_usd:.3e}\n"
        f"chosen score={result.outcome.avg_score:.4f} cost={result.outcome.avg_cost_usd:.3e} "
        f"nodes={len(result.graph)}\n"
        f"artifacts in {out}"
    )
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if result.budget_violated and args.strict_budget:
        return EXIT_BUDGET
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    if not (args.scenarios or args.benchmarks or args.log or args.pareto):
        print("error: give --scenarios, --benchmarks, --log or --pareto", file=sys.stderr)
        return EXIT_CONFIG
    rows = []
    try:
        if args.benchmarks:
            rows += benchmark_scenarios()
        if args.scenarios:
            rows += load_scenarios(args.scenarios)
        for path in args.log or []:
            recs = read_log(path)
            summary = next(r for r in reversed(recs) if r.get("type") == "summary")
            rows += econ_report(
                [
                    {
                        "name": Path(path).parent.name or Path(path).stem,
                        "c_base": summary["stage_outputs"]["base"]["cost"],
                        "c_ours": summary["cost"],
                        "c_optimize": summary.get("optimization_spend_usd"),
                    }
                ]
            )
    except (OSError, KeyError, StopIteration, ValueError) as exc:
        print(f"cannot read report inputs: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if rows:
        if args.json:
            print(json.dumps([r.to_dict() for r in rows], indent=2))
        else:
            print(format_econ_table(rows))
    if args.pareto:
        try:
            front = pareto_frontier(read_pareto_table(args.pareto))
        except ValueError as exc:
            print(f"pareto: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        if rows:
            print()
        write_pareto_table(front, sys.stdout)
    return EXIT_OK


def cmd_audit(args: argparse.Namespace) -> int:
    problems = audit_log(args.log)
    for p in problems:
        print(p)
    if problems:
        return EXIT_AUDIT
    print("log ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slimflow", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="compress a workflow")
    run.add_argument("--config", type=Path)
    run.add_argument("--demo", action="store_true", help="use the bundled synthetic demo config")
    run.add_argument("--workflow", type=Path)
    run.add_argument("--dataset", type=Path)
    run.add_argument("--pricing", type=Path)
    run.add_argument("--seed", type=int)
    run.add_argument("--stages", help="comma list of prune,quantize,tune")
    run.add_argument("--order", choices=["prune-first", "quantize-first"])
    run.add_argument("--tau-p", type=float)
    run.add_argument("--tau-q", type=float)
    run.add_argument("--top-k", type=int)
    run.add_argument("--probe-size", type=int)
    run.add_argument("--budget", type=float)
    run.add_argument("--out", type=Path)
    run.add_argument("--strict-budget", action="store_true", help="exit nonzero if no candidate meets the budget")
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="cost reduction, break-even and Pareto frontier")
    rep.add_argument("--scenarios", type=Path, help="CSV: name,c_base,c_ours[,c_optimize]")
    rep.add_argument("--benchmarks", action="store_true", help="include the bundled benchmark cost table")
    rep.add_argument("--log", type=Path, action="append", help="run log(s) to summarize")
    rep.add_argument("--pareto", type=Path, help="two-column score/cost table")
    rep.add_argument("--json", action="store_true")
    rep.set_defaults(func=cmd_report)

    aud = sub.add_parser("audit", help="check run-log chain integrity")
    aud.add_argument("log", type=Path)
    aud.set_defaults(func=cmd_audit)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
