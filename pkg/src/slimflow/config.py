"""Run configuration files (YAML or JSON)."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .compressor import PRUNE_FIRST, QUANTIZE_FIRST, StageConfig
from .importance import FusionConfig
from .tuner import TunerConfig


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    workflow: Path
    dataset: Path
    pricing: Path
    seed: int
    evaluator: Mapping[str, Any]
    stages: tuple[str, ...] = ("prune", "quantize")
    order: str = PRUNE_FIRST
    prune: StageConfig = field(default_factory=StageConfig)
    quantize: StageConfig = field(default_factory=StageConfig)
    tuner: TunerConfig = field(default_factory=TunerConfig)
    surrogates: Mapping[str, str] = field(default_factory=dict)
    prompt_variants: Mapping[str, list[str]] = field(default_factory=dict)
    budget: float | None = None
    out: Path = Path("slimflow-run")

    def snapshot(self) -> dict[str, Any]:
        """Plain-data view for the run log header (paths as given names only)."""

        def stage(c: StageConfig) -> dict[str, Any]:
            d = asdict(c)
            d["fusion"] = asdict(c.fusion)
            return d

        ev = dict(self.evaluator)
        if "synthetic" in ev:
            ev["synthetic"] = Path(ev["synthetic"]).name
        if "http" in ev:
            http = dict(ev["http"])
            if "prompts" in http:
                http["prompts"] = Path(http["prompts"]).name
            ev["http"] = http
        return {
            "workflow": self.workflow.name,
            "dataset": self.dataset.name,
            "pricing": self.pricing.name,
            "seed": self.seed,
            "evaluator": ev,
            "stages": list(self.stages),
            "order": self.order,
            "prune": stage(self.prune),
            "quantize": stage(self.quantize),
            "tuner": asdict(self.tuner),
            "surrogates": dict(self.surrogates),
            "prompt_variants": {k: list(v) for k, v in self.prompt_variants.items()},
            "budget": self.budget,
        }


def _stage(doc: Mapping[str, Any] | None, fusion: FusionConfig, common: Mapping[str, Any]) -> StageConfig:
    doc = dict(doc or {})
    allowed = {f.name for f in fields(StageConfig)} - {"fusion"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown stage keys: {sorted(unknown)}")
    merged = {**common, **doc}
    return StageConfig(fusion=fusion, **merged)


def demo_config_path() -> Path:
    return Path(str(resources.files("slimflow").joinpath("data/demo/config.yaml")))


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Load a run config; relative file paths resolve against the config's directory.

    ``overrides`` uses the CLI flag names (``seed``, ``tau_p``, ``tau_q``,
    ``top_k``, ``probe_size``, ``budget``, ``stages``, ``order``, ``out``,
    ``workflow``, ``dataset``, ``pricing``); ``None`` values are ignored.
    """
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    ov = {k: v for k, v in (overrides or {}).items() if v is not None}
    base = path.parent

    def resolve(p: Any) -> Path:
        p = Path(p)
        return p if p.is_absolute() else base / p

    for key in ("workflow", "dataset", "pricing"):
        if key in ov:
            doc[key] = ov[key]
    missing = [k for k in ("workflow", "dataset", "pricing", "seed", "evaluator") if k not in doc and k not in ov]
    if missing:
        raise ConfigError(f"config missing required keys: {missing}")

    try:
        fusion = FusionConfig(**(doc.get("fusion") or {}))
        common = {}
        for key in ("probe_size", "acceptance_size"):
            if key in doc:
                common[key] = doc[key]
        if "probe_size" in ov:
            common["probe_size"] = int(ov["probe_size"])
        seed = int(ov.get("seed", doc.get("seed")))
        common["seed"] = seed
        prune = _stage(doc.get("prune"), fusion, common)
        quant = _stage(doc.get("quantize"), fusion, common)
        if "tau_p" in ov:
            prune = replace(prune, tau=float(ov["tau_p"]))
        if "tau_q" in ov:
            quant = replace(quant, tau=float(ov["tau_q"]))
        if "top_k" in ov:
            prune = replace(prune, k=int(ov["top_k"]))
            quant = replace(quant, k=int(ov["top_k"]))
        tuner = TunerConfig(**{"seed": seed, **(doc.get("tuner") or {})})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    stages = ov.get("stages", doc.get("stages", ["prune", "quantize"]))
    if isinstance(stages, str):
        stages = [s.strip() for s in stages.split(",") if s.strip()]
    bad = set(stages) - {"prune", "quantize", "tune"}
    if bad:
        raise ConfigError(f"unknown stages: {sorted(bad)}")
    order = ov.get("order", doc.get("order", PRUNE_FIRST))
    if order not in (PRUNE_FIRST, QUANTIZE_FIRST):
        raise ConfigError(f"unknown order {order!r}")

    evaluator = dict(doc["evaluator"])
    if "synthetic" in evaluator:
        evaluator["synthetic"] = resolve(evaluator["synthetic"])
    elif "http" in evaluator:
        http = dict(evaluator["http"] or {})
        if "prompts" in http:
            http["prompts"] = resolve(http["prompts"])
        evaluator["http"] = http
    else:
        raise ConfigError("evaluator must specify 'synthetic' or 'http'")

    budget = ov.get("budget", doc.get("budget"))
    for f in ("workflow", "dataset", "pricing"):
        if not resolve(doc[f]).exists():
            raise ConfigError(f"{f} file not found: {resolve(doc[f])}")
    return RunConfig(
        workflow=resolve(doc["workflow"]),
        dataset=resolve(doc["dataset"]),
        pricing=resolve(doc["pricing"]),
        seed=seed,
        evaluator=evaluator,
        stages=tuple(stages),
        order=order,
        prune=prune,
        quantize=quant,
        tuner=tuner,
        surrogates=dict(doc.get("surrogates") or {}),
        prompt_variants={k: list(v) for k, v in (doc.get("prompt_variants") or {}).items()},
        budget=None if budget is None else float(budget),
        out=Path(ov.get("out", doc.get("out", "slimflow-run"))),
    )
