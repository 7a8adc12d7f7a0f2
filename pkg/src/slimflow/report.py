"""Run logs, Pareto frontiers and cost/break-even economics."""

from __future__ import annotations

import csv
import hashlib
import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from pathlib import Path
from typing import IO, Any, NamedTuple

Number = Decimal | float | int | str


def to_decimal(x: Number) -> Decimal:
    """Decimal from a float via its shortest repr, so 1.2e-2 becomes 0.012 exactly."""
    if isinstance(x, Decimal):
        return x
    if isinstance(x, float):
        return Decimal(repr(x))
    return Decimal(str(x))


# -- economics -------------------------------------------------------------


class BreakEven(NamedTuple):
    calls: int | None
    reason: str = ""

    @property
    def defined(self) -> bool:
        return self.calls is not None


def break_even(c_optimize: Number, c_base: Number, c_ours: Number) -> BreakEven:
    """Executions needed before per-call savings repay a one-off optimization cost.

    ``C_optimize / (C_base - C_ours)`` rounded to the nearest integer (halves
    up). Undefined when the optimized workflow is not cheaper.
    """
    opt, base, ours = to_decimal(c_optimize), to_decimal(c_base), to_decimal(c_ours)
    saving = base - ours
    if saving <= 0:
        return BreakEven(None, f"no per-call saving (C_base - C_ours = {saving})")
    return BreakEven(int((opt / saving).to_integral_value(rounding=ROUND_HALF_UP)))


def cost_reduction(c_base: Number, c_ours: Number) -> Decimal:
    """Percent saving relative to ``c_base``, to one decimal place."""
    base, ours = to_decimal(c_base), to_decimal(c_ours)
    if base <= 0:
        raise ValueError("baseline cost must be positive")
    return (Decimal(100) * (base - ours) / base).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)


@dataclass(frozen=True)
class EconRow:
    name: str
    c_base: Decimal
    c_ours: Decimal
    c_optimize: Decimal | None = None

    @property
    def delta(self) -> Decimal:
        return self.c_base - self.c_ours

    @property
    def reduction_pct(self) -> Decimal:
        return cost_reduction(self.c_base, self.c_ours)

    @property
    def break_even(self) -> BreakEven:
        if self.c_optimize is None:
            return BreakEven(None, "optimization cost unknown")
        return break_even(self.c_optimize, self.c_base, self.c_ours)

    def to_dict(self) -> dict[str, str | int | None]:
        be = self.break_even
        return {
            "name": self.name,
            "c_base": str(self.c_base),
            "c_ours": str(self.c_ours),
            "delta_c": str(self.delta),
            "reduction_pct": str(self.reduction_pct),
            "c_optimize": None if self.c_optimize is None else str(self.c_optimize),
            "break_even": be.calls,
            "note": be.reason or None,
        }


def econ_report(rows: Iterable[Mapping[str, Any]]) -> list[EconRow]:
    out = []
    for r in rows:
        opt = r.get("c_optimize")
        out.append(
            EconRow(
                name=str(r["name"]),
                c_base=to_decimal(r["c_base"]),
                c_ours=to_decimal(r["c_ours"]),
                c_optimize=None if opt in (None, "") else to_decimal(opt),
            )
        )
    return out


def load_scenarios(path: str | Path) -> list[EconRow]:
    """CSV with columns ``name,c_base,c_ours[,c_optimize]``."""
    with open(path, newline="", encoding="utf-8") as fh:
        return econ_report(csv.DictReader(fh))


def benchmark_scenarios() -> list[EconRow]:
    """Reference per-benchmark costs (baseline vs compressed) with optimization spend."""
    with resources.files("slimflow").joinpath("data/benchmark_costs.csv").open(encoding="utf-8") as fh:
        return econ_report(csv.DictReader(fh))


def format_econ_table(rows: Sequence[EconRow]) -> str:
    header = f"{'scenario':<12} {'C_base':>10} {'C_ours':>10} {'saving':>8} {'C_opt':>8} {'break-even':>11}"
    lines = [header, "-" * len(header)]
    for r in rows:
        be = r.break_even
        lines.append(
            f"{r.name:<12} {r.c_base:>10} {r.c_ours:>10} {str(r.reduction_pct) + '%':>8} "
            f"{'' if r.c_optimize is None else str(r.c_optimize):>8} {'undefined' if be.calls is None else be.calls:>11}"
        )
    return "\n".join(lines)


# -- Pareto ----------------------------------------------------------------


class ParetoPoint(NamedTuple):
    score: float
    cost: float
    label: str = ""


def dominates(a: ParetoPoint | tuple, b: ParetoPoint | tuple) -> bool:
    """``a`` scores at least as high and costs at most as much, strictly better in one."""
    return a[0] >= b[0] and a[1] <= b[1] and (a[0] > b[0] or a[1] < b[1])


def pareto_frontier(points: Iterable[ParetoPoint | tuple]) -> list[ParetoPoint]:
    """Non-dominated (score up, cost down) points, ordered by increasing cost.

    Duplicate (score, cost) pairs are kept once.
    """
    pts = [p if isinstance(p, ParetoPoint) else ParetoPoint(*p) for p in points]
    if not pts:
        raise ValueError("no points")
    # sweep by cost ascending, score descending; keep strictly improving scores
    frontier: list[ParetoPoint] = []
    best = float("-inf")
    for p in sorted(pts, key=lambda p: (p.cost, -p.score, p.label)):
        if p.score > best:
            frontier.append(p)
            best = p.score
    return frontier


def write_pareto_table(points: Iterable[ParetoPoint], fh: IO[str]) -> None:
    """Two whitespace-separated numeric columns: score, cost."""
    fh.write("# score cost\n")
    for p in points:
        fh.write(f"{p.score!r} {p.cost!r}\n")


def read_pareto_table(path: str | Path) -> list[ParetoPoint]:
    pts = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        s, c = line.split()[:2]
        pts.append(ParetoPoint(float(s), float(c)))
    return pts


# -- run log ---------------------------------------------------------------


class RunLog:
    """Append-only JSON-lines run log.

    Line 1 is a header (config snapshot, version, timestamp); step lines and
    the closing summary form the body, which carries no timestamps and is
    byte-identical across replays with the same config and seed.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = open(self.path, "w", encoding="utf-8")
        self._body = hashlib.sha256()

    def _write(self, rec: Mapping[str, Any], body: bool = True) -> None:
        line = json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n"
        if body:
            self._body.update(line.encode("utf-8"))
        self._fh.write(line)
        self._fh.flush()

    def header(self, config: Mapping[str, Any], version: str, started_at: str) -> None:
        self._write({"type": "header", "config": config, "version": version, "started_at": started_at}, body=False)

    def step(self, record: Mapping[str, Any]) -> None:
        self._write({"type": "step", **record})

    def summary(self, summary: Mapping[str, Any]) -> None:
        self._write({"type": "summary", **summary, "body_sha256": self._body.hexdigest()})

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> RunLog:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_log(path: str | Path) -> list[dict[str, Any]]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def log_body(path: str | Path) -> str:
    """Everything after the header line."""
    lines = Path(path).read_text(encoding="utf-8").splitlines(keepends=True)
    return "".join(lines[1:])


def audit_log(path_or_records: str | Path | Sequence[Mapping[str, Any]]) -> list[str]:
    """Check chain integrity and acceptance thresholds of a run log.

    Within each prune/quantize stage, every step's before-digest must equal
    the after-digest of the previous accepted step (or the stage input),
    accepted steps must meet their threshold, and the next stage must start
    from the previous stage's final graph. Returns a list of problems.
    """
    recs = read_log(path_or_records) if isinstance(path_or_records, (str, Path)) else list(path_or_records)
    problems: list[str] = []
    steps = [r for r in recs if r.get("type") == "step"]
    summaries = [r for r in recs if r.get("type") == "summary"]

    state: str | None = None
    stage = None
    for i, r in enumerate(steps):
        if r["stage"] == "tune":
            if r["verdict"] == "accepted" and state is not None and r["before_digest"] != state:
                problems.append(f"step {i}: tuner adoption does not start from the compressed graph")
            if r["verdict"] == "accepted":
                state = r["after_digest"]
            continue
        if r["stage"] != stage:
            stage = r["stage"]
            if state is None:
                state = r["before_digest"]
        if r["before_digest"] != state:
            problems.append(f"step {i} ({r['stage']}): before-digest does not match last accepted state")
        if r["verdict"] == "accepted":
            if r["score_after"] < r["threshold"]:
                problems.append(f"step {i} ({r['stage']}): accepted below threshold")
            state = r["after_digest"]
        elif r["verdict"] not in ("rejected", "rolled_back"):
            problems.append(f"step {i}: unknown verdict {r['verdict']!r}")

    if summaries:
        s = summaries[-1]
        stage_out = s.get("stage_outputs", {})
        last = None
        for name in s.get("stage_order", []):
            if name in stage_out:
                last = stage_out[name]["digest"]
        if state is not None and last is not None and last != state:
            problems.append("summary: last stage output does not match last accepted state")
    return problems
