"""Policy comparison, weight-curve export and the offline self-test."""

from __future__ import annotations

import csv
import io
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, TextIO

import numpy as np

from .config import RunConfig, parse_config
from .errors import LossAgentError
from .losses import TERMS, LossTerm, WeightBounds
from .prompts import HistoryMode, build_needs_prompt, format_example, format_weights_line
from .trajectory import Trajectory, load

POLICIES = ("agent", "fixed", "random", "greedy_oracle")


@dataclass
class ComparisonCell:
    policy: str
    seed: int
    final_feedback: dict = field(default_factory=dict)
    parse_ok: int = 0
    parse_fallback: int = 0
    attempts: int = 0
    clipped: int = 0
    error: Optional[str] = None
    trajectory_path: Optional[str] = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ComparisonReport:
    policies: list[str]
    seeds: list[int]
    cells: list[ComparisonCell]

    def cell(self, policy: str, seed: int) -> ComparisonCell:
        for c in self.cells:
            if c.policy == policy and c.seed == seed:
                return c
        raise KeyError((policy, seed))

    def to_dict(self) -> dict:
        return {"policies": self.policies, "seeds": self.seeds, "cells": [c.to_dict() for c in self.cells]}


def summarize(trajectory: Trajectory, policy: str, seed: int) -> ComparisonCell:
    """Report cell computed from a trajectory alone."""
    cell = ComparisonCell(policy, seed)
    if len(trajectory):
        cell.final_feedback = {fb.objective_name: fb.aggregate for fb in trajectory[-1].feedback}
    for e in trajectory:
        if e.decision is None:
            continue
        cell.attempts += e.decision.attempts
        cell.clipped += int(e.decision.clipped)
        if e.decision.parse_status == "ok":
            cell.parse_ok += 1
        else:
            cell.parse_fallback += 1
    return cell


def _cell_path(out_dir: Path, index: int, policy: str, seed: int) -> Path:
    return out_dir / f"{index:03d}_{policy}_seed{seed}.jsonl"


def compare_policies(
    base_config: RunConfig,
    policies: Sequence[str],
    seeds: Sequence[int],
    *,
    out_dir: str | Path | None = None,
    workers: int = 1,
    backend_factory: Optional[Callable[[RunConfig], object]] = None,
) -> ComparisonReport:
    """Run every (policy, seed) pair with otherwise identical config.

    Each run writes its own trajectory file; the report is then assembled from
    those files only.  A failing run is recorded in its cell.
    """
    if not policies or not seeds:
        raise ValueError("compare_policies needs at least one policy and one seed")
    from .orchestrator import run

    tmp = None
    if out_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="lossagent-compare-")
        out_dir = tmp.name
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(i, p, int(s)) for i, (p, s) in enumerate((p, s) for p in policies for s in seeds)]

    def one(job):
        i, policy, seed = job
        path = _cell_path(out, i, policy, seed)
        cfg = base_config.model_copy(update={"policy": policy, "seed": seed})
        try:
            cfg = parse_config(cfg.model_dump())
            backend = backend_factory(cfg) if (backend_factory and policy == "agent") else None
            run(cfg, backend=backend, out_path=path)
            return None
        except LossAgentError as exc:
            return f"{type(exc).__name__}: {exc}"

    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                errors = list(pool.map(one, jobs))
        else:
            errors = [one(j) for j in jobs]
        cells = []
        for (i, policy, seed), err in zip(jobs, errors):
            path = _cell_path(out, i, policy, seed)
            if path.exists():
                cell = summarize(load(path), policy, seed)
            else:
                cell = ComparisonCell(policy, seed)
            cell.error = err
            cell.trajectory_path = str(path) if tmp is None else None
            cells.append(cell)
    finally:
        if tmp is not None:
            tmp.cleanup()
    return ComparisonReport(list(policies), [int(s) for s in seeds], cells)


# ----------------------------------------------------------------- weight curves


def weight_curves_csv(trajectory: Trajectory) -> str:
    if len(trajectory) == 0:
        raise ValueError("cannot export curves for an empty trajectory")
    terms = trajectory.loss_terms or [f"w{i + 1}" for i in range(len(trajectory[0].weights_used))]
    objectives = trajectory.objectives or [fb.objective_name for fb in trajectory[0].feedback]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["stage", *terms, *objectives])
    for e in trajectory:
        row = [str(e.stage_index), *(f"{w:.6f}" for w in e.weights_used)]
        for name in objectives:
            agg = e.feedback_for(name).aggregate
            row.append(f"{agg:.6f}" if isinstance(agg, float) else agg)
        writer.writerow(row)
    return buf.getvalue()


def emit_weight_curves(trajectory: Trajectory, out_path: str | Path) -> Path:
    path = Path(out_path)
    path.write_text(weight_curves_csv(trajectory), encoding="utf-8")
    return path


def read_weight_curves(path: str | Path) -> tuple[list[str], list[tuple[float, ...]]]:
    """Header and weight rows from a curve CSV (term columns follow ``stage``)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], [tuple(float(v) for v in r[1:]) for r in rows[1:]]


# ---------------------------------------------------------------------- selftest


def _fd_gradient(term: LossTerm, p: np.ndarray, t: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(p)
    flat = p.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = term.value(p, t)
        flat[i] = old - h
        down = term.value(p, t)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def _near_kink(term_id: str, p: np.ndarray, t: np.ndarray, margin: float) -> bool:
    """True when an absolute-value term sits within ``margin`` of a non-differentiable point."""
    from .imageops import diff_x, diff_y

    r = p - t
    if term_id == "l1":
        return bool(np.any(np.abs(r) < margin))
    if term_id == "edge":
        return bool(np.any(np.abs(diff_x(r)) < margin) or np.any(np.abs(diff_y(r)) < margin))
    if term_id == "tv":
        return bool(np.any(np.abs(diff_x(p)) < margin) or np.any(np.abs(diff_y(p)) < margin))
    return False


def gradient_check_inputs(term_id: str, count: int, shape=(1, 8, 8), seed: int = 0, h: float = 1e-5):
    """Random inputs in [0, 1], redrawn when they land within 10 h of a kink."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        p = rng.uniform(0.0, 1.0, size=shape)
        t = rng.uniform(0.0, 1.0, size=shape)
        if not _near_kink(term_id, p, t, 10 * h):
            out.append((p, t))
    return out


def check_term_gradient(term: LossTerm, samples: int = 100, seed: int = 0, grad_fn=None) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    grad_fn = grad_fn or term.gradient
    worst = 0.0
    for p, t in gradient_check_inputs(term.id, samples, seed=seed):
        worst = max(worst, gradient_relative_error(grad_fn(p, t), _fd_gradient(term, p, t)))
    return worst


def selftest(out: Optional[TextIO] = None, *, fault: Optional[str] = None, samples: int = 100) -> int:
    """Offline checks: gradients, parse round-trips, a 3-stage scripted run.

    ``fault="gradient"`` perturbs one analytic gradient to prove the check bites.
    Returns 0 when everything passes, 1 otherwise.
    """
    from .agent import parse_weights
    from .orchestrator import run

    out = out or sys.stdout
    results: list[tuple[str, bool, str]] = []

    for term in TERMS.values():
        grad_fn = term.gradient
        if fault == "gradient" and term.id == "l1":
            grad_fn = lambda p, t, g=term.gradient: 1.01 * g(p, t)
        err = check_term_gradient(term, samples, grad_fn=grad_fn)
        results.append((f"gradient {term.id}", err < 1e-5, f"max rel err {err:.2e}"))

    bounds = WeightBounds()
    rng = np.random.default_rng(1)
    ok = True
    for m in (1, 3, 5):
        ids = list(TERMS)[:m]
        for _ in range(50):
            w = rng.uniform(bounds.lower, bounds.upper, size=m)
            got = parse_weights("reasoning...\n" + format_weights_line(ids, w), ids, bounds)
            ok &= bool(np.all(np.abs(got - w) <= 1e-9))
        example = format_example(ids, bounds)
        needs = build_needs_prompt([], [TERMS[i] for i in ids], bounds)
        ok &= example in needs
        parse_weights(needs, ids, bounds)
    results.append(("parse round-trip", ok, "formatted weights and prompt examples re-parse exactly"))

    try:
        cfg = parse_config(
            dict(
                stages=3,
                iterations_per_stage=5,
                learning_rate=0.05,
                test_set_size=2,
                history_mode=HistoryMode(mode="full"),
                dataset=dict(count=2, height=12, width=12),
                backend=dict(kind="scripted", script="hill_climb"),
            )
        )
        traj = run(cfg)
        statuses = [e.decision.parse_status for e in traj.entries[1:]]
        smoke = len(traj) == 3 and statuses == ["ok", "ok"]
        results.append(("3-stage scripted run", smoke, f"parse statuses {statuses}"))
    except LossAgentError as exc:
        results.append(("3-stage scripted run", False, str(exc)))

    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}", file=out)
    failed = sum(not p for _, p, _ in results)
    print(f"{len(results) - failed}/{len(results)} checks passed", file=out)
    return 0 if failed == 0 else 1
