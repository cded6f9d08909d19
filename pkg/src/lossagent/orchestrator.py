"""Stage loop: train, evaluate on the frozen test panel, ask the policy, repeat."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .agent import HillClimbResponder, decide
from .backends import ChatBackend, HTTPChatBackend, ScriptedBackend
from .config import RunConfig
from .data import synthesize_dataset
from .losses import LossRepository, WeightBounds
from .process import ResponseSurface, TestSet, ToyRestorer
from .prompts import PromptTemplates, build_bundle
from .trajectory import DecisionSummary, Trajectory, TrajectoryEntry, TrajectoryWriter

log = logging.getLogger(__name__)

UNPARSEABLE_REPLY = "I would keep training a while longer before changing anything."


def _snap(x: float) -> float:
    # keeps grid points canonical, e.g. 0.5 + 0.1 + 0.1 -> 0.7
    return round(x, 12)


def next_weights_random(rng: np.random.Generator, bounds: WeightBounds, m: int) -> tuple[float, ...]:
    return tuple(float(v) for v in rng.uniform(bounds.lower, bounds.upper, size=m))


def next_weights_greedy_oracle(
    surface: ResponseSurface, current: Sequence[float], grid_step: float, bounds: WeightBounds
) -> tuple[float, ...]:
    """Best of ``current`` and its axis-aligned +/- ``grid_step`` neighbours within bounds.

    Ties keep ``current``, then favour the lowest axis index (minus before plus).
    """
    base = tuple(float(v) for v in current)
    best, best_score = base, surface.value(base)
    eps = 1e-12
    for j in range(len(base)):
        for sign in (-1.0, 1.0):
            v = _snap(base[j] + sign * grid_step)
            if v < bounds.lower - eps or v > bounds.upper + eps:
                continue
            cand = base[:j] + (v,) + base[j + 1 :]
            s = surface.value(cand)
            if s > best_score:
                best, best_score = cand, s
    return best


class Policy(Protocol):
    def next_weights(self, trajectory: Trajectory, current: tuple[float, ...]) -> tuple[tuple[float, ...], Optional[DecisionSummary]]: ...


class FixedPolicy:
    def next_weights(self, trajectory, current):
        return current, None


class RandomPolicy:
    def __init__(self, rng: np.random.Generator, bounds: WeightBounds, m: int):
        self.rng, self.bounds, self.m = rng, bounds, m

    def next_weights(self, trajectory, current):
        return next_weights_random(self.rng, self.bounds, self.m), None


class GreedyOraclePolicy:
    def __init__(self, surface: ResponseSurface, grid_step: float, bounds: WeightBounds):
        self.surface, self.grid_step, self.bounds = surface, grid_step, bounds

    def next_weights(self, trajectory, current):
        return next_weights_greedy_oracle(self.surface, current, self.grid_step, self.bounds), None


class AgentPolicy:
    def __init__(self, config: RunConfig, backend: ChatBackend, rng: np.random.Generator):
        self.config = config
        self.backend = backend
        self.rng = rng
        self.repository = LossRepository(config.loss_terms)
        self.templates = PromptTemplates.from_dir(config.prompt_templates) if config.prompt_templates else PromptTemplates()
        self.last_bundle = None

    def next_weights(self, trajectory, current):
        cfg = self.config
        bundle = build_bundle(
            cfg.task_description,
            cfg.objectives,
            self.repository.terms,
            trajectory.entries,
            cfg.history_mode,
            cfg.rules,
            cfg.weight_bounds(),
            self.templates,
        )
        self.last_bundle = bundle
        decision = decide(
            bundle, self.backend, cfg.backend.retry, current, self.repository.ids, cfg.weight_bounds(), self.rng
        )
        if decision.parse_status == "fallback":
            log.warning("stage %d: no parseable reply after %d attempts; keeping weights", len(trajectory), decision.attempts)
        return decision.weights, DecisionSummary.from_decision(decision)


def build_backend(config: RunConfig) -> ChatBackend:
    b = config.backend
    if b.kind == "http":
        return HTTPChatBackend(url=b.url, model=b.model, timeout=b.timeout)
    if b.script == "hill_climb":
        return ScriptedBackend(HillClimbResponder(objective=b.objective, factor=b.hill_climb_factor))
    if b.script == "constant":
        return ScriptedBackend.constant(b.reply)
    return ScriptedBackend.constant(b.reply or UNPARSEABLE_REPLY)


def build_process(config: RunConfig):
    if config.process == "response_surface":
        return ResponseSurface(config.surface.optimum)
    return ToyRestorer(LossRepository(config.loss_terms), config.kernel_size, config.learning_rate)


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def run(
    config: RunConfig,
    *,
    backend: Optional[ChatBackend] = None,
    out_path: str | Path | None = None,
    policy: Optional[Policy] = None,
) -> Trajectory:
    """Execute ``config.stages`` stages and return the trajectory.

    Stage 0 trains with the initial weights; the policy is consulted before
    every later stage and never after the last one.  When ``out_path`` is set
    each entry is flushed as it completes, so an aborted run leaves its partial
    trajectory behind.
    """
    data_ss, train_ss, policy_ss, backend_ss = np.random.SeedSequence(config.seed).spawn(4)
    bounds = config.weight_bounds()
    m = len(config.loss_terms)
    process = build_process(config)

    if config.process == "toy_restorer":
        ds = config.dataset.model_copy(update={"seed": _seed_int(data_ss)})
        data = synthesize_dataset(ds, config.test_set_size)
        pool, test_set = data.pool, data.test_set
    else:
        pool = None
        test_set = TestSet(np.zeros((config.test_set_size, 1, 1)))

    if policy is None:
        if config.policy == "fixed":
            policy = FixedPolicy()
        elif config.policy == "random":
            policy = RandomPolicy(np.random.default_rng(policy_ss), bounds, m)
        elif config.policy == "greedy_oracle":
            policy = GreedyOraclePolicy(process, config.surface.grid_step, bounds)
        else:
            policy = AgentPolicy(config, backend or build_backend(config), np.random.default_rng(backend_ss))

    trajectory = Trajectory(list(config.loss_terms), [o.name for o in config.objectives], config.digest())
    writer = TrajectoryWriter(out_path, trajectory) if out_path is not None else None
    state = process.initial_state(train_ss)
    weights = tuple(float(v) for v in config.initial_weights)
    try:
        for stage in range(config.stages):
            decision = None
            if stage > 0:
                weights, decision = policy.next_weights(trajectory, weights)
                weights = tuple(float(v) for v in bounds.validate(weights, m))
            state, report = process.train_stage(state, weights, config.iterations_per_stage, pool)
            feedback = process.evaluate(state, config.objectives, test_set, stage)
            entry = TrajectoryEntry(stage, weights, tuple(feedback), report, decision)
            trajectory.entries.append(entry)
            if writer is not None:
                writer.append(entry)
            log.info("stage %d weights=%s feedback=%s", stage, weights, [fb.aggregate for fb in feedback])
    finally:
        if writer is not None:
            writer.close()
    return trajectory
