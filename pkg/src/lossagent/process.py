"""Trainable processes: the toy convolutional restorer and an analytic response surface.

Both expose the same surface used by the orchestrator::

    initial_state(seed) -> ProcessState
    train_stage(state, weights, iterations, data_source) -> (ProcessState, StageReport)
    evaluate(state, objectives, test_set, stage_index) -> list[Feedback]

``train_stage`` never mutates its input; it returns a fresh state.

Checkpoint layout (little-endian)::

    offset  size  field
    0       8     magic  b"LAGCKPT\\x00"
    8       4     uint32 format version (1)
    12      8     uint64 parameter count P
    20      8     uint64 stage_index
    28      8     uint64 iteration_count
    36      8*P   float64 parameters
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .errors import DimensionError, LoadError, NumericError, TrainingDiverged
from .experts import Feedback, ObjectiveSpec, evaluate_objective, score_feedback
from .imageops import as_batch
from .losses import LossRepository, compose

DEFAULT_LEARNING_RATE = 1e-4

CHECKPOINT_MAGIC = b"LAGCKPT\x00"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIQQQ")


@dataclass(frozen=True)
class ProcessState:
    parameters: np.ndarray = field(repr=False)
    stage_index: int = 0
    iteration_count: int = 0
    rng_state: Optional[dict] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        params = np.array(self.parameters, dtype=np.float64).ravel()
        params.setflags(write=False)
        object.__setattr__(self, "parameters", params)

    def __eq__(self, other):
        if not isinstance(other, ProcessState):
            return NotImplemented
        return (
            self.stage_index == other.stage_index
            and self.iteration_count == other.iteration_count
            and np.array_equal(self.parameters, other.parameters)
            and self.rng_state == other.rng_state
        )

    def rng(self) -> np.random.Generator:
        gen = np.random.Generator(np.random.PCG64())
        if self.rng_state is not None:
            gen.bit_generator.state = self.rng_state
        return gen


@dataclass(frozen=True)
class StageReport:
    mean_composed_loss: float
    mean_per_term_loss: tuple[float, ...]
    steps_taken: int

    def to_dict(self) -> dict:
        return {
            "mean_composed_loss": self.mean_composed_loss,
            "mean_per_term_loss": list(self.mean_per_term_loss),
            "steps_taken": self.steps_taken,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageReport":
        return cls(float(d["mean_composed_loss"]), tuple(float(v) for v in d["mean_per_term_loss"]), int(d["steps_taken"]))


@dataclass(frozen=True)
class TestSet:
    degraded: np.ndarray = field(repr=False)
    clean: Optional[np.ndarray] = field(default=None, repr=False)

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.degraded.ndim != 3 or self.degraded.shape[0] < 1:
            raise DimensionError(f"test set needs shape (T, H, W) with T >= 1, got {self.degraded.shape}")
        if self.clean is not None and self.clean.shape != self.degraded.shape:
            raise DimensionError("clean and degraded test images must be index-aligned")

    @property
    def size(self) -> int:
        return int(self.degraded.shape[0])


@dataclass(frozen=True)
class TrainingPool:
    """Fixed (degraded, clean) training pool.  ``batch_size=None`` means full batch."""

    degraded: np.ndarray = field(repr=False)
    clean: np.ndarray = field(repr=False)
    batch_size: Optional[int] = None

    def batch(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if self.batch_size is None or self.batch_size >= len(self.degraded):
            return self.degraded, self.clean
        idx = np.sort(rng.choice(len(self.degraded), size=self.batch_size, replace=False))
        return self.degraded[idx], self.clean[idx]


class DataSource(Protocol):
    def batch(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]: ...


# ----------------------------------------------------------------- toy restorer


def conv2d_same(images: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded 2-D cross-correlation of every image with one odd-sized kernel."""
    k = kernel.shape[0]
    r = k // 2
    h, w = images.shape[-2:]
    padded = np.pad(images, [(0, 0)] * (images.ndim - 2) + [(r, r), (r, r)])
    out = np.zeros(images.shape)
    for u in range(k):
        for v in range(k):
            if kernel[u, v] != 0.0:
                out += kernel[u, v] * padded[..., u : u + h, v : v + w]
    return out


def conv2d_kernel_grad(images: np.ndarray, grad_out: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    h, w = images.shape[-2:]
    padded = np.pad(images, [(0, 0)] * (images.ndim - 2) + [(r, r), (r, r)])
    g = np.empty((k, k))
    for u in range(k):
        for v in range(k):
            g[u, v] = np.sum(grad_out * padded[..., u : u + h, v : v + w])
    return g


class ToyRestorer:
    """Single k x k convolution kernel, zero padding, no bias, no nonlinearity.

    Trained by plain full-batch SGD on ``compose(weights, losses)``.
    """

    def __init__(
        self,
        repository: LossRepository,
        kernel_size: int = 5,
        learning_rate: float = DEFAULT_LEARNING_RATE,
    ):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        self.repository = repository
        self.kernel_size = kernel_size
        self.learning_rate = learning_rate

    def identity_kernel(self) -> np.ndarray:
        k = np.zeros((self.kernel_size, self.kernel_size))
        k[self.kernel_size // 2, self.kernel_size // 2] = 1.0
        return k

    def initial_state(self, seed: int | np.random.SeedSequence | None = 0) -> ProcessState:
        gen = np.random.Generator(np.random.PCG64(seed))
        return ProcessState(self.identity_kernel().ravel(), 0, 0, gen.bit_generator.state)

    def kernel(self, state: ProcessState) -> np.ndarray:
        if state.parameters.size != self.kernel_size**2:
            raise DimensionError(f"state has {state.parameters.size} parameters, kernel needs {self.kernel_size**2}")
        return state.parameters.reshape(self.kernel_size, self.kernel_size)

    def infer(self, state: ProcessState, degraded) -> np.ndarray:
        x = as_batch(degraded, "degraded")
        return conv2d_same(x, self.kernel(state))

    def validation_loss(self, state: ProcessState, weights: Sequence[float], degraded, clean) -> float:
        return compose(weights, self.repository.evaluate(self.infer(state, degraded), clean))

    def train_stage(
        self,
        state: ProcessState,
        weights: Sequence[float],
        iterations: int,
        data_source: DataSource,
    ) -> tuple[ProcessState, StageReport]:
        if iterations < 0:
            raise ValueError("iterations must be >= 0")
        w = np.asarray(weights, dtype=np.float64)
        if w.size != len(self.repository):
            raise DimensionError(f"{w.size} weights for {len(self.repository)} loss terms")
        rng = state.rng()
        kernel = self.kernel(state).copy()
        k = self.kernel_size
        lr = self.learning_rate
        composed_sum = 0.0
        per_term_sum = np.zeros(len(self.repository))

        for step in range(iterations):
            degraded, clean = data_source.batch(rng)
            pred = conv2d_same(degraded, kernel)
            if not np.all(np.isfinite(pred)):
                raise TrainingDiverged(state.stage_index, step, "non-finite prediction")
            losses = self.repository.evaluate(pred, clean)
            composed = compose(w, losses) if np.all(np.isfinite(losses)) else float("nan")
            if not np.isfinite(composed):
                raise TrainingDiverged(state.stage_index, step)
            composed_sum += composed
            per_term_sum += losses
            grad_out = self.repository.weighted_gradient(w, pred, clean)
            kernel -= lr * conv2d_kernel_grad(degraded, grad_out, k)
            if not np.all(np.isfinite(kernel)):
                raise TrainingDiverged(state.stage_index, step, "non-finite parameters")

        if iterations:
            mean_composed = composed_sum / iterations
            mean_terms = per_term_sum / iterations
        else:
            degraded, clean = data_source.batch(rng)
            mean_terms = self.repository.evaluate(conv2d_same(degraded, kernel), clean)
            mean_composed = compose(w, mean_terms)

        new_state = ProcessState(
            kernel.ravel(),
            state.stage_index + 1,
            state.iteration_count + iterations,
            rng.bit_generator.state,
        )
        report = StageReport(float(mean_composed), tuple(float(v) for v in mean_terms), iterations)
        return new_state, report

    def evaluate(
        self, state: ProcessState, objectives: Sequence[ObjectiveSpec], test_set: TestSet, stage_index: int
    ) -> list[Feedback]:
        outputs = self.infer(state, test_set.degraded)
        return [evaluate_objective(obj, outputs, test_set.clean, stage_index) for obj in objectives]


# ------------------------------------------------------------- response surface


class ResponseSurface:
    """Analytic process whose score is ``1 - ||w - optimum||^2`` for the last weights used.

    The state's parameters hold the weights of the most recent stage.
    """

    expert_id = "surface"

    def __init__(self, optimum: Sequence[float]):
        self.optimum = np.asarray(optimum, dtype=np.float64)
        if self.optimum.ndim != 1 or not np.all(np.isfinite(self.optimum)):
            raise NumericError("surface optimum must be a finite vector")

    def value(self, weights: Sequence[float]) -> float:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != self.optimum.shape:
            raise DimensionError(f"weights {w.shape} vs surface optimum {self.optimum.shape}")
        d = w - self.optimum
        return 1.0 - float(np.dot(d, d))

    def surface_feedback(self, history: Sequence[Sequence[float]]) -> float:
        if len(history) == 0:
            raise ValueError("history must be non-empty")
        return self.value(history[-1])

    def initial_state(self, seed: int | np.random.SeedSequence | None = 0) -> ProcessState:
        gen = np.random.Generator(np.random.PCG64(seed))
        return ProcessState(np.zeros_like(self.optimum), 0, 0, gen.bit_generator.state)

    def train_stage(self, state, weights, iterations, data_source=None):
        if iterations < 0:
            raise ValueError("iterations must be >= 0")
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != self.optimum.shape:
            raise DimensionError(f"weights {w.shape} vs surface optimum {self.optimum.shape}")
        sq = (w - self.optimum) ** 2
        new_state = ProcessState(w, state.stage_index + 1, state.iteration_count + iterations, state.rng_state)
        return new_state, StageReport(float(sq.sum()), tuple(float(v) for v in sq), iterations)

    def evaluate(self, state, objectives, test_set: TestSet, stage_index: int) -> list[Feedback]:
        value = self.value(state.parameters)
        out = []
        for obj in objectives:
            if obj.kind != "score":
                raise NumericError("the response surface only produces score feedback")
            out.append(score_feedback(obj.name, [value] * test_set.size, stage_index))
        return out


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(state: ProcessState, path: str | Path) -> None:
    params = np.ascontiguousarray(state.parameters, dtype="<f8")
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.size, state.stage_index, state.iteration_count)
    Path(path).write_bytes(header + params.tobytes())


def load_checkpoint(path: str | Path) -> ProcessState:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise LoadError("checkpoint shorter than its header")
    magic, version, count, stage, iters = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise LoadError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise LoadError(f"unsupported checkpoint version {version}")
    body = data[_HEADER.size :]
    if len(body) != 8 * count:
        raise LoadError(f"checkpoint declares {count} parameters but holds {len(body) // 8}")
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return ProcessState(params, int(stage), int(iters), None)


