"""Loss repository: differentiable loss terms and their weighted composition.

Every term is mean-reduced over batch and pixels and ships a hand-written
gradient with respect to the prediction.  Images are float arrays whose last
two axes are spatial.

Default repository (M=3) is ``l1, edge, tv``.  ``mse`` and ``ssim_proxy``
extend it to M=5.  ``neg_sharpness`` turns the sharpness objective itself into
a loss; it is unbounded below and exists only to reproduce the
objective-as-loss comparison on the toy restorer.  Do not use it for real runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .imageops import (
    as_batch,
    diff_x,
    diff_x_adjoint,
    diff_y,
    diff_y_adjoint,
    has_laplacian_support,
    laplacian,
    laplacian_adjoint,
)

DEFAULT_TERMS = ("l1", "edge", "tv")
EXTENDED_TERMS = ("l1", "edge", "tv", "mse", "ssim_proxy")

_FORBIDDEN_ID_CHARS = set(":=")

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class WeightBounds:
    lower: float = 0.0
    upper: float = 10.0

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise ConfigError("weight bounds must be finite")
        if self.lower > self.upper:
            raise ConfigError(f"lower bound {self.lower} exceeds upper bound {self.upper}")

    def validate(self, values: Sequence[float], m: int | None = None) -> np.ndarray:
        """Return ``values`` as an array after checking the LossWeights invariants."""
        w = np.asarray(values, dtype=np.float64)
        if w.ndim != 1:
            raise DimensionError(f"weights must be a flat vector, got shape {w.shape}")
        if m is not None and w.size != m:
            raise DimensionError(f"expected {m} weights, got {w.size}")
        if not np.all(np.isfinite(w)):
            raise NumericError(f"non-finite weight in {w.tolist()}")
        if np.any(w < self.lower) or np.any(w > self.upper):
            raise ConfigError(f"weights {w.tolist()} outside bounds [{self.lower}, {self.upper}]")
        return w

    def clip(self, values: Sequence[float]) -> tuple[np.ndarray, bool]:
        w = np.asarray(values, dtype=np.float64)
        clipped = np.clip(w, self.lower, self.upper)
        return clipped, bool(np.any(clipped != w))


@dataclass(frozen=True)
class LossTerm:
    id: str
    description: str
    requires_reference: bool
    value: Callable[[np.ndarray, np.ndarray], float] = field(repr=False, compare=False)
    gradient: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(repr=False, compare=False)

    def __post_init__(self):
        if not self.id or any(c.isspace() or c in _FORBIDDEN_ID_CHARS for c in self.id):
            raise ConfigError(f"invalid loss term id {self.id!r}")


# ---------------------------------------------------------------- term bodies


def _l1(p, t):
    return float(np.mean(np.abs(p - t)))


def _l1_grad(p, t):
    return np.sign(p - t) / p.size


def _mse(p, t):
    return float(np.mean((p - t) ** 2))


def _mse_grad(p, t):
    return 2.0 * (p - t) / p.size


def _edge(p, t):
    r = p - t
    return float((np.abs(diff_x(r)).sum() + np.abs(diff_y(r)).sum()) / p.size)


def _edge_grad(p, t):
    r = p - t
    g = diff_x_adjoint(np.sign(diff_x(r)), r.shape) + diff_y_adjoint(np.sign(diff_y(r)), r.shape)
    return g / p.size


def _tv(p, t):
    return float((np.abs(diff_x(p)).sum() + np.abs(diff_y(p)).sum()) / p.size)


def _tv_grad(p, t):
    g = diff_x_adjoint(np.sign(diff_x(p)), p.shape) + diff_y_adjoint(np.sign(diff_y(p)), p.shape)
    return g / p.size


def _per_image(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-2] * a.shape[-1])


def _ssim_parts(p, t):
    pf, tf = _per_image(p), _per_image(t)
    mp, mt = pf.mean(axis=1), tf.mean(axis=1)
    dp, dt = pf - mp[:, None], tf - mt[:, None]
    vp, vt = (dp**2).mean(axis=1), (dt**2).mean(axis=1)
    cov = (dp * dt).mean(axis=1)
    a = 2 * mp * mt + SSIM_C1
    b = 2 * cov + SSIM_C2
    c = mp**2 + mt**2 + SSIM_C1
    d = vp + vt + SSIM_C2
    return pf, tf, mp, mt, dp, dt, a, b, c, d


def _ssim_proxy(p, t):
    *_, a, b, c, d = _ssim_parts(p, t)
    return float(np.mean(1.0 - a * b / (c * d)))


def _ssim_proxy_grad(p, t):
    pf, tf, mp, mt, dp, dt, a, b, c, d = _ssim_parts(p, t)
    n = pf.shape[1]
    s = a * b / (c * d)
    da = (2 * mt / n)[:, None]
    db = 2 * dt / n
    dc = (2 * mp / n)[:, None]
    dd = 2 * dp / n
    ds = s[:, None] * (da / a[:, None] + db / b[:, None] - dc / c[:, None] - dd / d[:, None])
    return (-ds / pf.shape[0]).reshape(p.shape)


def _neg_sharpness(p, t):
    if not has_laplacian_support(p.shape):
        return 0.0
    lap = _per_image(laplacian(p))
    return float(-np.mean(lap.var(axis=1)))


def _neg_sharpness_grad(p, t):
    if not has_laplacian_support(p.shape):
        return np.zeros(p.shape)
    lap = laplacian(p)
    flat = _per_image(lap)
    n_img, n = flat.shape
    dlap = (2.0 * (flat - flat.mean(axis=1, keepdims=True)) / n).reshape(lap.shape)
    return -laplacian_adjoint(dlap, p.shape) / n_img


TERMS: dict[str, LossTerm] = {
    t.id: t
    for t in (
        LossTerm("l1", "mean absolute pixel error (fidelity)", True, _l1, _l1_grad),
        LossTerm(
            "edge",
            "mean absolute difference of horizontal/vertical gradients (structure, perceptual proxy)",
            True,
            _edge,
            _edge_grad,
        ),
        LossTerm(
            "tv",
            "total variation of the prediction (smoothness/regularity, realism proxy)",
            False,
            _tv,
            _tv_grad,
        ),
        LossTerm("mse", "mean squared pixel error (fidelity)", True, _mse, _mse_grad),
        LossTerm(
            "ssim_proxy",
            "one minus global-statistics SSIM per image (structure)",
            True,
            _ssim_proxy,
            _ssim_proxy_grad,
        ),
        LossTerm(
            "neg_sharpness",
            "negative Laplacian variance; the sharpness objective used directly as a loss (unstable)",
            False,
            _neg_sharpness,
            _neg_sharpness_grad,
        ),
    )
}


def get_term(term_id: str) -> LossTerm:
    try:
        return TERMS[term_id]
    except KeyError:
        raise KeyError(f"unknown loss term {term_id!r}; known: {sorted(TERMS)}") from None


def _check_pair(prediction, target) -> tuple[np.ndarray, np.ndarray]:
    p = as_batch(prediction, "prediction")
    t = as_batch(target, "target")
    if p.shape != t.shape:
        raise DimensionError(f"prediction shape {p.shape} != target shape {t.shape}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t))):
        raise NumericError("non-finite pixel values")
    return p, t


# ------------------------------------------------------------------ operations


def compose(weights: Sequence[float], losses: Sequence[float]) -> float:
    """Weighted sum of per-term losses, accumulated strictly left to right."""
    w = np.asarray(weights, dtype=np.float64)
    l = np.asarray(losses, dtype=np.float64)
    if w.shape != l.shape or w.ndim != 1:
        raise DimensionError(f"weights {w.shape} and losses {l.shape} must be equal-length vectors")
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(l))):
        raise NumericError("compose received a non-finite value")
    total = 0.0
    for wm, lm in zip(w.tolist(), l.tolist()):
        total += wm * lm
    return total


def evaluate_losses(prediction, target, terms: Sequence[str] = DEFAULT_TERMS) -> np.ndarray:
    p, t = _check_pair(prediction, target)
    return np.array([get_term(tid).value(p, t) for tid in terms])


def loss_gradient(term_id: str, prediction, target) -> np.ndarray:
    term = get_term(term_id)
    p, t = _check_pair(prediction, target)
    return term.gradient(p, t)


class LossRepository:
    """Ordered set of loss terms.  Stateless apart from the term list."""

    def __init__(self, term_ids: Sequence[str] = DEFAULT_TERMS):
        ids = list(term_ids)
        if not ids:
            raise ConfigError("loss repository needs at least one term")
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate loss term ids in {ids}")
        self.terms = [get_term(tid) for tid in ids]

    @property
    def ids(self) -> list[str]:
        return [t.id for t in self.terms]

    def __len__(self) -> int:
        return len(self.terms)

    def evaluate(self, prediction, target) -> np.ndarray:
        return evaluate_losses(prediction, target, self.ids)

    def weighted_gradient(self, weights: Sequence[float], prediction, target) -> np.ndarray:
        """Gradient of ``compose(weights, evaluate(...))`` w.r.t. the prediction."""
        p, t = _check_pair(prediction, target)
        g = np.zeros(p.shape)
        for w, term in zip(weights, self.terms):
            if w != 0.0:
                g += w * term.gradient(p, t)
        return g
