"""External evaluation experts: score and textual feedback on restored images.

Built-in experts
----------------
``psnr``        full-reference, higher is better, capped at 100 dB
``neg_l1``      full-reference, higher is better
``sharpness``   no-reference Laplacian variance, higher is better
``smoothness``  no-reference negative total variation, higher is better
``text_critic`` textual; bands a PSNR proxy into poor/fair/good/excellent

A remote expert speaks JSON over HTTP::

    POST <url>
    {"expert_id": str, "outputs": [[[float]]], "references": [[[float]]] | null}
    -> {"per_image": [float | str, ...]}

``per_image`` must hold one entry per output image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .errors import BackendError, ConfigError, DimensionError, UnsupportedKindError
from .imageops import as_batch, diff_x, diff_y, has_laplacian_support, laplacian

PSNR_CAP = 100.0
BANDS = ("poor", "fair", "good", "excellent")


class ObjectiveSpec(BaseModel):
    """One optimization objective, backed by an expert."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    expert_id: str
    kind: Literal["score", "textual"] = "score"
    direction: Optional[Literal["higher_better", "lower_better"]] = None
    needs_reference: Optional[bool] = None

    @model_validator(mode="after")
    def _direction_matches_kind(self):
        if self.kind == "score" and self.direction is None:
            raise ValueError(f"score objective {self.name!r} needs a direction")
        if self.kind == "textual" and self.direction is not None:
            raise ValueError(f"textual objective {self.name!r} must not carry a direction")
        return self


@dataclass(frozen=True)
class Feedback:
    objective_name: str
    kind: str
    per_image: tuple
    aggregate: Union[float, str]
    stage_index: int = 0

    def to_dict(self) -> dict:
        return {
            "objective_name": self.objective_name,
            "kind": self.kind,
            "per_image": list(self.per_image),
            "aggregate": self.aggregate,
            "stage_index": self.stage_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Feedback":
        return cls(
            objective_name=d["objective_name"],
            kind=d["kind"],
            per_image=tuple(d["per_image"]),
            aggregate=d["aggregate"],
            stage_index=int(d["stage_index"]),
        )


def score_feedback(name: str, per_image: Sequence[float], stage_index: int = 0) -> Feedback:
    values = tuple(float(v) for v in per_image)
    if not values:
        raise DimensionError("feedback needs at least one image")
    return Feedback(name, "score", values, math.fsum(values) / len(values), stage_index)


# ------------------------------------------------------------- per-image metrics


def psnr_per_image(outputs: np.ndarray, references: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    flat_o = outputs.reshape(-1, outputs.shape[-2] * outputs.shape[-1])
    flat_r = references.reshape(flat_o.shape)
    mse = np.mean((flat_o - flat_r) ** 2, axis=1)
    with np.errstate(divide="ignore"):
        vals = 10.0 * np.log10(data_range**2 / mse)
    return np.minimum(vals, PSNR_CAP)


def neg_l1_per_image(outputs, references):
    d = np.abs(outputs - references)
    return -d.reshape(-1, d.shape[-2] * d.shape[-1]).mean(axis=1)


def sharpness_per_image(outputs, references=None):
    n = int(np.prod(outputs.shape[:-2], dtype=int))
    if not has_laplacian_support(outputs.shape):
        return np.zeros(n)
    lap = laplacian(outputs)
    return lap.reshape(n, -1).var(axis=1)


def smoothness_per_image(outputs, references=None):
    n = int(np.prod(outputs.shape[:-2], dtype=int))
    pixels = outputs.shape[-2] * outputs.shape[-1]
    tv = np.abs(diff_x(outputs)).reshape(n, -1).sum(axis=1) + np.abs(diff_y(outputs)).reshape(n, -1).sum(axis=1)
    return -tv / pixels


# -------------------------------------------------------------------- experts


@dataclass(frozen=True)
class ScoreExpert:
    id: str
    needs_reference: bool
    direction: str
    fn: Callable[..., np.ndarray] = field(repr=False, compare=False)
    kind: str = "score"

    def per_image(self, outputs: np.ndarray, references: np.ndarray | None) -> list[float]:
        return [float(v) for v in self.fn(outputs, references)]


@dataclass(frozen=True)
class TextCritic:
    """Deterministic template critic standing in for an MLLM judge.

    The proxy score (PSNR by default) is clamped into ``score_range`` and
    banded by the range quartiles; a score exactly on a boundary takes the
    lower band.
    """

    id: str = "text_critic"
    proxy: str = "psnr"
    score_range: tuple[float, float] = (10.0, 40.0)
    max_chars: int = 400
    kind: str = "textual"
    direction: None = None

    @property
    def needs_reference(self) -> bool:
        return get_expert(self.proxy).needs_reference

    def boundaries(self) -> tuple[float, float, float]:
        lo, hi = self.score_range
        step = (hi - lo) / 4.0
        return (lo + step, lo + 2 * step, lo + 3 * step)

    def band(self, proxy_score: float) -> int:
        return sum(proxy_score > b for b in self.boundaries())

    def describe(self, index: int, proxy_score: float, sharp: float) -> str:
        band = BANDS[self.band(proxy_score)]
        detail = "crisp" if sharp > 0.05 else "moderate" if sharp > 0.01 else "soft"
        text = (
            f"Image {index + 1}: {band} quality overall; "
            f"{get_expert(self.proxy).id} proxy {proxy_score:.2f}; fine detail looks {detail}."
        )
        return text[: self.max_chars]

    def per_image(self, outputs: np.ndarray, references: np.ndarray | None) -> list[str]:
        proxy = get_expert(self.proxy).per_image(outputs, references)
        sharp = sharpness_per_image(outputs)
        return [self.describe(i, s, float(k)) for i, (s, k) in enumerate(zip(proxy, sharp))]


class RemoteExpert:
    """Client side of the remote-expert JSON protocol (see module docstring)."""

    def __init__(
        self,
        id: str,
        url: str,
        *,
        kind: str = "score",
        direction: str | None = "higher_better",
        needs_reference: bool = False,
        timeout: float = 60.0,
        client=None,
    ):
        self.id = id
        self.url = url
        self.kind = kind
        self.direction = direction
        self.needs_reference = needs_reference
        self.timeout = timeout
        self._client = client

    def per_image(self, outputs: np.ndarray, references: np.ndarray | None) -> list:
        import httpx

        payload = {
            "expert_id": self.id,
            "outputs": outputs.tolist(),
            "references": None if references is None else references.tolist(),
        }
        try:
            if self._client is not None:
                resp = self._client.post(self.url, json=payload, timeout=self.timeout)
            else:
                resp = httpx.post(self.url, json=payload, timeout=self.timeout)
        except httpx.TimeoutException as exc:
            raise BackendError(str(exc), "timeout") from exc
        except httpx.HTTPError as exc:
            raise BackendError(str(exc), "transport") from exc
        if not 200 <= resp.status_code < 300:
            raise BackendError(f"expert returned HTTP {resp.status_code}", "http_status")
        try:
            values = resp.json()["per_image"]
        except (ValueError, KeyError, TypeError) as exc:
            raise BackendError(f"malformed expert response: {exc}", "malformed") from exc
        n = int(np.prod(outputs.shape[:-2], dtype=int))
        if not isinstance(values, list) or len(values) != n:
            raise BackendError(f"expected {n} per-image values", "malformed")
        return values


EXPERTS: dict[str, object] = {
    e.id: e
    for e in (
        ScoreExpert("psnr", True, "higher_better", lambda o, r: psnr_per_image(o, r)),
        ScoreExpert("neg_l1", True, "higher_better", neg_l1_per_image),
        ScoreExpert("sharpness", False, "higher_better", sharpness_per_image),
        ScoreExpert("smoothness", False, "higher_better", smoothness_per_image),
        TextCritic(),
    )
}


def get_expert(expert_id: str):
    try:
        return EXPERTS[expert_id]
    except KeyError:
        raise ConfigError(f"unknown expert {expert_id!r}; known: {sorted(EXPERTS)}") from None


def register_expert(expert) -> None:
    EXPERTS[expert.id] = expert


def _prepare(expert, outputs, references):
    out = as_batch(outputs, "outputs")
    if out.ndim == 2:
        out = out[None]
    ref = None
    if references is not None:
        ref = as_batch(references, "references")
        if ref.ndim == 2:
            ref = ref[None]
        if ref.shape != out.shape:
            raise DimensionError(f"outputs {out.shape} vs references {ref.shape}")
    if expert.needs_reference and ref is None:
        raise ConfigError(f"expert {expert.id!r} is full-reference but no references were given")
    return out, ref


def score(expert_id: str, outputs, references=None, *, objective_name: str | None = None, stage_index: int = 0) -> Feedback:
    expert = get_expert(expert_id)
    if expert.kind != "score":
        raise UnsupportedKindError(f"expert {expert_id!r} is {expert.kind}, not score")
    out, ref = _prepare(expert, outputs, references)
    return score_feedback(objective_name or expert_id, expert.per_image(out, ref), stage_index)


def textual_critique(
    expert_id: str, outputs, references=None, *, objective_name: str | None = None, stage_index: int = 0
) -> Feedback:
    expert = get_expert(expert_id)
    if expert.kind != "textual":
        raise UnsupportedKindError(f"expert {expert_id!r} is {expert.kind}, not textual")
    out, ref = _prepare(expert, outputs, references)
    texts = tuple(str(t) for t in expert.per_image(out, ref))
    return Feedback(objective_name or expert_id, "textual", texts, " | ".join(texts), stage_index)


def evaluate_objective(spec: ObjectiveSpec, outputs, references=None, stage_index: int = 0) -> Feedback:
    expert = get_expert(spec.expert_id)
    if expert.kind != spec.kind:
        raise ConfigError(f"objective {spec.name!r} is {spec.kind} but expert {spec.expert_id!r} is {expert.kind}")
    if not expert.needs_reference and not spec.needs_reference:
        references = None
    if spec.kind == "score":
        return score(spec.expert_id, outputs, references, objective_name=spec.name, stage_index=stage_index)
    return textual_critique(spec.expert_id, outputs, references, objective_name=spec.name, stage_index=stage_index)


def improvement(previous: Feedback, current: Feedback, spec: ObjectiveSpec) -> float:
    """Signed progress from ``previous`` to ``current``; positive means better."""
    if previous.kind != "score" or current.kind != "score" or spec.kind != "score":
        raise UnsupportedKindError("improvement is only defined for score feedback")
    if previous.objective_name != current.objective_name:
        raise ConfigError("improvement compares feedback of two different objectives")
    delta = float(current.aggregate) - float(previous.aggregate)
    return delta if spec.direction == "higher_better" else -delta
