"""Procedural synthetic images and their degradations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.ndimage import uniform_filter

from .process import TestSet, TrainingPool


class DatasetSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    count: int = Field(8, ge=1, description="training pool size")
    height: int = Field(24, ge=1)
    width: int = Field(24, ge=1)
    degradation: Literal["gaussian_noise", "box_blur", "both"] = "both"
    noise_sigma: float = Field(0.005, ge=0.0)
    blur_size: int = Field(3, ge=1)
    seed: int = 0


@dataclass(frozen=True)
class SyntheticData:
    pool: TrainingPool
    test_set: TestSet


def clean_image(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """A gradient + rectangles + sinusoid mixture in [0, 1]."""
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width, 2)
    angle = rng.uniform(0, 2 * np.pi)
    img = 0.3 + 0.3 * (np.cos(angle) * xx + np.sin(angle) * yy)
    for _ in range(int(rng.integers(1, 4))):
        y0, x0 = rng.integers(0, height), rng.integers(0, width)
        h, w = rng.integers(1, max(height // 2, 1) + 1), rng.integers(1, max(width // 2, 1) + 1)
        img[y0 : y0 + h, x0 : x0 + w] = rng.uniform(0.0, 1.0)
    freq = rng.uniform(1.0, 4.0)
    phase = rng.uniform(0, 2 * np.pi)
    img += rng.uniform(0.0, 0.15) * np.sin(2 * np.pi * freq * (xx + yy) + phase)
    return np.clip(img, 0.0, 1.0)


def degrade(clean: np.ndarray, spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    out = clean.copy()
    if spec.degradation in ("box_blur", "both") and spec.blur_size > 1:
        out = uniform_filter(out, size=(1, spec.blur_size, spec.blur_size), mode="nearest")
    if spec.degradation in ("gaussian_noise", "both") and spec.noise_sigma > 0:
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    return out


def _seq(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def synthesize_images(spec: DatasetSpec, count: int, seed) -> tuple[np.ndarray, np.ndarray]:
    content_seed, noise_seed = _seq(seed).spawn(2)
    content_rng = np.random.default_rng(content_seed)
    clean = np.stack([clean_image(content_rng, spec.height, spec.width) for _ in range(count)])
    return degrade(clean, spec, np.random.default_rng(noise_seed)), clean


def synthesize_dataset(spec: DatasetSpec, test_size: int = 10) -> SyntheticData:
    """Deterministic training pool plus an independent test panel of ``test_size`` images."""
    pool_seed, test_seed = np.random.SeedSequence(spec.seed).spawn(2)
    degraded, clean = synthesize_images(spec, spec.count, pool_seed)
    t_degraded, t_clean = synthesize_images(spec, test_size, test_seed)
    return SyntheticData(TrainingPool(degraded, clean), TestSet(t_degraded, t_clean))
