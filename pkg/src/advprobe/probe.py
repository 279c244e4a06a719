"""Masked projected-gradient probing.

A probe is a perturbation confined to a per-image pixel region and an
l-infinity budget, grown by untargeted gradient ascent on the mean
cross-entropy of the true labels. The projection order per step is:

    delta <- clip(delta + step * sign(grad), -budget, budget)
    delta <- delta * region_mask
    delta <- box-projected so x + delta stays in [0,1]

The box projection rewrites only pixels that actually leave [0,1]
(delta <- 1-x or -x there); re-deriving delta as clip(x+delta)-x on every
pixel can inflate |delta| past the budget by one rounding ulp.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import forward_pixels, input_gradient_pixels

PROBE_STEP_MODES = ("fixed", "scaled")


@dataclass
class ProbeConfig:
    steps: int = 40
    step_size: float = 0.001
    random_start: bool = False
    step_mode: str = "fixed"    # "scaled" uses budget/10 per step instead

    def __post_init__(self):
        if self.step_mode not in PROBE_STEP_MODES:
            raise ValueError(f"unknown step_mode {self.step_mode!r}")
        if self.steps < 1:
            raise ValueError("steps must be positive")

    def effective_step(self, budget):
        return self.step_size if self.step_mode == "fixed" else budget / 10.0

    def to_dict(self):
        return {"steps": self.steps, "step_size": self.step_size,
                "random_start": self.random_start,
                "step_mode": self.step_mode}


@dataclass
class ProbeState:
    regions: np.ndarray          # (N,H,W) bool
    budget: float
    probes: np.ndarray           # (N,C,H,W) float64, support inside regions
    asr_a: float
    attempts: int = 1

    def probed_pixels(self, pixels):
        return pixels.astype(np.float64) + self.probes


def _as_region_masks(regions, pixels):
    r = np.asarray(regions)
    n, _, h, w = pixels.shape
    if r.shape != (n, h, w):
        raise ValueError(
            f"regions must be shaped (N,H,W)={(n, h, w)}, got {r.shape}")
    r = r.astype(bool)
    empty = ~r.any(axis=(1, 2))
    if empty.any():
        raise ValueError(
            f"region of image {int(np.flatnonzero(empty)[0])} is all zero")
    return r


def full_regions(batch):
    n, _, h, w = batch.pixels.shape
    return np.ones((n, h, w), bool)


def _box_project(x, delta):
    """Shrink delta exactly where x + delta leaves [0,1]; never grows |delta|."""
    probed = x + delta
    return np.where(probed > 1.0, 1.0 - x, np.where(probed < 0.0, -x, delta))


def masked_pgd(model, batch, regions, budget, config=None, seed=0):
    """Run the masked attack and return the resulting ProbeState."""
    config = config or ProbeConfig()
    if not 0.0 < budget <= 1.0:
        raise ValueError(f"budget must lie in (0,1], got {budget}")
    x = batch.pixels.astype(np.float64)
    y = batch.labels
    r = _as_region_masks(regions, x)
    mask = r[:, None, :, :]
    step = config.effective_step(budget)

    if config.random_start:
        rng = np.random.default_rng(np.random.SeedSequence([307, seed]))
        delta = rng.uniform(-budget, budget, size=x.shape)
        delta *= mask
        delta = _box_project(x, delta)
    else:
        delta = np.zeros_like(x)

    for _ in range(config.steps):
        grad = input_gradient_pixels(model, x + delta, y)
        delta = np.clip(delta + step * np.sign(grad), -budget, budget)
        delta *= mask
        delta = _box_project(x, delta)

    state = ProbeState(regions=r, budget=float(budget), probes=delta,
                       asr_a=asr_a(model, batch, delta))
    return state


def asr_a(model, batch, probes):
    """Fraction of probed samples classified as anything but their label."""
    probed = batch.pixels.astype(np.float64) + probes
    pred = forward_pixels(model, probed).argmax(axis=1)
    return float(np.mean(pred != batch.labels))
