"""Per-stage attack regions: gradient-guided top-k shrinking plus a random
baseline. Masks are per image, binary over pixels, with equal cardinality
across the batch at every stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ScheduleExhausted(Exception):
    """Raised when the next region would be empty."""


@dataclass
class RegionSchedule:
    alpha: float = 0.5
    stop_fraction: float = 0.03

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0,1)")
        if not 0.0 < self.stop_fraction <= 1.0:
            raise ValueError("stop_fraction must lie in (0,1]")

    def to_dict(self):
        return {"alpha": self.alpha, "stop_fraction": self.stop_fraction}


def stage_plan(image_shape, schedule=None):
    """Region cardinalities per stage: halved (by alpha) until below the
    stop fraction of the whole image."""
    schedule = schedule or RegionSchedule()
    h, w = image_shape[-2], image_shape[-1]
    total = h * w
    floor_card = math.ceil(schedule.stop_fraction * total)
    plan = [total]
    nxt = int(math.floor(schedule.alpha * total))
    while nxt >= floor_card and nxt > 0:
        plan.append(nxt)
        nxt = int(math.floor(schedule.alpha * nxt))
    return plan


def _cardinalities(prev_regions):
    counts = prev_regions.reshape(prev_regions.shape[0], -1).sum(axis=1)
    if not np.all(counts == counts[0]):
        raise ValueError("previous regions must share one cardinality")
    return int(counts[0])


def _next_k(prev_regions, alpha):
    k = int(math.floor(alpha * _cardinalities(prev_regions)))
    if k == 0:
        raise ScheduleExhausted("next region would be empty")
    return k


def attention_region(grads, prev_regions, alpha=0.5, nested=True):
    """Keep, per image, the k pixels with the largest channel-L2 gradient
    magnitude, k = floor(alpha * |previous region|).

    With nested=True (default) candidates are restricted to the previous
    region; ties break toward the lowest (row, col) index.
    """
    g = np.asarray(grads, np.float64)
    if g.ndim != 4:
        raise ValueError(f"grads must be (N,C,H,W), got shape {g.shape}")
    n, _, h, w = g.shape
    prev = np.asarray(prev_regions, bool)
    if prev.shape != (n, h, w):
        raise ValueError(
            f"prev_regions must be shaped {(n, h, w)}, got {prev.shape}")
    k = _next_k(prev, alpha)

    saliency = np.sqrt((g * g).sum(axis=1))       # (N,H,W)
    flat = saliency.reshape(n, -1)
    if nested:
        flat = np.where(prev.reshape(n, -1), flat, -1.0)
    # stable sort of negated values: descending magnitude, ties by index
    order = np.argsort(-flat, axis=1, kind="stable")[:, :k]
    out = np.zeros((n, h * w), bool)
    np.put_along_axis(out, order, True, axis=1)
    return out.reshape(n, h, w)


def random_region(prev_regions, alpha=0.5, seed=0):
    """Uniform without-replacement shrink inside each previous region."""
    prev = np.asarray(prev_regions, bool)
    n, h, w = prev.shape
    k = _next_k(prev, alpha)
    rng = np.random.default_rng(np.random.SeedSequence([311, seed]))
    out = np.zeros((n, h * w), bool)
    for i in range(n):
        pool = np.flatnonzero(prev[i].ravel())
        out[i, rng.choice(pool, size=k, replace=False)] = True
    return out.reshape(n, h, w)
