"""Backdoor trigger definitions and dataset poisoning.

A trigger pairs a pattern with an embedding strategy. Supported kinds:

    patch             solid square stamped at a fixed corner
    blend             whole-image alpha blend with a fixed smooth pattern
    warp              fixed low-frequency displacement-field resampling
                      (an approximation of warping-style attacks)
    per_sample_patch  3x3 checker placed at an image-content-derived spot
                      (an approximation of sample-specific attacks)
    multi_patch       1-5 random-colour 3x3 patches at the corners/centre
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

TRIGGER_KINDS = ("patch", "blend", "warp", "per_sample_patch", "multi_patch")
PATCH_LOCATIONS = ("TL", "TR", "BR", "BL")

_WARP_MAX_DISPLACEMENT = 1.5  # pixels


@dataclass
class TriggerSpec:
    kind: str
    target_label: int
    size: int = 4               # patch side length
    location: str = "BR"        # patch corner
    sigma: float = 0.2          # blend mixing weight (see sigma_is_transparency)
    sigma_is_transparency: bool = False
    seed: int = 0               # pattern generator seed (blend/warp/multi_patch)
    count: int = 4              # number of multi_patch patches
    fill: float = 1.0           # patch fill value
    pattern: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if self.kind == "patch" and self.location not in PATCH_LOCATIONS:
            raise ValueError(f"bad patch location {self.location!r}")
        if self.kind == "blend" and not 0.0 <= self.sigma <= 1.0:
            raise ValueError("blend sigma must lie in [0,1]")
        if self.kind == "multi_patch" and not 1 <= self.count <= 5:
            raise ValueError("multi_patch count must lie in [1,5]")

    @property
    def mixing_weight(self):
        """Blend weight on the trigger pattern."""
        return 1.0 - self.sigma if self.sigma_is_transparency else self.sigma

    def to_dict(self):
        d = {"kind": self.kind, "target_label": int(self.target_label),
             "size": int(self.size), "location": self.location,
             "sigma": float(self.sigma),
             "sigma_is_transparency": bool(self.sigma_is_transparency),
             "seed": int(self.seed), "count": int(self.count),
             "fill": float(self.fill)}
        if self.pattern is not None:
            d["pattern"] = np.asarray(self.pattern, np.float64).tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "pattern" in d:
            d["pattern"] = np.asarray(d["pattern"], np.float32)
        return cls(**d)


@dataclass
class PoisonPlan:
    target_label: int
    trigger: TriggerSpec
    poison_rate: float = 0.10
    label_mode: str = "dirty"

    def __post_init__(self):
        if not 0.0 < self.poison_rate <= 1.0:
            raise ValueError("poison_rate must lie in (0,1]")
        if self.label_mode != "dirty":
            raise ValueError("only dirty-label poisoning is supported")


# ---------------------------------------------------------------------------
# pattern generators (deterministic per seed and shape)
# ---------------------------------------------------------------------------

def blend_pattern(seed, shape):
    """Smooth random pattern in [0,1], e.g. the classic noise blend trigger."""
    c, h, w = shape
    rng = np.random.default_rng(np.random.SeedSequence([17, seed]))
    raw = ndimage.gaussian_filter(rng.standard_normal((c, h, w)),
                                  sigma=(0, 2.0, 2.0))
    lo, hi = raw.min(), raw.max()
    return ((raw - lo) / (hi - lo)).astype(np.float32)


def warp_field(seed, shape):
    """Fixed smooth per-axis displacement fields with max magnitude 1.5 px."""
    _, h, w = shape
    rng = np.random.default_rng(np.random.SeedSequence([23, seed]))
    fields = []
    for _ in range(2):
        coarse = rng.standard_normal((4, 4))
        fine = ndimage.zoom(coarse, (h / 4, w / 4), order=3)
        fine *= _WARP_MAX_DISPLACEMENT / np.abs(fine).max()
        fields.append(fine)
    return fields[0], fields[1]  # (dy, dx)


def _multi_patch_patterns(seed, count, channels):
    rng = np.random.default_rng(np.random.SeedSequence([29, seed]))
    return rng.random((5, channels, 3, 3)).astype(np.float32)[:count]


def _corner_slices(location, size, h, w):
    if location == "TL":
        return slice(0, size), slice(0, size)
    if location == "TR":
        return slice(0, size), slice(w - size, w)
    if location == "BR":
        return slice(h - size, h), slice(w - size, w)
    if location == "BL":
        return slice(h - size, h), slice(0, size)
    if location == "C":
        r0, c0 = (h - size) // 2, (w - size) // 2
        return slice(r0, r0 + size), slice(c0, c0 + size)
    raise ValueError(f"bad location {location!r}")


def _bilinear_resample(img, dy, dx):
    """Sample img (C,H,W) at (r+dy, c+dx) with border clamping."""
    c, h, w = img.shape
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sr = np.clip(rr + dy, 0, h - 1)
    sc = np.clip(cc + dx, 0, w - 1)
    r0 = np.floor(sr).astype(int)
    c0 = np.floor(sc).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr, fc = sr - r0, sc - c0
    out = ((1 - fr) * (1 - fc) * img[:, r0, c0]
           + (1 - fr) * fc * img[:, r0, c1]
           + fr * (1 - fc) * img[:, r1, c0]
           + fr * fc * img[:, r1, c1])
    return out


# ---------------------------------------------------------------------------
# trigger application
# ---------------------------------------------------------------------------

def apply_trigger(image, trigger):
    """Stamp `trigger` onto one image (C,H,W) in [0,1]; returns a new array."""
    x = np.asarray(image)
    if x.ndim != 3:
        raise ValueError(f"expected a single (C,H,W) image, got shape {x.shape}")
    c, h, w = x.shape
    kind = trigger.kind

    if kind == "patch":
        if trigger.size > min(h, w):
            raise ValueError(
                f"patch size {trigger.size} exceeds image {h}x{w}")
        out = x.copy()
        rs, cs = _corner_slices(trigger.location, trigger.size, h, w)
        out[:, rs, cs] = trigger.fill
        return out

    if kind == "blend":
        mu = trigger.pattern
        if mu is None:
            mu = blend_pattern(trigger.seed, x.shape)
        mu = np.asarray(mu, x.dtype)
        if mu.shape != x.shape:
            raise ValueError(
                f"blend pattern shape {mu.shape} must equal image shape {x.shape}")
        mw = x.dtype.type(trigger.mixing_weight)
        one = x.dtype.type(1.0)
        return (one - mw) * x + mw * mu

    if kind == "warp":
        dy, dx = warp_field(trigger.seed, x.shape)
        out = _bilinear_resample(x.astype(np.float64), dy, dx)
        return np.clip(out, 0.0, 1.0).astype(x.dtype)

    if kind == "per_sample_patch":
        if h < 3 or w < 3:
            raise ValueError("image too small for a 3x3 patch")
        digest = zlib.crc32(np.ascontiguousarray(x, np.float32).tobytes())
        r0 = digest % (h - 2)
        c0 = (digest // (h - 2)) % (w - 2)
        checker = np.indices((3, 3)).sum(axis=0) % 2  # 3x3 contrast pattern
        out = x.copy()
        out[:, r0:r0 + 3, c0:c0 + 3] = checker[None].astype(x.dtype)
        return out

    if kind == "multi_patch":
        if h < 7 or w < 7:
            raise ValueError("image too small for corner patches")
        patterns = (trigger.pattern if trigger.pattern is not None
                    else _multi_patch_patterns(trigger.seed, trigger.count, c))
        spots = ["TL", "TR", "BR", "BL", "C"][:trigger.count]
        out = x.copy()
        for pat, loc in zip(patterns, spots):
            rs, cs = _corner_slices(loc, 3, h, w)
            out[:, rs, cs] = np.asarray(pat, x.dtype)
        return out

    raise ValueError(f"unknown trigger kind {kind!r}")


def apply_trigger_batch(pixels, trigger):
    """apply_trigger over an (N,C,H,W) stack."""
    return np.stack([apply_trigger(img, trigger) for img in pixels])


# ---------------------------------------------------------------------------
# poisoning
# ---------------------------------------------------------------------------

def poison_arrays(pixels, labels, plan, seed):
    """Poison floor(rate*n) seeded-uniform samples; labels become the target.

    Returns (pixels, labels, sorted index list); sample order is preserved.
    """
    n = pixels.shape[0]
    m = int(np.floor(plan.poison_rate * n))
    if m < 1:
        raise ValueError(
            f"poison_rate {plan.poison_rate} selects no samples out of {n}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=m, replace=False))
    out_x = pixels.copy()
    out_y = labels.copy()
    for i in idx:
        out_x[i] = apply_trigger(pixels[i], plan.trigger)
        out_y[i] = plan.target_label
    return out_x, out_y, [int(i) for i in idx]


def poison_dataset(dataset, plan, seed):
    """Poison the training split of a Dataset; returns (dataset, index list)."""
    if dataset.x_train.shape[0] == 0:
        raise ValueError("cannot poison an empty dataset")
    x, y, idx = poison_arrays(dataset.x_train, dataset.y_train, plan, seed)
    poisoned = replace(dataset, x_train=x, y_train=y,
                       dataset_id=f"{dataset.dataset_id}+{plan.trigger.kind}")
    return poisoned, idx
