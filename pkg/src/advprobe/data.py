"""Datasets: containers, a synthetic image generator, and disk io.

The synthetic generator draws one colored regular polygon per class (class k
gets a (k+3)-gon) at a random position, rotation and illumination level per
sample, plus smooth and white noise. The design keeps every class
statistically interchangeable: glyph areas and colour contrasts are
equalised, hues sit on an even grid, and position carries no class
information. That symmetry matters downstream: anomaly-scoring adversarial
probes relies on no class being intrinsically cheaper to flip into than its
peers.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .models import ImageBatch


@dataclass
class Dataset:
    x_train: np.ndarray   # (N,C,H,W) float32 in [0,1]
    y_train: np.ndarray   # (N,) int64
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int
    dataset_id: str = "dataset"
    seed: int | None = None

    def __post_init__(self):
        for name in ("x_train", "x_test"):
            x = getattr(self, name)
            if x.ndim != 4:
                raise ValueError(f"{name} must be (N,C,H,W), got {x.shape}")
        for xs, ys in ((self.x_train, self.y_train),
                       (self.x_test, self.y_test)):
            if xs.shape[0] != ys.shape[0]:
                raise ValueError("pixels/labels length mismatch")
        if self.x_train.shape[1:] != self.x_test.shape[1:]:
            raise ValueError("train/test image shapes differ")

    @property
    def image_shape(self):
        return tuple(self.x_train.shape[1:])

    def train_batch(self):
        return ImageBatch(self.x_train, self.y_train)

    def test_batch(self):
        return ImageBatch(self.x_test, self.y_test)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _smooth_noise(rng, shape, sigma):
    raw = ndimage.gaussian_filter(rng.standard_normal(shape),
                                  sigma=(0, sigma, sigma))
    return raw / raw.std()


def _hue_stride(num_classes):
    # integer stride coprime to the class count, near the golden angle, so
    # hue order decorrelates from ring order while hue gaps stay even
    best = 1
    for g in range(1, num_classes):
        if np.gcd(g, num_classes) != 1:
            continue
        if abs(g - 0.382 * num_classes) < abs(best - 0.382 * num_classes):
            best = g
    return best


def _class_palette(num_classes, channels):
    """Signed per-class colours in [-1,1], evenly spaced in hue.

    Hues sit on an exact 1/num_classes grid (no two classes are closer in
    colour than any other pair) and are assigned in coprime-stride order so
    colour neighbours are not ring-position neighbours. Colours are then
    normalised to a common signed-contrast norm: without this, low-contrast
    classes are cheaper to fake under a small pixel budget and soak up
    adversarial probability mass, skewing downstream anomaly statistics.
    """
    k = np.arange(num_classes)
    hue = ((k * _hue_stride(num_classes)) % num_classes) / num_classes
    if channels == 1:
        return 2.0 * (hue[:, None] + 0.5 / num_classes) - 1.0
    r = np.clip(np.abs(6 * hue - 3) - 1, 0, 1)
    g = np.clip(2 - np.abs(6 * hue - 2), 0, 1)
    b = np.clip(2 - np.abs(6 * hue - 4), 0, 1)
    rgb = np.stack([r, g, b], axis=1)
    if channels <= 3:
        pal = rgb[:, :channels]
    else:
        reps = -(-channels // 3)
        pal = np.tile(rgb, (1, reps))[:, :channels]
    pal = pal * 2.0 - 1.0
    return pal * (1.4 / np.linalg.norm(pal, axis=1, keepdims=True))


def _polygon_mask(n, h, w, cy, cx, r, rot):
    """Filled regular n-gon with circumradius r, rotated by rot."""
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    apothem = r * np.cos(np.pi / n)
    inside = np.ones((h, w), bool)
    for i in range(n):
        a = rot + 2 * np.pi * (i + 0.5) / n
        inside &= (dy * np.sin(a) + dx * np.cos(a)) <= apothem
    return inside


def _synth_split(rng, num_classes, shape, per_class, template_scale,
                 smooth_scale, white_scale):
    c, h, w = shape
    base_r = max(2.0, 0.17 * min(h, w))
    palette = _class_palette(num_classes, c)
    xs, ys = [], []
    for k in range(num_classes):
        n_vert = k + 3
        # circumradius scaled for constant glyph area across classes
        area = 0.5 * n_vert * np.sin(2 * np.pi / n_vert)
        r_k = base_r * np.sqrt(np.pi / area)
        for _ in range(per_class):
            rot = rng.uniform(0.0, 2.0 * np.pi)
            rr = r_k * rng.uniform(0.85, 1.15)
            my = min(rr + 1.0, (h - 1) / 2)
            mx = min(rr + 1.0, (w - 1) / 2)
            cy = rng.uniform(my, h - my)
            cx = rng.uniform(mx, w - mx)
            level = rng.uniform(0.3, 0.7)
            mask = _polygon_mask(n_vert, h, w, cy, cx, rr, rot)
            img = (level
                   + template_scale * palette[k][:, None, None] * mask
                   + smooth_scale * _smooth_noise(rng, shape, 2.0)
                   + white_scale * rng.standard_normal(shape))
            xs.append(np.clip(img, 0.0, 1.0))
            ys.append(k)
    order = rng.permutation(len(xs))
    x = np.stack(xs).astype(np.float32)[order]
    y = np.asarray(ys, np.int64)[order]
    return x, y


def synth_dataset(num_classes=10, per_class=100, per_class_test=None,
                  image_shape=(3, 32, 32), seed=0, template_scale=0.30,
                  smooth_scale=0.10, white_scale=0.08):
    """Deterministic synthetic classification dataset.

    Images are a per-sample illumination level + a scaled class glyph (a
    colored regular polygon whose vertex count identifies the class) +
    smooth per-sample noise + white noise, clipped to [0,1]. Same seed,
    same bytes.
    """
    if per_class_test is None:
        per_class_test = max(per_class // 2, 1)
    seq = np.random.SeedSequence([101, seed])
    rng_tr, rng_te = (np.random.default_rng(s) for s in seq.spawn(2))
    x_train, y_train = _synth_split(rng_tr, num_classes, image_shape,
                                    per_class, template_scale, smooth_scale,
                                    white_scale)
    x_test, y_test = _synth_split(rng_te, num_classes, image_shape,
                                  per_class_test, template_scale,
                                  smooth_scale, white_scale)
    return Dataset(x_train, y_train, x_test, y_test, num_classes,
                   dataset_id=f"synth-{num_classes}x{per_class}-s{seed}",
                   seed=seed)


# ---------------------------------------------------------------------------
# disk io
# ---------------------------------------------------------------------------

class DatasetFormatError(Exception):
    pass


_SPLIT_ARRAYS = ("x_train", "y_train", "x_test", "y_test")


def save_dataset(dataset, dirpath):
    """Write a dataset directory: manifest.json plus raw little-endian blobs."""
    os.makedirs(dirpath, exist_ok=True)
    arrays = {}
    for name in _SPLIT_ARRAYS:
        arr = getattr(dataset, name)
        dtype = "<f4" if arr.dtype.kind == "f" else "<i8"
        blob = np.ascontiguousarray(arr.astype(dtype))
        fname = f"{name}.bin"
        with open(os.path.join(dirpath, fname), "wb") as f:
            f.write(blob.tobytes())
        arrays[name] = {"file": fname, "dtype": dtype,
                        "shape": list(arr.shape)}
    manifest = {"format": "advprobe-dataset-v1",
                "dataset_id": dataset.dataset_id,
                "num_classes": int(dataset.num_classes),
                "seed": dataset.seed,
                "arrays": arrays}
    with open(os.path.join(dirpath, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(dirpath):
    mpath = os.path.join(dirpath, "manifest.json")
    if not os.path.isfile(mpath):
        raise DatasetFormatError(f"no manifest.json under {dirpath}")
    with open(mpath) as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"manifest is not valid JSON: {e}") from e
    if manifest.get("format") != "advprobe-dataset-v1":
        raise DatasetFormatError(
            f"unrecognised dataset format {manifest.get('format')!r}")
    loaded = {}
    for name in _SPLIT_ARRAYS:
        try:
            entry = manifest["arrays"][name]
        except KeyError:
            raise DatasetFormatError(f"manifest lacks array {name!r}") from None
        path = os.path.join(dirpath, entry["file"])
        shape = tuple(entry["shape"])
        raw = np.fromfile(path, dtype=entry["dtype"])
        if raw.size != int(np.prod(shape)):
            raise DatasetFormatError(
                f"{entry['file']}: expected {int(np.prod(shape))} values, "
                f"found {raw.size}")
        arr = raw.reshape(shape)
        loaded[name] = (arr.astype(np.float32) if entry["dtype"] == "<f4"
                        else arr.astype(np.int64))
    return Dataset(num_classes=int(manifest["num_classes"]),
                   dataset_id=manifest["dataset_id"],
                   seed=manifest.get("seed"), **loaded)


def load_cifar10_binary(path, test_path=None):
    """Load CIFAR-10 from the original binary format (3073-byte records).

    `path` may be one batch file or a directory holding data_batch_*.bin and
    test_batch.bin. Pixels are scaled to [0,1] float32, NCHW.
    """
    def read_records(fp):
        raw = np.fromfile(fp, dtype=np.uint8)
        if raw.size == 0 or raw.size % 3073 != 0:
            raise DatasetFormatError(
                f"{fp}: size {raw.size} is not a multiple of 3073 bytes")
        rec = raw.reshape(-1, 3073)
        y = rec[:, 0].astype(np.int64)
        x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
        if y.max() > 9:
            raise DatasetFormatError(f"{fp}: label byte out of range 0-9")
        return x, y

    if os.path.isdir(path):
        train_files = sorted(
            os.path.join(path, f) for f in os.listdir(path)
            if f.startswith("data_batch") and f.endswith(".bin"))
        if not train_files:
            raise DatasetFormatError(f"no data_batch_*.bin under {path}")
        parts = [read_records(f) for f in train_files]
        x_train = np.concatenate([p[0] for p in parts])
        y_train = np.concatenate([p[1] for p in parts])
        tpath = test_path or os.path.join(path, "test_batch.bin")
    else:
        x_train, y_train = read_records(path)
        tpath = test_path
    if tpath and os.path.isfile(tpath):
        x_test, y_test = read_records(tpath)
    else:
        x_test = x_train[:0]
        y_test = y_train[:0]
    return Dataset(x_train, y_train, x_test, y_test, num_classes=10,
                   dataset_id="cifar10")


# ---------------------------------------------------------------------------
# probe sets
# ---------------------------------------------------------------------------

def make_probe_set(dataset, samples_per_class=5, seed=0, split="test"):
    """Pick a seeded class-balanced probe batch from one split."""
    if split == "test":
        x, y = dataset.x_test, dataset.y_test
    elif split == "train":
        x, y = dataset.x_train, dataset.y_train
    else:
        raise ValueError(f"unknown split {split!r}")
    rng = np.random.default_rng(np.random.SeedSequence([211, seed]))
    picked = []
    for k in range(dataset.num_classes):
        pool = np.flatnonzero(y == k)
        if pool.size < samples_per_class:
            raise ValueError(
                f"class {k} has only {pool.size} samples in the {split} "
                f"split, need {samples_per_class}")
        picked.append(rng.choice(pool, size=samples_per_class, replace=False))
    idx = np.sort(np.concatenate(picked))
    return ImageBatch(x[idx].copy(), y[idx].copy())
