"""Classifier handles: forward evaluation, input gradients, SGD fine-tuning
and a self-describing binary container format.

A handle owns a float32 weight store plus a provenance metadata dict
(seed, dataset_id, attack_id, target_label). Handles are immutable in
practice: training ops return a new handle.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn


class ModelFormatError(Exception):
    """Raised when a model container file cannot be parsed."""


_MAGIC = b"APMDL001"


@dataclass
class ImageBatch:
    """A batch of images (N,C,H,W, values in [0,1]) with integer labels."""

    pixels: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be 4-D NCHW, got shape {self.pixels.shape}")
        if self.labels.shape != (self.pixels.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match batch size "
                f"{self.pixels.shape[0]}")
        lo, hi = float(self.pixels.min(initial=0.0)), float(self.pixels.max(initial=0.0))
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values outside [0,1]: min={lo}, max={hi}")

    def __len__(self):
        return self.pixels.shape[0]


@dataclass
class ClassifierHandle:
    architecture_id: str
    num_classes: int
    input_shape: tuple  # (C, H, W)
    params: dict = field(repr=False)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.architecture_id not in nn.ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture_id!r}")
        if self.metadata.get("attack_id") == "clean" and \
                self.metadata.get("target_label") is not None:
            raise ValueError("clean model must not carry a target label")

    def copy(self):
        return ClassifierHandle(
            self.architecture_id, self.num_classes, self.input_shape,
            {k: v.copy() for k, v in self.params.items()}, dict(self.metadata))


def init_model(arch, num_classes, input_shape, seed, widths=None, metadata=None):
    """Freshly initialised classifier. `widths` overrides the default layer sizes."""
    rng = np.random.default_rng(seed)
    params = nn.default_params(arch, num_classes, tuple(input_shape), rng, widths)
    meta = {"seed": int(seed), "dataset_id": None, "attack_id": "clean",
            "target_label": None}
    if metadata:
        meta.update(metadata)
    return ClassifierHandle(arch, int(num_classes), tuple(input_shape), params, meta)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _check_shape(model, pixels):
    if pixels.shape[1:] != model.input_shape:
        raise ValueError(
            f"batch shape {pixels.shape[1:]} does not match model input "
            f"shape {model.input_shape}")


def forward_pixels(model, pixels):
    """Softmax probabilities (N,K) for a raw pixel array; no range checks."""
    _check_shape(model, pixels)
    logits, _ = nn.forward_logits(
        model.architecture_id, model.params, np.asarray(pixels, np.float64))
    return nn.softmax(logits)


def forward(model, batch):
    """Softmax probabilities (N,K) for an ImageBatch."""
    return forward_pixels(model, batch.pixels)


def input_gradient_pixels(model, pixels, labels):
    """d(mean cross-entropy)/d(pixels), shaped like `pixels`."""
    _check_shape(model, pixels)
    x = np.asarray(pixels, np.float64)
    y = np.asarray(labels, np.int64)
    logits, cache = nn.forward_logits(model.architecture_id, model.params, x)
    probs = nn.softmax(logits)
    _, dx = nn.backward(model.architecture_id, cache, nn._dlogits(probs, y))
    return dx


def input_gradient(model, batch):
    """Gradient of the mean cross-entropy loss w.r.t. the batch pixels."""
    return input_gradient_pixels(model, batch.pixels, batch.labels)


def mean_loss(model, pixels, labels):
    probs = forward_pixels(model, pixels)
    return nn.cross_entropy(probs, np.asarray(labels, np.int64))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def sgd_epochs(model, pixels, labels, epochs, learning_rate, momentum=0.9,
               batch_size=64, seed=0):
    """Run SGD with momentum in place on a handle's float32 weight store.

    Returns the per-epoch mean training loss (measured online over batches).
    Raises RuntimeError when the loss turns non-finite.
    """
    n = pixels.shape[0]
    rng = np.random.default_rng(seed)
    x_all = np.asarray(pixels, np.float64)
    y_all = np.asarray(labels, np.int64)
    velocity = {k: np.zeros(v.shape) for k, v in model.params.items()}
    history = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            sel = perm[start:start + batch_size]
            x, y = x_all[sel], y_all[sel]
            logits, cache = nn.forward_logits(model.architecture_id, model.params, x)
            probs = nn.softmax(logits)
            loss = nn.cross_entropy(probs, y)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: loss={loss} at epoch {len(history)}, "
                    f"batch starting {start}")
            losses.append(loss)
            grads, _ = nn.backward(model.architecture_id, cache,
                                   nn._dlogits(probs, y))
            for k in model.params:
                velocity[k] = momentum * velocity[k] - learning_rate * grads[k]
                model.params[k] = (
                    model.params[k].astype(np.float64) + velocity[k]
                ).astype(np.float32)
        history.append(float(np.mean(losses)))
    return history


def fine_tune(model, dataset, epochs, learning_rate, momentum=0.9,
              batch_size=64, seed=0):
    """Return a copy of `model` trained for `epochs` passes over `dataset`.

    dataset: an ImageBatch (or anything with .pixels/.labels). epochs=0 is a
    bit-exact no-op copy.
    """
    if len(dataset.labels) == 0:
        raise ValueError("fine_tune requires a non-empty dataset")
    if int(dataset.labels.max()) >= model.num_classes:
        raise ValueError("dataset labels exceed model.num_classes")
    out = model.copy()
    if epochs > 0:
        sgd_epochs(out, dataset.pixels, dataset.labels, epochs, learning_rate,
                   momentum=momentum, batch_size=batch_size, seed=seed)
    return out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_model(model, path):
    """Write the container: magic, JSON header, then raw little-endian
    float32 weight blobs keyed by layer name."""
    names = sorted(model.params)
    header = {
        "architecture_id": model.architecture_id,
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "metadata": model.metadata,
        "weights": [],
    }
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        raw = arr.tobytes()
        header["weights"].append(
            {"name": name, "shape": list(arr.shape), "offset": offset,
             "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(hjson)))
        f.write(hjson)
        for raw in blobs:
            f.write(raw)


def load_model(path):
    """Parse a model container back into a ClassifierHandle."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != _MAGIC:
        raise ModelFormatError(f"bad magic {data[:8]!r}")
    if len(data) < 16:
        raise ModelFormatError("truncated header length field")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise ModelFormatError("truncated JSON header")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"unparseable JSON header: {exc}") from exc
    for key in ("architecture_id", "num_classes", "input_shape", "metadata",
                "weights"):
        if key not in header:
            raise ModelFormatError(f"missing header field {key!r}")
    blob = data[16 + hlen:]
    params = {}
    for spec in header["weights"]:
        off, nb = spec["offset"], spec["nbytes"]
        if off + nb > len(blob):
            raise ModelFormatError(
                f"weight {spec['name']!r} extends past end of file")
        arr = np.frombuffer(blob[off:off + nb], dtype="<f4")
        expect = int(np.prod(spec["shape"])) if spec["shape"] else 1
        if arr.size != expect:
            raise ModelFormatError(
                f"weight {spec['name']!r} has {arr.size} values, "
                f"expected {expect}")
        params[spec["name"]] = arr.reshape(spec["shape"]).copy()
    return ClassifierHandle(
        header["architecture_id"], int(header["num_classes"]),
        tuple(header["input_shape"]), params, header["metadata"])
