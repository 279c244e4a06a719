"""Minimal numpy neural-net kernels: conv / pool / dense layers with manual
backward passes, plus the two reference classifier topologies.

All compute runs in float64 for reproducibility; parameters are stored as
float32 (the on-disk format) and upcast per call. Batches are NCHW.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ARCHITECTURES = ("small_cnn", "mlp")


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------

def _conv3x3_forward(x, w, b):
    """3x3 convolution, stride 1, zero padding 1.

    x (N,C,H,W), w (O,C,3,3), b (O,) -> y (N,O,H,W). Also returns the
    im2col matrix reused by the backward pass.
    """
    n, c, h, wd = x.shape
    o = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (N,C,H,W,3,3)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h, wd, c * 9)
    y = cols @ w.reshape(o, c * 9).T + b
    return y.transpose(0, 3, 1, 2), cols


def _conv3x3_backward(dy, cols, w, x_shape):
    """Gradients for _conv3x3_forward: returns (dx, dw, db)."""
    n, c, h, wd = x_shape
    o = w.shape[0]
    dyt = dy.transpose(0, 2, 3, 1)  # (N,H,W,O)
    dw = dyt.reshape(-1, o).T @ cols.reshape(-1, c * 9)
    db = dy.sum(axis=(0, 2, 3))
    # dx is the full correlation of dy with the spatially flipped kernel
    dyp = np.pad(dy, ((0, 0), (0, 0), (1, 1), (1, 1)))
    winy = sliding_window_view(dyp, (3, 3), axis=(2, 3))
    coly = winy.transpose(0, 2, 3, 1, 4, 5).reshape(n, h, wd, o * 9)
    wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * 9)
    dx = (coly @ wf.T).transpose(0, 3, 1, 2)
    return dx, dw.reshape(w.shape), db


def _maxpool2_forward(x):
    """2x2 max pooling, stride 2. H and W must be even.

    Ties route to the first (row-major) window element, deterministically.
    """
    n, c, h, wd = x.shape
    xr = (
        x.reshape(n, c, h // 2, 2, wd // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, wd // 2, 4)
    )
    idx = xr.argmax(axis=-1)
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return y, idx


def _maxpool2_backward(dy, idx, x_shape):
    n, c, h, wd = x_shape
    dxr = np.zeros((n, c, h // 2, wd // 2, 4))
    np.put_along_axis(dxr, idx[..., None], dy[..., None], axis=-1)
    return (
        dxr.reshape(n, c, h // 2, wd // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, wd)
    )


def _dense_forward(x, w, b):
    """x (N,F), w (U,F), b (U,) -> (N,U)."""
    return x @ w.T + b


def _dense_backward(dy, x, w):
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def softmax(logits):
    """Row-wise stable softmax."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs, labels):
    """Mean cross-entropy of softmax rows against integer labels."""
    n = probs.shape[0]
    eps = np.finfo(np.float64).tiny
    return float(-np.mean(np.log(probs[np.arange(n), labels] + eps)))


def _dlogits(probs, labels):
    """Gradient of mean cross-entropy w.r.t. logits."""
    n = probs.shape[0]
    g = probs.copy()
    g[np.arange(n), labels] -= 1.0
    return g / n


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------

def default_params(arch, num_classes, input_shape, rng, widths=None):
    """He-initialised float32 parameter dict for an architecture.

    widths: (conv1, conv2, hidden) for small_cnn, (h1, h2) for mlp.
    """
    c, h, w = input_shape
    params = {}

    def he(shape, fan_in):
        a = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        return a.astype(np.float32)

    if arch == "small_cnn":
        if h % 4 or w % 4:
            raise ValueError(f"small_cnn needs H,W divisible by 4, got {h}x{w}")
        c1, c2, hid = widths or (12, 24, 64)
        flat = c2 * (h // 4) * (w // 4)
        params["conv1.w"] = he((c1, c, 3, 3), c * 9)
        params["conv1.b"] = np.zeros(c1, np.float32)
        params["conv2.w"] = he((c2, c1, 3, 3), c1 * 9)
        params["conv2.b"] = np.zeros(c2, np.float32)
        params["fc1.w"] = he((hid, flat), flat)
        params["fc1.b"] = np.zeros(hid, np.float32)
        params["fc2.w"] = he((num_classes, hid), hid)
        params["fc2.b"] = np.zeros(num_classes, np.float32)
    elif arch == "mlp":
        h1, h2 = widths or (96, 64)
        flat = c * h * w
        params["fc1.w"] = he((h1, flat), flat)
        params["fc1.b"] = np.zeros(h1, np.float32)
        params["fc2.w"] = he((h2, h1), h1)
        params["fc2.b"] = np.zeros(h2, np.float32)
        params["fc3.w"] = he((num_classes, h2), h2)
        params["fc3.b"] = np.zeros(num_classes, np.float32)
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    return params


def forward_logits(arch, params, x):
    """Logits plus the cache needed for a backward pass. x is float64 NCHW."""
    p = {k: v.astype(np.float64) for k, v in params.items()}
    cache = {"x": x, "p": p}
    if arch == "small_cnn":
        z1, cols1 = _conv3x3_forward(x, p["conv1.w"], p["conv1.b"])
        a1 = np.maximum(z1, 0.0)
        q1, idx1 = _maxpool2_forward(a1)
        z2, cols2 = _conv3x3_forward(q1, p["conv2.w"], p["conv2.b"])
        a2 = np.maximum(z2, 0.0)
        q2, idx2 = _maxpool2_forward(a2)
        flat = q2.reshape(x.shape[0], -1)
        z3 = _dense_forward(flat, p["fc1.w"], p["fc1.b"])
        a3 = np.maximum(z3, 0.0)
        logits = _dense_forward(a3, p["fc2.w"], p["fc2.b"])
        cache.update(z1=z1, cols1=cols1, a1=a1, q1=q1, idx1=idx1,
                     z2=z2, cols2=cols2, a2=a2, q2=q2, idx2=idx2,
                     flat=flat, z3=z3, a3=a3)
    elif arch == "mlp":
        flat = x.reshape(x.shape[0], -1)
        z1 = _dense_forward(flat, p["fc1.w"], p["fc1.b"])
        a1 = np.maximum(z1, 0.0)
        z2 = _dense_forward(a1, p["fc2.w"], p["fc2.b"])
        a2 = np.maximum(z2, 0.0)
        logits = _dense_forward(a2, p["fc3.w"], p["fc3.b"])
        cache.update(flat=flat, z1=z1, a1=a1, z2=z2, a2=a2)
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    return logits, cache


def backward(arch, cache, dlogits):
    """Backprop dlogits through the cached forward pass.

    Returns (param_grads, dx) where dx has the input batch shape.
    """
    p = cache["p"]
    x = cache["x"]
    grads = {}
    if arch == "small_cnn":
        da3, grads["fc2.w"], grads["fc2.b"] = _dense_backward(
            dlogits, cache["a3"], p["fc2.w"])
        dz3 = da3 * (cache["z3"] > 0)
        dflat, grads["fc1.w"], grads["fc1.b"] = _dense_backward(
            dz3, cache["flat"], p["fc1.w"])
        dq2 = dflat.reshape(cache["q2"].shape)
        da2 = _maxpool2_backward(dq2, cache["idx2"], cache["a2"].shape)
        dz2 = da2 * (cache["z2"] > 0)
        dq1, grads["conv2.w"], grads["conv2.b"] = _conv3x3_backward(
            dz2, cache["cols2"], p["conv2.w"], cache["q1"].shape)
        da1 = _maxpool2_backward(dq1, cache["idx1"], cache["a1"].shape)
        dz1 = da1 * (cache["z1"] > 0)
        dx, grads["conv1.w"], grads["conv1.b"] = _conv3x3_backward(
            dz1, cache["cols1"], p["conv1.w"], x.shape)
    elif arch == "mlp":
        da2, grads["fc3.w"], grads["fc3.b"] = _dense_backward(
            dlogits, cache["a2"], p["fc3.w"])
        dz2 = da2 * (cache["z2"] > 0)
        da1, grads["fc2.w"], grads["fc2.b"] = _dense_backward(
            dz2, cache["a1"], p["fc2.w"])
        dz1 = da1 * (cache["z1"] > 0)
        dflat, grads["fc1.w"], grads["fc1.b"] = _dense_backward(
            dz1, cache["flat"], p["fc1.w"])
        dx = dflat.reshape(x.shape)
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    return grads, dx
