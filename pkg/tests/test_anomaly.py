import statistics

import numpy as np
import pytest

from advprobe import models
from advprobe.anomaly import (MAD_CONSISTENCY, class_scores, mad_anomaly,
                              scores_from_probs)
from advprobe.models import ImageBatch


def oracle_mad_indices(scores):
    s = [float(v) for v in scores]
    med = statistics.median(s)
    d = statistics.median([abs(v - med) for v in s])
    if d == 0:
        return [float("inf") if v > med else 0.0 for v in s]
    return [(v - med) / (MAD_CONSISTENCY * d) for v in s]


# -- class scores -----------------------------------------------------------

def test_uniform_model_scores_one_over_k():
    model = models.init_model("mlp", 4, (3, 8, 8), seed=0, widths=(8, 8))
    for name in model.params:
        model.params[name][:] = 0
    rng = np.random.default_rng(0)
    batch = ImageBatch(rng.random((8, 3, 8, 8)), rng.integers(0, 4, 8))
    scores = class_scores(model, batch, np.zeros_like(batch.pixels))
    assert np.array_equal(scores, np.full(4, 0.25))


def test_collapsed_model_scores_one_hot():
    model = models.init_model("mlp", 4, (3, 8, 8), seed=0, widths=(8, 8))
    for name in model.params:
        model.params[name][:] = 0
    model.params["fc3.b"][2] = 1000.0
    rng = np.random.default_rng(1)
    batch = ImageBatch(rng.random((8, 3, 8, 8)), rng.integers(0, 4, 8))
    scores = class_scores(model, batch, np.zeros_like(batch.pixels))
    assert scores[2] == pytest.approx(1.0, abs=1e-12)
    assert np.all(scores[[0, 1, 3]] < 1e-12)


def test_scores_enumeration_hand_case():
    probs = np.array([[0.7, 0.2, 0.1],
                      [0.1, 0.8, 0.1],
                      [0.3, 0.3, 0.4]])
    labels = np.array([0, 1, 2])
    scores = scores_from_probs(probs, labels)
    assert scores[0] == pytest.approx((0.1 + 0.3) / 2)
    assert scores[1] == pytest.approx((0.2 + 0.3) / 2)
    assert scores[2] == pytest.approx((0.1 + 0.1) / 2)


def test_scores_match_direct_softmax_average():
    model = models.init_model("small_cnn", 4, (3, 8, 8), seed=5,
                              widths=(6, 8, 16))
    rng = np.random.default_rng(2)
    batch = ImageBatch(rng.random((10, 3, 8, 8)), rng.integers(0, 4, 10))
    probes = rng.uniform(-0.01, 0.01, batch.pixels.shape)
    probes = np.clip(batch.pixels + probes, 0, 1) - batch.pixels
    scores = class_scores(model, batch, probes)
    from advprobe import nn
    logits, _ = nn.forward_logits(model.architecture_id, model.params,
                                  (batch.pixels + probes).astype(np.float64))
    probs = nn.softmax(logits)
    for c in range(4):
        expect = np.mean([probs[i, c] for i in range(10)
                          if batch.labels[i] != c])
        assert scores[c] == pytest.approx(expect, abs=1e-12)


def test_scores_empty_class_warns():
    probs = np.full((4, 3), 1 / 3)
    labels = np.zeros(4, np.int64)
    with pytest.warns(UserWarning, match="!= 0"):
        scores = scores_from_probs(probs, labels)
    assert scores[0] == 0.0


# -- MAD --------------------------------------------------------------------

def test_mad_textbook_outlier():
    res = mad_anomaly(np.array([1.0, 2, 3, 4, 100]), tau=3.5)
    assert res.max_index == pytest.approx(97 / MAD_CONSISTENCY, abs=1e-9)
    assert abs(res.max_index - 65.43) < 0.01
    assert res.argmax_class == 4
    assert res.infected


def test_mad_all_equal_is_clean():
    res = mad_anomaly(np.full(6, 0.3), tau=3.5)
    assert np.array_equal(res.indices, np.zeros(6))
    assert not res.infected


def test_mad_zero_dispersion_flags_any_excess():
    res = mad_anomaly(np.array([1.0, 1, 1, 1, 2]), tau=3.5)
    assert res.max_index == np.inf
    assert res.argmax_class == 4
    assert res.infected
    assert res.indices[:4].tolist() == [0, 0, 0, 0]


def test_mad_threshold_boundary():
    scores = np.array([1.0, 2, 3, 4, 3 + 4 * MAD_CONSISTENCY])
    res = mad_anomaly(scores, tau=3.5)
    assert res.max_index == pytest.approx(4.0)
    assert res.infected
    assert not mad_anomaly(scores, tau=4.0).infected  # strict inequality


def test_mad_requires_three_classes():
    with pytest.raises(ValueError):
        mad_anomaly(np.array([0.1, 0.9]))


def test_mad_exact_shift_and_scale_invariance():
    base = np.array([1.0, 2, 3, 4, 100])
    ref = mad_anomaly(base)
    shifted = mad_anomaly(base + 7.0)
    scaled = mad_anomaly(base * 2.0)
    assert np.array_equal(ref.indices, shifted.indices)
    assert np.array_equal(ref.indices, scaled.indices)


def test_mad_float_invariance_within_tolerance():
    rng = np.random.default_rng(3)
    s = rng.random(9)
    ref = mad_anomaly(s).indices
    np.testing.assert_allclose(mad_anomaly(s + 0.137).indices, ref,
                               atol=1e-9)
    np.testing.assert_allclose(mad_anomaly(s * 3.7).indices, ref, atol=1e-9)


def test_mad_argmax_survives_monotone_transforms():
    rng = np.random.default_rng(4)
    for _ in range(50):
        s = rng.random(7)
        ref = mad_anomaly(s).argmax_class
        assert mad_anomaly(np.exp(s)).argmax_class == ref
        assert mad_anomaly(2 * s + 1).argmax_class == ref


def test_mad_matches_brute_force_oracle():
    rng = np.random.default_rng(5)
    for _ in range(300):
        k = int(rng.integers(3, 12))
        s = rng.random(k) * rng.choice([1.0, 100.0])
        res = mad_anomaly(s)
        expect = oracle_mad_indices(s)
        np.testing.assert_allclose(res.indices, expect, atol=1e-12)
        assert res.argmax_class == int(np.argmax(expect))
