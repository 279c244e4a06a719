"""Class-score statistics and the MAD outlier verdict.

The per-class score is the mean softmax mass a class receives from probed
samples whose true label is a different class: a backdoor shows up as one
class soaking up everyone else's probability mass. Scores are screened with
the median-absolute-deviation outlier index using the usual 1.4826
consistency constant; only positive deviations can flag.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .models import forward_pixels

MAD_CONSISTENCY = 1.4826


@dataclass
class AnomalyResult:
    indices: np.ndarray
    max_index: float
    argmax_class: int
    infected: bool
    tau: float

    def to_dict(self):
        return {"indices": [float(v) for v in self.indices],
                "max_index": float(self.max_index),
                "argmax_class": int(self.argmax_class),
                "infected": bool(self.infected), "tau": float(self.tau)}


def scores_from_probs(probs, labels):
    k = probs.shape[1]
    scores = np.zeros(k)
    for c in range(k):
        others = labels != c
        if not others.any():
            warnings.warn(f"no samples with true label != {c}; score set to 0",
                          stacklevel=2)
            continue
        scores[c] = probs[others, c].mean()
    return scores


def class_scores(model, batch, probes):
    """scores[c] = mean softmax mass on c over probed samples with label != c."""
    probed = batch.pixels.astype(np.float64) + probes
    return scores_from_probs(forward_pixels(model, probed), batch.labels)


def mad_anomaly(scores, tau=3.5):
    """MAD outlier index per class; infected iff the largest index beats tau.

    Zero dispersion is degenerate: indices become 0 except that any score
    strictly above the median maps to +inf.
    """
    s = np.asarray(scores, np.float64)
    if s.ndim != 1 or s.size < 3:
        raise ValueError(f"need at least 3 class scores, got shape {s.shape}")
    med = np.median(s)
    d = np.median(np.abs(s - med))
    if d == 0.0:
        indices = np.where(s > med, np.inf, 0.0)
    else:
        indices = (s - med) / (MAD_CONSISTENCY * d)
    argmax_class = int(np.argmax(indices))
    max_index = float(indices[argmax_class])
    return AnomalyResult(indices=indices, max_index=max_index,
                         argmax_class=argmax_class,
                         infected=bool(max_index > tau), tau=float(tau))
