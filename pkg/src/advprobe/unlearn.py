"""Backdoor removal by fine-tuning on probe-patched data.

A detection run exports the probes it converged on; those probes act as a
reversed trigger. Fine-tuning one epoch on a small subset where a fraction
of images carry the reversed trigger (labels untouched) overwrites the
shortcut the backdoor installed. Control modes patch with the true trigger,
with random noise of the same magnitude, or not at all.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import models
from .detect import load_probes
from .training import TrainConfig, evaluate_accuracy, attack_success_rate
from .triggers import apply_trigger_batch

UNLEARN_MODES = ("reversed_trigger", "original_trigger", "random_noise",
                 "no_patching")


@dataclass
class UnlearnConfig:
    epochs: int = 1
    subset_fraction: float = 0.1
    patch_fraction: float = 0.2
    lr_scale: float = 0.1
    noise_budget: float = 16 / 255    # random_noise fallback without archive
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("subset_fraction", "patch_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")

    def to_dict(self):
        return {"epochs": self.epochs,
                "subset_fraction": self.subset_fraction,
                "patch_fraction": self.patch_fraction,
                "lr_scale": self.lr_scale,
                "noise_budget": self.noise_budget,
                "train": {"epochs": self.train.epochs,
                          "learning_rate": self.train.learning_rate,
                          "momentum": self.train.momentum,
                          "batch_size": self.train.batch_size}}


def _metrics(model, dataset, trigger):
    return {"clean_accuracy": evaluate_accuracy(model, dataset.x_test,
                                                dataset.y_test),
            "attack_success": attack_success_rate(model, dataset, trigger)}


def _patch_reversed(pixels, rng, archive_dir):
    arrays, manifest = load_probes(archive_dir)
    probes = arrays["probes"]
    if probes.shape[1:] != pixels.shape[1:]:
        raise ValueError(
            f"archived probes {probes.shape[1:]} do not match training "
            f"images {pixels.shape[1:]}; resizing is not supported")
    pick = rng.integers(0, probes.shape[0], size=pixels.shape[0])
    return np.clip(pixels + probes[pick], 0.0, 1.0), float(manifest["budget"])


def unlearn(model, train_set, probe_archive=None, mode="reversed_trigger",
            config=None, trigger=None, seed=0):
    """Fine-tune `model` against its backdoor; returns (new model, report).

    train_set: full Dataset whose train split supplies the fine-tune subset
    and whose test split scores before/after metrics. `trigger` is the true
    TriggerSpec, needed to measure attack success (and to stamp images in
    original_trigger mode). probe_archive: directory written by
    export_probes; required in reversed_trigger mode, and used in
    random_noise mode to match the noise magnitude when present.
    """
    if mode not in UNLEARN_MODES:
        raise ValueError(f"mode must be one of {UNLEARN_MODES}, got {mode!r}")
    if mode == "reversed_trigger" and probe_archive is None:
        raise ValueError("reversed_trigger mode needs a probe archive "
                         "exported by a detection run")
    if trigger is None:
        raise ValueError("a TriggerSpec is required to score attack success")
    config = config or UnlearnConfig()

    n = train_set.x_train.shape[0]
    k = int(np.floor(config.subset_fraction * n))
    m = int(np.floor(config.patch_fraction * k))
    if k < 1:
        raise ValueError(f"subset of {n} training samples is empty at "
                         f"fraction {config.subset_fraction}")
    rng = np.random.default_rng(np.random.SeedSequence([401, seed]))
    subset = np.sort(rng.choice(n, size=k, replace=False))
    patched_rows = rng.permutation(k)[:m]

    x = np.array(train_set.x_train[subset], np.float64)
    y = np.array(train_set.y_train[subset])
    budget = config.noise_budget
    if m > 0:
        if mode == "reversed_trigger":
            x[patched_rows], budget = _patch_reversed(x[patched_rows], rng,
                                                      probe_archive)
        elif mode == "original_trigger":
            x[patched_rows] = apply_trigger_batch(x[patched_rows], trigger)
        elif mode == "random_noise":
            if probe_archive is not None:
                _, manifest = load_probes(probe_archive)
                budget = float(manifest["budget"])
            noise = rng.uniform(-budget, budget, size=x[patched_rows].shape)
            x[patched_rows] = np.clip(x[patched_rows] + noise, 0.0, 1.0)

    before = _metrics(model, train_set, trigger)
    tuned = model.copy()
    if config.epochs > 0:
        models.sgd_epochs(tuned, x, y, config.epochs,
                          config.lr_scale * config.train.learning_rate,
                          momentum=config.train.momentum,
                          batch_size=config.train.batch_size, seed=seed)
    after = _metrics(tuned, train_set, trigger)

    report = {"mode": mode, "seed": seed,
              "subset_size": k, "patched": m,
              "patch_budget": budget if mode in ("reversed_trigger",
                                                 "random_noise") else None,
              "before": before, "after": after,
              "config": config.to_dict()}
    return tuned, report


def write_report(report, path):
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True, default=float)
        f.write("\n")
