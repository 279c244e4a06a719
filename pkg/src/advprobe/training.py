"""Model training and evaluation, including backdoor victim construction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .models import ClassifierHandle, forward_pixels, init_model, sgd_epochs
from .triggers import PoisonPlan, apply_trigger_batch


@dataclass
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64

    def to_dict(self):
        return {"epochs": self.epochs, "learning_rate": self.learning_rate,
                "momentum": self.momentum, "batch_size": self.batch_size}


@dataclass
class TrainReport:
    clean_accuracy: float
    attack_success: float | None
    train_losses: list[float]
    num_poisoned: int
    poisoned_indices: list[int] = field(default_factory=list, repr=False)

    def to_dict(self):
        return {"clean_accuracy": self.clean_accuracy,
                "attack_success": self.attack_success,
                "final_loss": self.train_losses[-1] if self.train_losses
                else None,
                "num_poisoned": self.num_poisoned}


def evaluate_accuracy(model, pixels, labels):
    if pixels.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty batch")
    pred = forward_pixels(model, pixels).argmax(axis=1)
    return float(np.mean(pred == labels))


def attack_success_rate(model, dataset, trigger):
    """Fraction of triggered test images pushed into the target class.

    Images whose true label already equals the target are excluded, so a
    constant-predictor cannot score by accident.
    """
    keep = dataset.y_test != trigger.target_label
    pixels = dataset.x_test[keep]
    if pixels.shape[0] == 0:
        raise ValueError("no non-target test samples to measure attack on")
    stamped = apply_trigger_batch(pixels, trigger)
    pred = forward_pixels(model, stamped).argmax(axis=1)
    return float(np.mean(pred == trigger.target_label))


def train_model(dataset, architecture="small_cnn", config=None,
                poison_plan=None, seed=0, widths=None):
    """Train a classifier on `dataset`, optionally poisoned first.

    Returns (model, TrainReport). The model's metadata records the dataset,
    seed, and (for poisoned training) the attack kind and target label.
    """
    from .triggers import poison_dataset  # local to avoid cycles in docs

    config = config or TrainConfig()
    train_ds = dataset
    poisoned_idx = []
    if poison_plan is not None:
        train_ds, poisoned_idx = poison_dataset(dataset, poison_plan,
                                                seed=seed)
    metadata = {
        "seed": int(seed),
        "dataset_id": dataset.dataset_id,
        "attack_id": poison_plan.trigger.kind if poison_plan else "clean",
        "target_label": (int(poison_plan.target_label)
                         if poison_plan else None),
    }
    model = init_model(architecture, dataset.num_classes, dataset.image_shape,
                       seed=seed, widths=widths, metadata=metadata)
    losses = sgd_epochs(model, train_ds.x_train, train_ds.y_train,
                        epochs=config.epochs,
                        learning_rate=config.learning_rate,
                        momentum=config.momentum,
                        batch_size=config.batch_size, seed=seed)
    c_acc = evaluate_accuracy(model, dataset.x_test, dataset.y_test)
    asr = (attack_success_rate(model, dataset, poison_plan.trigger)
           if poison_plan else None)
    report = TrainReport(clean_accuracy=c_acc, attack_success=asr,
                         train_losses=losses,
                         num_poisoned=len(poisoned_idx),
                         poisoned_indices=poisoned_idx)
    return model, report


@dataclass
class ZooEntry:
    model: ClassifierHandle
    report: TrainReport
    infected: bool
    trigger: object | None = None


def build_model_zoo(dataset, plans, num_clean, architecture="small_cnn",
                    config=None, seed=0, widths=None):
    """Train one victim per poison plan plus `num_clean` clean models.

    Seeds are drawn deterministically from `seed`; entry order is victims
    (plan order) then clean models.
    """
    entries = []
    base = 1000 * seed
    for j, plan in enumerate(plans):
        model, report = train_model(dataset, architecture, config,
                                    poison_plan=plan, seed=base + j,
                                    widths=widths)
        entries.append(ZooEntry(model, report, infected=True,
                                trigger=plan.trigger))
    for j in range(num_clean):
        model, report = train_model(dataset, architecture, config,
                                    poison_plan=None,
                                    seed=base + 500 + j, widths=widths)
        entries.append(ZooEntry(model, report, infected=False))
    return entries
