"""Benchmark metrics and experiment sweeps.

Detection ACC follows the convention of counting flagged infected models
only; clean-model behaviour enters through AUROC, whose per-model score is
the maximum anomaly index over the stages a detection actually executed.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .anomaly import class_scores, mad_anomaly
from .data import make_probe_set
from .detect import DetectConfig, detect
from .probe import ProbeConfig, masked_pgd
from .training import TrainConfig, train_model
from .triggers import PoisonPlan, TriggerSpec

SWEEP_KINDS = ("trigger_size", "transparency", "multi_trigger",
               "samples_per_class", "region_strategy", "budget_strategy",
               "region_budget_grid")


def detection_acc(rows, attack=None):
    """Fraction of infected models (optionally of one attack) flagged."""
    picked = [r for r in rows
              if r["true_status"] == "infected"
              and (attack is None or r["attack"] == attack)]
    if not picked:
        raise ValueError(f"no infected rows for attack filter {attack!r}")
    return sum(r["verdict"] == "infected" for r in picked) / len(picked)


def false_positive_rate(rows):
    clean = [r for r in rows if r["true_status"] == "clean"]
    if not clean:
        raise ValueError("no clean rows")
    return sum(r["verdict"] == "infected" for r in clean) / len(clean)


def auroc(scores, labels):
    """P(random infected score > random clean score), ties at half credit."""
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auroc needs both an infected and a clean score")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


def average_attacks(per_attack_accs):
    """Unweighted mean of per-attack detection accuracies."""
    accs = list(per_attack_accs.values()) \
        if isinstance(per_attack_accs, dict) else list(per_attack_accs)
    if not accs:
        raise ValueError("need at least one attack accuracy")
    return float(sum(accs) / len(accs))


@dataclass
class BenchmarkResult:
    sweep_point: dict
    rows: list = field(default_factory=list)
    missing: list = field(default_factory=list)

    def summary(self):
        out = dict(self.sweep_point)
        infected = [r for r in self.rows if r["true_status"] == "infected"]
        if infected:
            out["detection_acc"] = detection_acc(self.rows)
            per_attack = {a: detection_acc(self.rows, attack=a)
                          for a in sorted({r["attack"] for r in infected})}
            if len(per_attack) > 1:
                out["per_attack_acc"] = per_attack
                out["average_attacks"] = average_attacks(per_attack)
            hits = [r for r in infected if r["verdict"] == "infected"]
            if hits:
                out["target_hit_rate"] = (
                    sum(r.get("suspected_target") == r.get("true_target")
                        for r in hits) / len(hits))
        if any(r["true_status"] == "clean" for r in self.rows):
            out["false_positive_rate"] = false_positive_rate(self.rows)
        labels = [int(r["true_status"] == "infected") for r in self.rows]
        if len(set(labels)) == 2:
            out["auroc"] = auroc([r["max_index"] for r in self.rows], labels)
        if self.missing:
            out["missing_models"] = list(self.missing)
        return out


def model_row(model_id, true_status, report, true_target=None, attack=None,
              extra=None):
    row = {"model_id": model_id, "true_status": true_status,
           "attack": attack if attack else
           ("clean" if true_status == "clean" else "unknown"),
           "true_target": true_target,
           "verdict": report.verdict,
           "suspected_target": report.suspected_target,
           "stopping_stage": report.stopping_stage,
           "max_index": report.max_anomaly_index,
           "stages_run": len(report.trace),
           "total_attempts": sum(t["attempts"] for t in report.trace),
           "wall_time": report.wall_time}
    if extra:
        row.update(extra)
    return row


# ---------------------------------------------------------------------------
# sweep driver
# ---------------------------------------------------------------------------

_CSV_FIELDS = ["sweep", "point", "model_id", "true_status", "attack",
               "true_target", "verdict", "suspected_target",
               "stopping_stage", "max_index", "stages_run",
               "total_attempts", "wall_time"]


def _row_key(row):
    return (str(row["sweep"]), str(row["point"]), str(row["model_id"]))


def _load_existing(csv_path):
    done = {}
    if os.path.isfile(csv_path):
        with open(csv_path, newline="") as f:
            for row in csv.DictReader(f):
                done[_row_key(row)] = row
    return done


def _append_rows(csv_path, rows):
    new_file = not os.path.isfile(csv_path)
    with open(csv_path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=_CSV_FIELDS,
                                extrasaction="ignore")
        if new_file:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)


@dataclass
class SweepConfig:
    dataset: object
    train: TrainConfig = field(default_factory=lambda: TrainConfig())
    detect: DetectConfig = field(default_factory=DetectConfig)
    samples_per_class: int = 4
    num_infected: int = 4
    num_clean: int = 0
    seed: int = 0
    target_labels: tuple = None     # default: cycle over classes
    registry_root: str = None       # when set, look models up instead of
                                    # training; absent ids become "missing"

    def targets(self):
        if self.target_labels is not None:
            return list(self.target_labels)
        k = self.dataset.num_classes
        return [j % k for j in range(self.num_infected)]


def _obtain_model(config, model_id, build):
    """Registry lookup when a root is configured, else train on demand."""
    if config.registry_root is None:
        return build()
    from . import store
    try:
        model, _ = store.load_registered(model_id, root=config.registry_root)
        return model
    except store.RegistryError:
        return None


def _sweep_points(kind, config):
    if kind == "trigger_size":
        return [{"trigger_size": s} for s in (2, 4, 6, 8)]
    if kind == "transparency":
        return [{"sigma": s} for s in (0.1, 0.2, 0.3)]
    if kind == "multi_trigger":
        return [{"count": c} for c in (1, 2, 3, 4, 5)]
    if kind == "samples_per_class":
        return [{"samples_per_class": s} for s in (4, 10, 20)]
    if kind == "region_strategy":
        return [{"region_strategy": s} for s in ("attention", "random")]
    if kind == "budget_strategy":
        return [{"budget_strategy": s}
                for s in ("feedback", "cumulative", "exponential")]
    raise ValueError(f"unknown sweep kind {kind!r}")


def _plan_for_point(kind, point, target):
    if kind == "trigger_size":
        trig = TriggerSpec("patch", target, size=point["trigger_size"])
    elif kind == "transparency":
        trig = TriggerSpec("blend", target, sigma=point["sigma"],
                           seed=target + 1)
    elif kind == "multi_trigger":
        trig = TriggerSpec("multi_patch", target, count=point["count"],
                           seed=target + 1)
    else:
        trig = TriggerSpec("patch", target, size=4)
    return PoisonPlan(target, trig, poison_rate=0.10)


def _detect_config_for_point(kind, point, base):
    cfg = DetectConfig(tau=base.tau, region_schedule=base.region_schedule,
                       scheduler=base.scheduler, probe=base.probe,
                       region_strategy=base.region_strategy,
                       nested_regions=base.nested_regions)
    if kind == "region_strategy":
        cfg.region_strategy = point["region_strategy"]
    if kind == "budget_strategy":
        from .budget import SchedulerConfig
        s = base.scheduler
        cfg.scheduler = SchedulerConfig(
            epsilon0=s.epsilon0, kappa=s.kappa, eta=s.eta, lam=s.lam,
            max_attempts=s.max_attempts, strategy=point["budget_strategy"],
            cumulative_step=s.cumulative_step, step_delta=s.step_delta,
            xi=s.xi)
    return cfg


def run_sweep(kind, config, out_dir, csv_name="results.csv"):
    """Run one sweep, appending per-model rows to a resumable CSV.

    Rows already present (same sweep, point, model id) are skipped, so a
    crashed run can be re-launched and completes only the missing points.
    Returns the list of BenchmarkResult, one per sweep point.
    """
    if kind == "region_budget_grid":
        return region_budget_grid(config, out_dir, csv_name)
    if kind not in SWEEP_KINDS:
        raise ValueError(f"unknown sweep kind {kind!r}")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, csv_name)
    done = _load_existing(csv_path)
    results = []
    for point in _sweep_points(kind, config):
        point_id = json.dumps(point, sort_keys=True)
        spc = point.get("samples_per_class", config.samples_per_class)
        probes = make_probe_set(config.dataset, spc, seed=config.seed)
        result = BenchmarkResult(sweep_point={"sweep": kind, **point})
        fresh = []
        for j, target in enumerate(config.targets()):
            model_id = f"{kind}-{point_id}-m{j}"
            key = (kind, point_id, model_id)
            if key in done:
                row = dict(done[key])
                row["max_index"] = float(row["max_index"])
                result.rows.append(row)
                continue
            plan = _plan_for_point(kind, point, target)
            model = _obtain_model(
                config, model_id,
                lambda: train_model(config.dataset, config=config.train,
                                    poison_plan=plan,
                                    seed=config.seed * 1000 + j)[0])
            if model is None:
                result.missing.append(model_id)
                continue
            report = detect(model, probes,
                            _detect_config_for_point(kind, point,
                                                     config.detect),
                            seed=config.seed)
            row = model_row(model_id, "infected", report, true_target=target,
                            attack=plan.trigger.kind)
            row.update(sweep=kind, point=point_id)
            result.rows.append(row)
            fresh.append(row)
        for j in range(config.num_clean):
            model_id = f"{kind}-{point_id}-c{j}"
            key = (kind, point_id, model_id)
            if key in done:
                row = dict(done[key])
                row["max_index"] = float(row["max_index"])
                result.rows.append(row)
                continue
            model = _obtain_model(
                config, model_id,
                lambda: train_model(config.dataset, config=config.train,
                                    seed=config.seed * 1000 + 500 + j)[0])
            if model is None:
                result.missing.append(model_id)
                continue
            report = detect(model, probes,
                            _detect_config_for_point(kind, point,
                                                     config.detect),
                            seed=config.seed)
            row = model_row(model_id, "clean", report)
            row.update(sweep=kind, point=point_id)
            result.rows.append(row)
            fresh.append(row)
        _append_rows(csv_path, fresh)
        results.append(result)
    summary = {"sweep": kind,
               "points": [r.summary() for r in results]}
    with open(os.path.join(out_dir, f"{kind}_summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=float)
        f.write("\n")
    return results


def anomaly_at(model, probes, region_masks, budget, probe_config=None):
    """One-shot anomaly index for a fixed region set and budget."""
    state = masked_pgd(model, probes, region_masks, budget,
                       probe_config or ProbeConfig(step_mode="scaled"))
    scores = class_scores(model, probes, state.probes)
    return mad_anomaly(scores).max_index, state


def corner_region(probes, size, location="BR"):
    from .triggers import _corner_slices
    n, _, h, w = probes.pixels.shape
    rs, cs = _corner_slices(location, size, h, w)
    masks = np.zeros((n, h, w), bool)
    masks[:, rs, cs] = True
    return masks


def center_region(probes, k):
    """Square-ish centred region of exactly k pixels."""
    n, _, h, w = probes.pixels.shape
    side = int(np.ceil(np.sqrt(k)))
    r0, c0 = (h - side) // 2, (w - side) // 2
    masks = np.zeros((n, h, w), bool)
    flat = [(r0 + i, c0 + j) for i in range(side) for j in range(side)][:k]
    for rr, cc in flat:
        masks[:, rr, cc] = True
    return masks


def region_budget_grid(config, out_dir, csv_name="results.csv",
                       region_sizes=(4, 64, 1024), budgets=(4 / 255, 8 / 255,
                                                            16 / 255)):
    """Anomaly index on a (region size x budget) grid for plot data."""
    os.makedirs(out_dir, exist_ok=True)
    probes = make_probe_set(config.dataset, config.samples_per_class,
                            seed=config.seed)
    n, _, h, w = probes.pixels.shape
    target = config.targets()[0]
    plan = _plan_for_point("transparency", {"sigma": 0.2}, target)
    model, _ = train_model(config.dataset, config=config.train,
                           poison_plan=plan, seed=config.seed * 1000)
    rows = []
    for k in region_sizes:
        masks = (np.ones((n, h, w), bool) if k >= h * w
                 else center_region(probes, k))
        for eps in budgets:
            idx, _ = anomaly_at(model, probes, masks, eps,
                                config.detect.probe)
            rows.append({"region_pixels": int(min(k, h * w)),
                         "budget": float(eps), "max_index": float(idx)})
    path = os.path.join(out_dir, "region_budget_grid.csv")
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["region_pixels", "budget", "max_index"])
        writer.writeheader()
        writer.writerows(rows)
    result = BenchmarkResult(sweep_point={"sweep": "region_budget_grid"},
                             rows=[])
    result.rows = rows
    return [result]
