"""The staged detection pipeline.

Stage 0 probes the whole image at the starting budget; its misclassification
rate becomes the attack boundary and the class scores get a first MAD check.
Every later stage shrinks the region (gradient-guided by default), re-budgets
with at most max_attempts probe rounds, and re-runs the MAD check. The run
stops at the first stage whose anomaly index clears the threshold.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .anomaly import class_scores, mad_anomaly
from .budget import SchedulerConfig, initial_boundary, run_stage_budget
from .models import ImageBatch, input_gradient_pixels
from .probe import ProbeConfig
from .regions import (RegionSchedule, ScheduleExhausted, attention_region,
                      random_region, stage_plan)

REGION_STRATEGIES = ("attention", "random")


@dataclass
class DetectConfig:
    tau: float = 3.5
    region_schedule: RegionSchedule = field(default_factory=RegionSchedule)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    probe: ProbeConfig = field(
        default_factory=lambda: ProbeConfig(step_mode="scaled"))
    region_strategy: str = "attention"
    nested_regions: bool = True

    def __post_init__(self):
        if self.region_strategy not in REGION_STRATEGIES:
            raise ValueError(
                f"unknown region strategy {self.region_strategy!r}")

    def to_dict(self):
        return {"tau": self.tau,
                "region_schedule": self.region_schedule.to_dict(),
                "scheduler": self.scheduler.to_dict(),
                "probe": self.probe.to_dict(),
                "region_strategy": self.region_strategy,
                "nested_regions": self.nested_regions}


@dataclass
class DetectionReport:
    verdict: str                     # "infected" | "clean"
    suspected_target: int | None
    stopping_stage: int | None
    trace: list                      # one dict per executed stage
    wall_time: float
    config: dict
    degenerate_boundary: bool = False
    final_state: object = None       # ProbeState of the last executed stage
    probe_labels: np.ndarray = None

    def to_dict(self):
        return {"verdict": self.verdict,
                "suspected_target": self.suspected_target,
                "stopping_stage": self.stopping_stage,
                "trace": self.trace,
                "degenerate_boundary": self.degenerate_boundary,
                "config": self.config}

    def to_json(self):
        """Canonical (byte-reproducible) report body; wall_time excluded."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @property
    def max_anomaly_index(self):
        return max(t["max_index"] for t in self.trace)


def _trace_entry(stage, cardinality, state, result):
    return {"stage": int(stage),
            "region_pixels": int(cardinality),
            "budget": float(state.budget),
            "asr_a": float(state.asr_a),
            "attempts": int(state.attempts),
            "max_index": float(result.max_index),
            "argmax_class": int(result.argmax_class)}


def detect(model, probe_set, config=None, seed=0):
    """Run the multi-stage probe loop and return a DetectionReport."""
    config = config or DetectConfig()
    if len(np.unique(probe_set.labels)) < model.num_classes:
        raise ValueError("probe set must cover every class")
    t0 = time.perf_counter()
    plan = stage_plan(model.input_shape, config.region_schedule)

    state, boundary = initial_boundary(model, probe_set, config.scheduler,
                                       config.probe, seed=seed)
    scores = class_scores(model, probe_set, state.probes)
    result = mad_anomaly(scores, config.tau)
    trace = [_trace_entry(0, plan[0], state, result)]

    zero_gradient = not np.any(
        input_gradient_pixels(model, probe_set.pixels, probe_set.labels))
    hard_degenerate = boundary.degenerate and zero_gradient

    if result.infected and not hard_degenerate:
        return _finish(t0, "infected", result.argmax_class, 0, trace,
                       config, boundary, state, probe_set)

    if hard_degenerate:
        return _finish(t0, "clean", None, None, trace, config, boundary,
                       state, probe_set)

    regions = state.regions
    eps = state.budget
    for stage, cardinality in enumerate(plan[1:], start=1):
        grads = input_gradient_pixels(
            model, probe_set.pixels.astype(np.float64) + state.probes,
            probe_set.labels)
        try:
            if config.region_strategy == "attention":
                regions = attention_region(grads, regions,
                                           config.region_schedule.alpha,
                                           nested=config.nested_regions)
            else:
                regions = random_region(regions,
                                        config.region_schedule.alpha,
                                        seed=seed * 1000 + stage)
        except ScheduleExhausted:
            break
        state = run_stage_budget(model, probe_set, regions, eps, boundary,
                                 config.scheduler, config.probe, seed=seed)
        eps = state.budget
        boundary.record(stage, eps, state.asr_a, state.attempts)
        scores = class_scores(model, probe_set, state.probes)
        result = mad_anomaly(scores, config.tau)
        trace.append(_trace_entry(stage, cardinality, state, result))
        if result.infected:
            return _finish(t0, "infected", result.argmax_class, stage,
                           trace, config, boundary, state, probe_set)
    return _finish(t0, "clean", None, None, trace, config, boundary, state,
                   probe_set)


def _finish(t0, verdict, target, stage, trace, config, boundary, state,
            probe_set):
    return DetectionReport(
        verdict=verdict, suspected_target=target, stopping_stage=stage,
        trace=trace, wall_time=time.perf_counter() - t0,
        config=config.to_dict(), degenerate_boundary=boundary.degenerate,
        final_state=state, probe_labels=np.asarray(probe_set.labels))


# ---------------------------------------------------------------------------
# probe archives
# ---------------------------------------------------------------------------

class ArchiveFormatError(Exception):
    pass


def export_probes(report, probe_set, dirpath):
    """Write the stopping-stage probes next to their source images."""
    state = report.final_state
    if state is None:
        raise ValueError("report carries no probe state to export")
    os.makedirs(dirpath, exist_ok=True)
    arrays = {"pixels": probe_set.pixels.astype("<f4"),
              "probes": state.probes.astype("<f8"),
              "regions": state.regions.astype("<u1"),
              "labels": np.asarray(probe_set.labels, "<i8")}
    manifest = {"format": "advprobe-archive-v1",
                "stage": report.stopping_stage
                if report.stopping_stage is not None
                else len(report.trace) - 1,
                "budget": float(state.budget),
                "verdict": report.verdict,
                "arrays": {}}
    for name, arr in arrays.items():
        fname = f"{name}.bin"
        with open(os.path.join(dirpath, fname), "wb") as f:
            f.write(np.ascontiguousarray(arr).tobytes())
        manifest["arrays"][name] = {"file": fname, "dtype": arr.dtype.str,
                                    "shape": list(arr.shape)}
    with open(os.path.join(dirpath, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_probes(dirpath):
    """Read a probe archive back; returns (arrays dict, manifest)."""
    mpath = os.path.join(dirpath, "manifest.json")
    if not os.path.isfile(mpath):
        raise ArchiveFormatError(f"no manifest.json under {dirpath}")
    with open(mpath) as f:
        manifest = json.load(f)
    if manifest.get("format") != "advprobe-archive-v1":
        raise ArchiveFormatError(
            f"unrecognised archive format {manifest.get('format')!r}")
    arrays = {}
    for name, entry in manifest["arrays"].items():
        raw = np.fromfile(os.path.join(dirpath, entry["file"]),
                          dtype=entry["dtype"])
        shape = tuple(entry["shape"])
        if raw.size != int(np.prod(shape)):
            raise ArchiveFormatError(
                f"{entry['file']}: expected {int(np.prod(shape))} values, "
                f"found {raw.size}")
        arrays[name] = raw.reshape(shape)
    return arrays, manifest
