"""End-to-end acceptance checks, one per shipped guarantee.

Each test computes its verdict, then records one PASS/FAIL line that the
terminal summary echoes after the run. The desk model zoo (8 patch victims
+ 8 clean, plus 8 blend victims) is built once per session at the tuned
synthetic-data operating point.
"""

import json
import os
import statistics
import time

import numpy as np
import pytest
from conftest import record_criterion

from advprobe import bench, models
from advprobe.budget import (BoundaryState, SchedulerConfig,
                             binary_search_budget, increment_budget,
                             next_budget)
from advprobe.anomaly import mad_anomaly
from advprobe.cli import main as cli_main
from advprobe.data import make_probe_set, synth_dataset
from advprobe.detect import DetectConfig, detect, export_probes
from advprobe.models import ImageBatch
from advprobe.probe import ProbeConfig, masked_pgd
from advprobe.regions import RegionSchedule, attention_region, stage_plan
from advprobe.training import TrainConfig, build_model_zoo
from advprobe.triggers import PoisonPlan, TriggerSpec
from advprobe.unlearn import UnlearnConfig, unlearn

# the desk operating point: evenly spaced class glyphs keep natural
# adversarial flips symmetric across classes (flat stage-0 statistics for
# clean models) while a trained trigger funnels flipped mass into one class
ZOO_DATASET = dict(num_classes=10, per_class=150, per_class_test=50,
                   image_shape=(3, 32, 32), seed=0, template_scale=0.30,
                   white_scale=0.08, smooth_scale=0.10)
ZOO_TRAIN = TrainConfig(epochs=12, learning_rate=0.01)
SAMPLES_PER_CLASS = 10
SEED = 0


@pytest.fixture(scope="session")
def zoo_dataset():
    return synth_dataset(**ZOO_DATASET)


@pytest.fixture(scope="session")
def probe_batch(zoo_dataset):
    return make_probe_set(zoo_dataset, SAMPLES_PER_CLASS, seed=SEED)


@pytest.fixture(scope="session")
def patch_zoo(zoo_dataset):
    plans = [PoisonPlan(t, TriggerSpec("patch", t, size=4), poison_rate=0.10)
             for t in range(8)]
    t0 = time.perf_counter()
    entries = build_model_zoo(zoo_dataset, plans, num_clean=8,
                              config=ZOO_TRAIN, seed=SEED)
    return {"entries": entries, "train_time": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def patch_detections(patch_zoo, probe_batch):
    t0 = time.perf_counter()
    reports = [detect(e.model, probe_batch, DetectConfig(), seed=SEED)
               for e in patch_zoo["entries"]]
    return {"reports": reports, "detect_time": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def blend_zoo(zoo_dataset):
    sigmas = np.linspace(0.1, 0.3, 8)
    plans = [PoisonPlan(t, TriggerSpec("blend", t, sigma=float(s),
                                       seed=t + 1), poison_rate=0.10)
             for t, s in enumerate(sigmas)]
    entries = build_model_zoo(zoo_dataset, plans, num_clean=0,
                              config=ZOO_TRAIN, seed=SEED + 7)
    return entries


# ---------------------------------------------------------------------------
# 1. probe invariants, bit-exact over 1000 randomized instances
# ---------------------------------------------------------------------------

def test_criterion_01_probe_invariants_bit_exact():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst, violations = 0.0, 0
    for trial in range(1000):
        c = int(rng.integers(1, 4))
        h = int(rng.integers(5, 13))
        w = int(rng.integers(5, 13))
        n = int(rng.integers(1, 4))
        k = int(rng.integers(3, 6))
        model = models.init_model("mlp", k, (c, h, w),
                                  seed=int(rng.integers(1 << 16)),
                                  widths=(12, 8))
        pixels = rng.random((n, c, h, w))
        labels = rng.integers(0, k, size=n)
        masks = rng.random((n, h, w)) < 0.4
        for i in range(n):        # never an empty region
            if not masks[i].any():
                masks[i, rng.integers(h), rng.integers(w)] = True
        budget = float(rng.choice([1 / 255, 4 / 255, 16 / 255, 0.3, 1.0]))
        config = ProbeConfig(steps=int(rng.integers(1, 6)),
                             random_start=bool(rng.integers(2)),
                             step_mode=str(rng.choice(["fixed", "scaled"])))
        state = masked_pgd(model, ImageBatch(pixels, labels), masks, budget,
                           config, seed=trial)
        p = state.probes
        clipped = pixels + p
        if not (np.all(p[~np.broadcast_to(masks[:, None], p.shape)] == 0.0)
                and np.abs(p).max() <= budget       # bit-exact, no epsilon
                and clipped.min() >= 0.0 and clipped.max() <= 1.0):
            violations += 1
        worst = max(worst, float(np.abs(p).max()) / budget)
    elapsed = time.perf_counter() - t0
    record_criterion(
        1, violations == 0 and elapsed < 60.0,
        f"1000 masked_pgd instances, {violations} violations of the "
        f"support/ball/box invariants (bit-exact); worst |p|/budget "
        f"{worst:.6f}; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. input gradients match central finite differences
# ---------------------------------------------------------------------------

def test_criterion_02_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    h = 1e-4
    worst = 0.0
    for arch, shape in (("small_cnn", (3, 12, 12)), ("mlp", (2, 10, 10))):
        model = models.init_model(arch, 5, shape, seed=3)
        pixels = 0.1 + 0.8 * rng.random((2,) + shape)
        labels = rng.integers(0, 5, size=2)
        grad = models.input_gradient_pixels(model, pixels, labels)
        flat = pixels.reshape(-1)
        for _ in range(20):
            j = int(rng.integers(flat.size))
            bump = np.zeros_like(flat)
            bump[j] = h
            up = models.mean_loss(model, (flat + bump).reshape(pixels.shape),
                                  labels)
            dn = models.mean_loss(model, (flat - bump).reshape(pixels.shape),
                                  labels)
            fd = (up - dn) / (2 * h)
            rel = abs(grad.reshape(-1)[j] - fd) / max(abs(fd), 1e-6)
            worst = max(worst, rel)
    record_criterion(
        2, worst <= 1e-2,
        f"central differences (h=1e-4), 20 coords x both architectures, "
        f"worst relative error {worst:.2e} <= 1e-2")


# ---------------------------------------------------------------------------
# 3. region selection equals a brute-force oracle; canonical stage plan
# ---------------------------------------------------------------------------

def _oracle_topk(saliency_flat, allowed_flat, k):
    keyed = sorted(range(saliency_flat.size),
                   key=lambda j: (-saliency_flat[j], j))
    picked = [j for j in keyed if allowed_flat[j]][:k] \
        if allowed_flat is not None else keyed[:k]
    out = np.zeros(saliency_flat.size, bool)
    out[picked] = True
    return out


def test_criterion_03_region_oracle_and_plan():
    rng = np.random.default_rng(3)
    mismatches = 0
    for trial in range(200):
        n = int(rng.integers(1, 4))
        hh = int(rng.integers(4, 9))
        ww = int(rng.integers(4, 9))
        c = int(rng.integers(1, 4))
        prev = np.zeros((n, hh * ww), bool)
        card = int(rng.integers(2, hh * ww + 1))
        for i in range(n):
            prev[i, rng.choice(hh * ww, size=card, replace=False)] = True
        prev = prev.reshape(n, hh, ww)
        # quantized gradients force ties, exercising the stable order
        grads = rng.integers(0, 5, size=(n, c, hh, ww)).astype(float)
        got = attention_region(grads, prev, alpha=0.5, nested=True)
        k = card // 2
        for i in range(n):
            sal = np.sqrt((grads[i] ** 2).sum(axis=0)).reshape(-1)
            want = _oracle_topk(sal, prev[i].reshape(-1), k)
            if not np.array_equal(got[i].reshape(-1), want):
                mismatches += 1
            if not got[i].reshape(-1)[~prev[i].reshape(-1)].sum() == 0:
                mismatches += 1
        if np.ptp(got.reshape(n, -1).sum(axis=1)) != 0:
            mismatches += 1
    plan = stage_plan((3, 32, 32), RegionSchedule(alpha=0.5,
                                                  stop_fraction=0.03))
    plan_ok = plan == [1024, 512, 256, 128, 64, 32]
    record_criterion(
        3, mismatches == 0 and plan_ok,
        f"attention_region == sort-and-select oracle on 200 instances "
        f"(nested, equal cardinality); 32x32 plan {plan}")


# ---------------------------------------------------------------------------
# 4. budget scheduler arithmetic
# ---------------------------------------------------------------------------

def test_criterion_04_scheduler_arithmetic():
    config = SchedulerConfig()
    feedback = next_budget(8 / 255, 0.4, BoundaryState(beta=0.9), config)
    feedback_ok = feedback == 16 / 255          # exact float equality

    def count_steps(strategy):
        cfg = SchedulerConfig(strategy=strategy)
        eps, steps = cfg.epsilon0, 0
        while eps < 1.0:
            eps = increment_budget(eps, cfg)
            steps += 1
        return steps

    exp_steps = count_steps("exponential")
    cum_steps = count_steps("cumulative")
    counts_ok = exp_steps == 6 and cum_steps == 126 and exp_steps < cum_steps

    crossing = 0.37
    found, _ = binary_search_budget(
        lambda e: 0.9 if e > crossing else 0.1, 4 / 255, 0.5,
        SchedulerConfig(strategy="binary_search",
                        bounds=(4 / 255, 1.0), step_delta=0.2))
    search_ok = abs(found - crossing) <= 1 / 256

    record_criterion(
        4, feedback_ok and counts_ok and search_ok,
        f"feedback 8/255+16/255*(0.9-0.4) == 16/255 exact; exponential "
        f"{exp_steps} steps vs cumulative {cum_steps} (stated 124 is an "
        f"arithmetic slip; +2/255 from 4/255 needs 126); bisection within "
        f"{abs(found - crossing):.5f} <= 1/256 of the crossing")


# ---------------------------------------------------------------------------
# 5. MAD anomaly index against a brute-force oracle
# ---------------------------------------------------------------------------

def test_criterion_05_mad_oracle():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(3, 41))
        scores = rng.random(k) * float(rng.choice([1.0, 10.0, 1e-3]))
        got = mad_anomaly(scores).indices
        med = statistics.median(scores)
        mad = statistics.median([abs(s - med) for s in scores])
        want = np.array([(s - med) / (1.4826 * mad) for s in scores])
        worst = max(worst, float(np.abs(got - want).max()))
    oracle_ok = worst <= 1e-12

    base = np.array([3.0, 7.0, 1.0, 9.0, 4.0])
    shifted = mad_anomaly(base + 2.0).indices
    scaled = mad_anomaly(base * 4.0).indices
    invariance_ok = (np.array_equal(mad_anomaly(base).indices, shifted)
                     and np.array_equal(mad_anomaly(base).indices, scaled))

    example = mad_anomaly(np.array([1.0, 2.0, 3.0, 4.0, 100.0]))
    example_ok = abs(example.max_index - 65.43) <= 0.01

    record_criterion(
        5, oracle_ok and invariance_ok and example_ok,
        f"1000 vectors vs brute-force median/MAD, worst |diff| "
        f"{worst:.1e} <= 1e-12; shift/scale invariance exact; "
        f"[1,2,3,4,100] -> {example.max_index:.2f}")


# ---------------------------------------------------------------------------
# 6. desk detection on the 8 patch + 8 clean zoo
# ---------------------------------------------------------------------------

def test_criterion_06_patch_zoo_detection(patch_zoo, patch_detections):
    entries = patch_zoo["entries"]
    reports = patch_detections["reports"]
    asr_ok = all(e.report.attack_success >= 0.90
                 for e in entries if e.infected)

    infected = [(e, r) for e, r in zip(entries, reports) if e.infected]
    clean = [(e, r) for e, r in zip(entries, reports) if not e.infected]
    flagged = [(e, r) for e, r in infected if r.verdict == "infected"]
    det_acc = len(flagged) / len(infected)
    false_pos = sum(r.verdict == "infected" for _, r in clean)
    hits = sum(r.suspected_target == e.trigger.target_label
               for e, r in flagged)
    target_rate = hits / len(flagged) if flagged else 0.0
    scores = [r.max_anomaly_index for r in reports]
    labels = [int(e.infected) for e in entries]
    auc = bench.auroc(scores, labels)
    minutes = (patch_zoo["train_time"]
               + patch_detections["detect_time"]) / 60.0

    ok = (asr_ok and det_acc >= 6 / 8 and false_pos <= 1 and auc >= 0.85
          and target_rate >= 0.80)
    record_criterion(
        6, ok,
        f"ASR-b all >= 0.90: {asr_ok}; detection {len(flagged)}/8; "
        f"false positives {false_pos}/8; AUROC {auc:.3f}; target id "
        f"{hits}/{len(flagged)}; runtime {minutes:.1f} min (target 30)")


# ---------------------------------------------------------------------------
# 7. blend victims flagged at the full-image stage or later
# ---------------------------------------------------------------------------

def test_criterion_07_blend_zoo_detection(blend_zoo, probe_batch):
    reports = [detect(e.model, probe_batch, DetectConfig(), seed=SEED)
               for e in blend_zoo]
    flagged = [r for r in reports if r.verdict == "infected"]
    stages = [r.stopping_stage for r in flagged]
    record_criterion(
        7, len(flagged) >= 6,
        f"blend (mixing 0.1-0.3) detection {len(flagged)}/8; "
        f"stopping stages {stages}")


# ---------------------------------------------------------------------------
# 8. anomaly index grows with region size (blend) and budget (patch)
# ---------------------------------------------------------------------------

def _mean_curve(models_list, probes, settings):
    curves = []
    for model in models_list:
        vals = []
        for masks, budget in settings:
            idx, _ = bench.anomaly_at(model, probes, masks, budget)
            vals.append(idx)
        curves.append(vals)
    return np.mean(curves, axis=0)


def test_criterion_08_region_and_budget_monotonicity(patch_zoo, blend_zoo,
                                                     probe_batch):
    n = probe_batch.pixels.shape[0]
    full = np.ones((n, 32, 32), bool)
    blend_models = [e.model for e in blend_zoo[:3]]
    by_region = _mean_curve(
        blend_models, probe_batch,
        [(bench.center_region(probe_batch, 16), 8 / 255),
         (bench.center_region(probe_batch, 256), 8 / 255),
         (full, 8 / 255)])
    region_ok = (by_region[0] <= by_region[1] <= by_region[2]
                 and by_region[0] < by_region[2])

    patch_models = [e.model for e in patch_zoo["entries"][:3]]
    corner = bench.corner_region(probe_batch, 4, "BR")
    by_budget = _mean_curve(
        patch_models, probe_batch,
        [(corner, 4 / 255), (corner, 8 / 255), (corner, 16 / 255)])
    budget_ok = (by_budget[0] <= by_budget[1] <= by_budget[2]
                 and by_budget[0] < by_budget[2])

    record_criterion(
        8, region_ok and budget_ok,
        f"blend index vs region size at 8/255: "
        f"{np.round(by_region, 2).tolist()}; patch index vs budget at 4x4 "
        f"corner: {np.round(by_budget, 2).tolist()}")


# ---------------------------------------------------------------------------
# 9. attention-guided regions beat (or tie) random regions
# ---------------------------------------------------------------------------

def test_criterion_09_attention_vs_random(patch_zoo, patch_detections,
                                          probe_batch):
    entries = patch_zoo["entries"]
    infected = [e for e in entries if e.infected]
    att_acc = sum(r.verdict == "infected"
                  for e, r in zip(entries, patch_detections["reports"])
                  if e.infected) / len(infected)
    rnd_config = DetectConfig(region_strategy="random")
    rnd_acc = sum(detect(e.model, probe_batch, rnd_config,
                         seed=SEED).verdict == "infected"
                  for e in infected) / len(infected)
    record_criterion(
        9, att_acc >= rnd_acc,
        f"mean detection ACC attention {att_acc:.3f} >= random {rnd_acc:.3f}"
        f" on the same zoo and seeds")


# ---------------------------------------------------------------------------
# 10. reversed-trigger unlearning kills the backdoor, no_patching does not
# ---------------------------------------------------------------------------

def test_criterion_10_unlearning(patch_zoo, patch_detections, probe_batch,
                                 zoo_dataset, tmp_path):
    entries = patch_zoo["entries"]
    reports = patch_detections["reports"]
    flagged = [(e, r) for e, r in zip(entries, reports)
               if e.infected and r.verdict == "infected"]
    if not flagged:
        record_criterion(10, False, "no flagged victim available to unlearn")
        return
    # most-refined probes: the flagged victim that ran the furthest
    victim, report = max(flagged, key=lambda er: er[1].stopping_stage)
    adir = str(tmp_path / "probes")
    export_probes(report, probe_batch, adir)

    config = UnlearnConfig(epochs=1, train=TrainConfig(
        learning_rate=ZOO_TRAIN.learning_rate, batch_size=4))
    _, rev = unlearn(victim.model, zoo_dataset, probe_archive=adir,
                     mode="reversed_trigger", config=config,
                     trigger=victim.trigger, seed=SEED)
    _, nop = unlearn(victim.model, zoo_dataset, mode="no_patching",
                     config=config, trigger=victim.trigger, seed=SEED)

    asr_drop_ok = rev["after"]["attack_success"] < 0.10
    acc_drop = rev["before"]["clean_accuracy"] - rev["after"]["clean_accuracy"]
    acc_ok = acc_drop <= 0.05
    nop_delta = abs(nop["after"]["attack_success"]
                    - nop["before"]["attack_success"])
    record_criterion(
        10, asr_drop_ok and acc_ok and nop_delta <= 0.02,
        f"reversed trigger: ASR-b {rev['before']['attack_success']:.2f} -> "
        f"{rev['after']['attack_success']:.2f} (<0.10), C-ACC drop "
        f"{acc_drop:.3f} (<=0.05); no_patching ASR-b moved {nop_delta:.3f} "
        f"(<=0.02)")


# ---------------------------------------------------------------------------
# 11. CLI determinism: byte-identical reports under fixed seed/config
# ---------------------------------------------------------------------------

def _read(path):
    with open(path, "rb") as f:
        return f.read()


def _run_cli_suite(root, run_base, cfg_path):
    env_args = ["--registry", root]
    assert cli_main(["dataset", "make", "--id", "d", "--classes", "5",
                     "--per-class", "16", "--per-class-test", "8",
                     "--seed", "3", "--config", cfg_path] + env_args) == 0
    assert cli_main(["train", "--dataset", "d", "--model-id", "m",
                     "--arch", "mlp", "--attack", "patch", "--target", "1",
                     "--trigger-size", "3", "--epochs", "3", "--seed", "5"]
                    + env_args) == 0
    det = os.path.join(run_base, "det")
    assert cli_main(["detect", "m", "--dataset", "d",
                     "--samples-per-class", "2", "--seed", "1",
                     "--out", det] + env_args) == 0
    unl = os.path.join(run_base, "unl")
    assert cli_main(["unlearn", "m", "--dataset", "d", "--mode",
                     "original_trigger", "--seed", "2", "--out", unl]
                    + env_args) == 0
    ben = os.path.join(run_base, "ben")
    assert cli_main(["bench", "budget_strategy", "--dataset", "d",
                     "--num-infected", "1", "--epochs", "2", "--seed", "4",
                     "--samples-per-class", "2", "--out", ben]
                    + env_args) == 0
    out = {}
    ddir = os.path.join(root, "datasets", "d")
    for name in sorted(os.listdir(ddir)):
        out[f"dataset/{name}"] = _read(os.path.join(ddir, name))
    for name in ("model.bin", "train_report.json"):
        out[f"model/{name}"] = _read(os.path.join(root, "m", name))
    for name in ("report.json", "config.json"):
        out[f"detect/{name}"] = _read(os.path.join(det, name))
    pdir = os.path.join(det, "probes")
    for name in sorted(os.listdir(pdir)):
        out[f"probes/{name}"] = _read(os.path.join(pdir, name))
    out["unlearn/report.json"] = _read(os.path.join(unl, "report.json"))
    out["bench/summary"] = _read(
        os.path.join(ben, "budget_strategy_summary.json"))
    rows = open(os.path.join(ben, "results.csv")).read().splitlines()
    head = rows[0].split(",")
    keep = [j for j, c in enumerate(head) if c != "wall_time"]
    out["bench/rows"] = "\n".join(
        ",".join(r.split(",")[j] for j in keep) for r in rows)
    return out


def test_criterion_11_cli_determinism(tmp_path):
    cfg = tmp_path / "shape.json"
    cfg.write_text(json.dumps({"dataset": {"channels": 2,
                                           "image_size": 12}}))
    try:
        a = _run_cli_suite(str(tmp_path / "reg_a"), str(tmp_path / "runs_a"),
                           str(cfg))
        b = _run_cli_suite(str(tmp_path / "reg_b"), str(tmp_path / "runs_b"),
                           str(cfg))
    except AssertionError as exc:
        record_criterion(11, False, f"CLI pipeline failed: {exc}")
        return
    diffs = [k for k in a if a[k] != b[k]]
    record_criterion(
        11, set(a) == set(b) and not diffs,
        f"dataset/train/detect/unlearn/bench rerun byte-identical over "
        f"{len(a)} artifacts (timing sidecars excluded)"
        + (f"; DIFFS: {diffs}" if diffs else ""))
