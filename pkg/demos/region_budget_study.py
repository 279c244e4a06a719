# region_budget_study.py
# How the anomaly index depends on where you probe and how hard:
#   1. fix the budget at 8/255 and widen a centred region -> a blended
#      (whole-image) trigger needs room before the target class stands out
#   2. fix a 4x4 corner region and raise the budget -> a patch trigger
#      needs amplitude before the corner flips the target class
# Trains one blend victim and one patch victim, then fills both curves.
# Runtime: ~3 min. Writes region_budget_curves.csv next to this script.

import csv
import os

from advprobe import bench
from advprobe.data import make_probe_set, synth_dataset
from advprobe.training import TrainConfig, train_model
from advprobe.triggers import PoisonPlan, TriggerSpec

# ---------- knobs ----------
DATASET = dict(num_classes=10, per_class=150, per_class_test=50,
               image_shape=(3, 32, 32), seed=0, template_scale=0.30,
               white_scale=0.08, smooth_scale=0.10)
TRAIN = TrainConfig(epochs=12, learning_rate=0.01)
REGION_SIZES = (16, 256, 1024)          # pixels, at fixed 8/255
BUDGETS = (8 / 255, 16 / 255, 32 / 255)  # at the fixed 4x4 corner
# ---------------------------

dataset = synth_dataset(**DATASET)
probes = make_probe_set(dataset, 10, seed=0)
rows = []

print("== blend victim: anomaly index vs region size @ 8/255 ==")
blend_plan = PoisonPlan(3, TriggerSpec("blend", 3, sigma=0.2, seed=1),
                        poison_rate=0.10)
blend_victim, rep = train_model(dataset, config=TRAIN,
                                poison_plan=blend_plan, seed=100)
print(f"ASR-b {rep.attack_success:.2f}")
for k in REGION_SIZES:
    masks = bench.center_region(probes, k)
    index, _ = bench.anomaly_at(blend_victim, probes, masks, 8 / 255)
    rows.append({"trigger": "blend", "region_pixels": k,
                 "budget": 8 / 255, "anomaly_index": index})
    print(f"  {k:5d} px -> {index:6.2f}")

print("\n== patch victim: anomaly index vs budget @ 4x4 corner ==")
patch_plan = PoisonPlan(5, TriggerSpec("patch", 5, size=4),
                        poison_rate=0.10)
patch_victim, rep = train_model(dataset, config=TRAIN,
                                poison_plan=patch_plan, seed=101)
print(f"ASR-b {rep.attack_success:.2f}")
corner = bench.corner_region(probes, 4, "BR")
for budget in BUDGETS:
    index, _ = bench.anomaly_at(patch_victim, probes, corner, budget)
    rows.append({"trigger": "patch", "region_pixels": 16,
                 "budget": budget, "anomaly_index": index})
    print(f"  {budget*255:5.1f}/255 -> {index:6.2f}")

out = os.path.join(os.path.dirname(os.path.abspath(__file__)),
                   "region_budget_curves.csv")
with open(out, "w", newline="") as f:
    writer = csv.DictWriter(f, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)
print(f"\nwrote {out}")
print("both curves should rise: blends want area, patches want amplitude")
