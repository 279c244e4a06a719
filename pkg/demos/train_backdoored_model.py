# train_backdoored_model.py
# Poison a synthetic dataset with a 4x4 corner patch, train a victim CNN
# next to a clean reference, and register both for the other demos.
# - prints clean accuracy and backdoor attack success (ASR-b)
# - writes models into ./demo_registry so detect/unlearn demos can reuse them
# Runtime: ~2 min on one CPU core.

import time

from advprobe import store
from advprobe.data import synth_dataset
from advprobe.training import TrainConfig, train_model
from advprobe.triggers import PoisonPlan, TriggerSpec, apply_trigger_batch

# ---------- knobs ----------
REGISTRY = "demo_registry"
TARGET_LABEL = 2
POISON_RATE = 0.10
TRIGGER = TriggerSpec("patch", TARGET_LABEL, size=4, location="BR")
DATASET = dict(num_classes=10, per_class=150, per_class_test=50,
               image_shape=(3, 32, 32), seed=0, template_scale=0.30,
               white_scale=0.08, smooth_scale=0.10)
TRAIN = TrainConfig(epochs=12, learning_rate=0.01)
# ---------------------------

print("== dataset ==")
dataset = synth_dataset(**DATASET)
print(f"{dataset.dataset_id}: {dataset.x_train.shape[0]} train / "
      f"{dataset.x_test.shape[0]} test images, "
      f"{dataset.num_classes} classes")
store.register_dataset(dataset, "demo-synth", root=REGISTRY)

print("\n== victim: dirty-label patch poisoning ==")
plan = PoisonPlan(TARGET_LABEL, TRIGGER, poison_rate=POISON_RATE)
t0 = time.time()
victim, victim_report = train_model(dataset, config=TRAIN,
                                    poison_plan=plan, seed=100)
print(f"trained in {time.time() - t0:.0f}s, "
      f"{victim_report.num_poisoned} poisoned samples")
print(f"C-ACC {victim_report.clean_accuracy:.3f}   "
      f"ASR-b {victim_report.attack_success:.3f}")

print("\n== clean reference ==")
t0 = time.time()
clean, clean_report = train_model(dataset, config=TRAIN, seed=0)
print(f"trained in {time.time() - t0:.0f}s, "
      f"C-ACC {clean_report.clean_accuracy:.3f}")

# a stamped image shows what the backdoor input looks like
stamped = apply_trigger_batch(dataset.x_test[:1], TRIGGER)
corner = stamped[0, :, -4:, -4:]
print(f"\ntrigger patch occupies the bottom-right 4x4 block "
      f"(stamped values ~{corner.mean():.2f} vs image mean "
      f"~{dataset.x_test[:1].mean():.2f})")

store.register_model(victim, {"clean_accuracy": victim_report.clean_accuracy,
                              "attack_success": victim_report.attack_success,
                              "attack": TRIGGER.to_dict()},
                     "demo-victim", root=REGISTRY)
store.register_model(clean, {"clean_accuracy": clean_report.clean_accuracy},
                     "demo-clean", root=REGISTRY)
print(f"\nregistered demo-victim and demo-clean under ./{REGISTRY}")
