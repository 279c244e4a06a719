# detect_walkthrough.py
# Scan the models registered by train_backdoored_model.py, narrating the
# global-to-local probe loop stage by stage:
#   stage 0 probes the whole image at 4/255 and measures the attack
#   boundary; later stages halve the region under the gradient saliency
#   map while the budget follows the attack boundary feedback rule.
# The victim should light up one class well above the MAD threshold; the
# clean reference should stay flat through the final 3% region.
# Run train_backdoored_model.py first. Runtime: ~4 min.

from advprobe import store
from advprobe.data import make_probe_set
from advprobe.detect import DetectConfig, detect, export_probes

# ---------- knobs ----------
REGISTRY = "demo_registry"
SAMPLES_PER_CLASS = 10
SEED = 0
# ---------------------------

dataset = store.resolve_dataset("demo-synth", root=REGISTRY)
probes = make_probe_set(dataset, SAMPLES_PER_CLASS, seed=SEED)
print(f"probe set: {probes.pixels.shape[0]} clean test images "
      f"({SAMPLES_PER_CLASS} per class)")

config = DetectConfig()          # tau=3.5, alpha=0.5, feedback budgets


def scan(model_id):
    model, payload = store.load_registered(model_id, root=REGISTRY)
    print(f"\n== scanning {model_id} "
          f"(C-ACC {payload['clean_accuracy']:.2f}) ==")
    report = detect(model, probes, config, seed=SEED)
    print(" stage  region_px  budget   ASR-A  anomaly  argmax")
    for t in report.trace:
        print(f"   {t['stage']:2d}     {t['region_pixels']:5d}   "
              f"{t['budget']*255:5.1f}/255  {t['asr_a']:.2f}  "
              f"{t['max_index']:6.2f}   class {t['argmax_class']}")
    if report.verdict == "infected":
        print(f"verdict: INFECTED, suspected target label "
              f"{report.suspected_target} "
              f"(stopped at stage {report.stopping_stage})")
    else:
        print("verdict: clean (no class cleared the threshold)")
    return report


report = scan("demo-victim")
scan("demo-clean")

# keep the stopping-stage probes; the unlearning demo fine-tunes on them
export_probes(report, probes, "demo_registry/victim_probes")
print("\nexported stopping-stage probes to demo_registry/victim_probes")
