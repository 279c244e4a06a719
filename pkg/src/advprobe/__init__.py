"""advprobe: backdoor scanning for small image classifiers.

The library trains desk-scale clean/poisoned classifiers, probes a model
with masked adversarial perturbations whose region and budget adapt stage
by stage, and turns the probed class-score profile into a MAD anomaly
verdict. Sub-modules:

    models    classifier handles, gradients, fine-tuning, serialization
    data      synthetic dataset generation, dataset/CIFAR-10 loading
    triggers  backdoor trigger definitions and dataset poisoning
    training  clean/poisoned training runs and accuracy/ASR evaluation
    probe     masked projected-gradient probing
    regions   gradient-guided and random probe-region schedules
    budget    probe budget scheduling strategies
    anomaly   per-class score statistics and MAD outlier verdicts
    detect    the staged detection pipeline and probe archives
    bench     metrics (ACC / AUROC) and experiment sweeps
    unlearn   backdoor removal by fine-tuning on probe-patched data
"""

import os as _os

# Keep BLAS reductions single-threaded so that repeated runs produce
# byte-identical numbers (report files are compared byte for byte).
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")
del _os, _var

from .models import (
    ClassifierHandle,
    ImageBatch,
    ModelFormatError,
    fine_tune,
    forward,
    init_model,
    input_gradient,
    load_model,
    save_model,
)
from .data import Dataset, load_dataset, make_probe_set, save_dataset, synth_dataset
from .triggers import PoisonPlan, TriggerSpec, apply_trigger_batch, poison_dataset
from .training import (
    TrainConfig,
    TrainReport,
    ZooEntry,
    attack_success_rate,
    build_model_zoo,
    evaluate_accuracy,
    train_model,
)
from .probe import ProbeConfig, ProbeState, masked_pgd
from .regions import (
    RegionSchedule,
    ScheduleExhausted,
    attention_region,
    random_region,
    stage_plan,
)
from .budget import (
    BoundaryState,
    SchedulerConfig,
    binary_search_budget,
    increment_budget,
    initial_boundary,
    next_budget,
    run_stage_budget,
)
from .anomaly import AnomalyResult, class_scores, mad_anomaly
from .detect import (
    ArchiveFormatError,
    DetectConfig,
    DetectionReport,
    detect,
    export_probes,
    load_probes,
)
from .bench import (
    SweepConfig,
    auroc,
    detection_acc,
    false_positive_rate,
    region_budget_grid,
    run_sweep,
)
from .unlearn import UNLEARN_MODES, UnlearnConfig, unlearn
from .store import (
    RegistryError,
    list_models,
    load_registered,
    register_dataset,
    register_model,
    registry_root,
    resolve_dataset,
)

__version__ = "0.1.0"
