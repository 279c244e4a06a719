"""Command line front end.

Subcommands: dataset make|import, train, detect, bench, unlearn, report.
Exit codes: 0 success, 1 usage error, 2 runtime failure. Configuration is
layered: built-in defaults, then the JSON --config file's section for the
command, then explicit flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import bench as bench_mod
from . import store
from .budget import BUDGET_STRATEGIES, SchedulerConfig
from .data import load_cifar10_binary, make_probe_set, synth_dataset
from .detect import DetectConfig, REGION_STRATEGIES, detect, export_probes
from .probe import ProbeConfig
from .regions import RegionSchedule
from .training import TrainConfig, train_model
from .triggers import TRIGGER_KINDS, PoisonPlan, TriggerSpec
from .unlearn import UNLEARN_MODES, UnlearnConfig, unlearn


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; remap to the documented code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_config_file(path):
    if path is None:
        return {}
    with open(path) as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return cfg


def _layer(defaults, file_section, flag_values):
    """defaults <- file <- flags; unknown file keys are an error."""
    out = dict(defaults)
    extra = set(file_section or {}) - set(defaults)
    if extra:
        raise ValueError(f"unknown config keys: {sorted(extra)}")
    out.update(file_section or {})
    out.update({k: v for k, v in flag_values.items() if v is not None})
    return out


_DATASET_DEFAULTS = {"classes": 10, "per_class": 150, "per_class_test": 50,
                     "channels": 3, "image_size": 32, "seed": 0,
                     "template_scale": 0.30, "white_scale": 0.08,
                     "smooth_scale": 0.10}
_TRAIN_DEFAULTS = {"epochs": 12, "learning_rate": 0.01, "momentum": 0.9,
                   "batch_size": 64, "architecture": "small_cnn", "seed": 0}
_ATTACK_DEFAULTS = {"attack": "clean", "target": 0, "trigger_size": 4,
                    "location": "BR", "sigma": 0.2, "count": 4,
                    "poison_rate": 0.10, "trigger_seed": 0}
_DETECT_DEFAULTS = {"tau": 3.5, "strategy": "attention",
                    "budget_strategy": "feedback", "alpha": 0.5,
                    "stop_fraction": 0.03, "samples_per_class": 4,
                    "seed": 0, "steps": 40, "max_attempts": 3}
_UNLEARN_DEFAULTS = {"mode": "reversed_trigger", "epochs": 1,
                     "subset_fraction": 0.1, "patch_fraction": 0.2,
                     "lr_scale": 0.1, "seed": 0, "learning_rate": 0.01}
_BENCH_DEFAULTS = {"num_infected": 4, "num_clean": 0, "samples_per_class": 4,
                   "seed": 0, "epochs": 12, "learning_rate": 0.01}


def _detect_config(vals):
    return DetectConfig(
        tau=vals["tau"],
        region_schedule=RegionSchedule(alpha=vals["alpha"],
                                       stop_fraction=vals["stop_fraction"]),
        scheduler=SchedulerConfig(strategy=vals["budget_strategy"],
                                  max_attempts=vals["max_attempts"]),
        probe=ProbeConfig(steps=vals["steps"], step_mode="scaled"),
        region_strategy=vals["strategy"])


def _trigger_from(vals):
    if vals["attack"] == "clean":
        return None
    return TriggerSpec(vals["attack"], vals["target"],
                       size=vals["trigger_size"], location=vals["location"],
                       sigma=vals["sigma"], count=vals["count"],
                       seed=vals["trigger_seed"])


# ---------------------------------------------------------------------------
# handlers
# ---------------------------------------------------------------------------

def _cmd_dataset(args):
    if args.action == "import" and not args.source:
        print("dataset import requires --source", file=sys.stderr)
        return 1
    cfg = _load_config_file(args.config).get("dataset", {})
    if args.action == "make":
        vals = _layer(_DATASET_DEFAULTS, cfg, {
            "classes": args.classes, "per_class": args.per_class,
            "per_class_test": args.per_class_test, "seed": args.seed,
            "template_scale": args.template_scale,
            "white_scale": args.white_scale,
            "smooth_scale": args.smooth_scale})
        ds = synth_dataset(
            num_classes=vals["classes"], per_class=vals["per_class"],
            per_class_test=vals["per_class_test"],
            image_shape=(vals["channels"], vals["image_size"],
                         vals["image_size"]),
            seed=vals["seed"], template_scale=vals["template_scale"],
            smooth_scale=vals["smooth_scale"],
            white_scale=vals["white_scale"])
    else:
        ds = load_cifar10_binary(args.source)
    path = store.register_dataset(ds, args.id, root=args.registry)
    print(f"dataset {args.id}: {ds.x_train.shape[0]} train / "
          f"{ds.x_test.shape[0]} test images -> {path}")
    return 0


def _cmd_train(args):
    filecfg = _load_config_file(args.config)
    tvals = _layer(_TRAIN_DEFAULTS, filecfg.get("train", {}), {
        "epochs": args.epochs, "learning_rate": args.lr,
        "batch_size": args.batch_size, "architecture": args.arch,
        "seed": args.seed})
    avals = _layer(_ATTACK_DEFAULTS, filecfg.get("attack", {}), {
        "attack": args.attack, "target": args.target,
        "trigger_size": args.trigger_size, "location": args.location,
        "sigma": args.sigma, "count": args.count,
        "poison_rate": args.poison_rate})
    dataset = store.resolve_dataset(args.dataset, root=args.registry)
    trigger = _trigger_from(avals)
    plan = (PoisonPlan(avals["target"], trigger,
                       poison_rate=avals["poison_rate"])
            if trigger else None)
    config = TrainConfig(epochs=tvals["epochs"],
                         learning_rate=tvals["learning_rate"],
                         momentum=tvals["momentum"],
                         batch_size=tvals["batch_size"])
    model, report = train_model(dataset, architecture=tvals["architecture"],
                                config=config, poison_plan=plan,
                                seed=tvals["seed"])
    payload = {"model_id": args.model_id, "dataset": dataset.dataset_id,
               "architecture": tvals["architecture"], "seed": tvals["seed"],
               "train": config.to_dict(), "report": report.to_dict(),
               "attack": trigger.to_dict() if trigger else None,
               "poison_rate": avals["poison_rate"] if trigger else None}
    mdir = store.register_model(model, payload, args.model_id,
                                root=args.registry)
    line = f"trained {args.model_id}: C-ACC {report.clean_accuracy:.3f}"
    if report.attack_success is not None:
        line += f", ASR-b {report.attack_success:.3f}"
    print(f"{line} -> {mdir}")
    return 0


def _cmd_detect(args):
    filecfg = _load_config_file(args.config)
    vals = _layer(_DETECT_DEFAULTS, filecfg.get("detect", {}), {
        "tau": args.tau, "strategy": args.strategy,
        "budget_strategy": args.budget_strategy, "alpha": args.alpha,
        "stop_fraction": args.stop_fraction,
        "samples_per_class": args.samples_per_class, "seed": args.seed})
    model, _ = store.load_registered(args.model, root=args.registry)
    dataset = store.resolve_dataset(args.dataset, root=args.registry)
    probes = make_probe_set(dataset, vals["samples_per_class"],
                            seed=vals["seed"])
    config = _detect_config(vals)
    report = detect(model, probes, config, seed=vals["seed"])

    run_dir = store.make_run_dir(args.out, "detect")
    store.write_config_snapshot(run_dir, {
        "command": "detect", "model": args.model, "dataset": args.dataset,
        "detect": vals})
    with open(os.path.join(run_dir, "report.json"), "w") as f:
        f.write(report.to_json())
    store.write_json(run_dir, "times.json", {"wall_time": report.wall_time})
    if report.final_state is not None:
        export_probes(report, probes, os.path.join(run_dir, "probes"))

    if report.verdict == "infected":
        print(f"INFECTED suspected target label: {report.suspected_target}")
    else:
        print("CLEAN")
    print(f"report -> {run_dir}")
    return 0


def _cmd_bench(args):
    filecfg = _load_config_file(args.config)
    vals = _layer(_BENCH_DEFAULTS, filecfg.get("bench", {}), {
        "num_infected": args.num_infected, "num_clean": args.num_clean,
        "samples_per_class": args.samples_per_class, "seed": args.seed,
        "epochs": args.epochs, "learning_rate": args.lr})
    dvals = _layer(_DETECT_DEFAULTS, filecfg.get("detect", {}), {})
    dataset = store.resolve_dataset(args.dataset, root=args.registry)
    sweep_cfg = bench_mod.SweepConfig(
        dataset=dataset,
        train=TrainConfig(epochs=vals["epochs"],
                          learning_rate=vals["learning_rate"]),
        detect=_detect_config(dvals),
        samples_per_class=vals["samples_per_class"],
        num_infected=vals["num_infected"], num_clean=vals["num_clean"],
        seed=vals["seed"])
    run_dir = store.make_run_dir(args.out, f"bench-{args.sweep}")
    store.write_config_snapshot(run_dir, {
        "command": "bench", "sweep": args.sweep, "dataset": args.dataset,
        "bench": vals, "detect": dvals})
    results = bench_mod.run_sweep(args.sweep, sweep_cfg, run_dir)
    for result in results:
        print(json.dumps(result.summary() if args.sweep != "region_budget_grid"
                         else result.sweep_point, sort_keys=True,
                         default=float))
    print(f"results -> {run_dir}")
    return 0


def _cmd_unlearn(args):
    filecfg = _load_config_file(args.config)
    vals = _layer(_UNLEARN_DEFAULTS, filecfg.get("unlearn", {}), {
        "mode": args.mode, "epochs": args.epochs,
        "subset_fraction": args.subset_fraction,
        "patch_fraction": args.patch_fraction, "seed": args.seed})
    model, payload = store.load_registered(args.model, root=args.registry)
    if not payload.get("attack"):
        raise ValueError(f"model {args.model!r} has no recorded attack; "
                         "unlearning needs the true trigger to score ASR-b")
    trigger = TriggerSpec.from_dict(payload["attack"])
    dataset = store.resolve_dataset(args.dataset, root=args.registry)
    config = UnlearnConfig(
        epochs=vals["epochs"], subset_fraction=vals["subset_fraction"],
        patch_fraction=vals["patch_fraction"], lr_scale=vals["lr_scale"],
        train=TrainConfig(learning_rate=vals["learning_rate"]))
    tuned, report = unlearn(model, dataset, probe_archive=args.archive,
                            mode=vals["mode"], config=config,
                            trigger=trigger, seed=vals["seed"])
    run_dir = store.make_run_dir(args.out, "unlearn")
    store.write_config_snapshot(run_dir, {
        "command": "unlearn", "model": args.model, "dataset": args.dataset,
        "unlearn": vals})
    store.write_json(run_dir, "report.json", report)
    if args.save_as:
        store.register_model(tuned, {"model_id": args.save_as,
                                     "unlearned_from": args.model,
                                     "report": report}, args.save_as,
                             root=args.registry)
    b, a = report["before"], report["after"]
    print(f"{vals['mode']}: C-ACC {b['clean_accuracy']:.3f} -> "
          f"{a['clean_accuracy']:.3f}, ASR-b {b['attack_success']:.3f} -> "
          f"{a['attack_success']:.3f}")
    print(f"report -> {run_dir}")
    return 0


def _print_table(rows, columns):
    widths = [max(len(str(c)), *(len(str(r.get(c, ""))) for r in rows))
              for c in columns]
    line = "  ".join(str(c).ljust(w) for c, w in zip(columns, widths))
    print(line)
    print("-" * len(line))
    for r in rows:
        print("  ".join(str(r.get(c, "")).ljust(w)
                        for c, w in zip(columns, widths)))


def _cmd_report(args):
    run_dir = args.run_dir
    shown = False
    rpath = os.path.join(run_dir, "report.json")
    if os.path.isfile(rpath):
        with open(rpath) as f:
            rep = json.load(f)
        if "verdict" in rep:
            print(f"verdict: {rep['verdict'].upper()}  suspected target: "
                  f"{rep['suspected_target']}")
            rows = [{k: (f"{v:.4g}" if isinstance(v, float) else v)
                     for k, v in entry.items()} for entry in rep["trace"]]
            _print_table(rows, ["stage", "region_pixels", "budget", "asr_a",
                                "attempts", "max_index", "argmax_class"])
        elif "before" in rep:
            rows = [{"metric": "C-ACC", "before": rep["before"]["clean_accuracy"],
                     "after": rep["after"]["clean_accuracy"]},
                    {"metric": "ASR-b", "before": rep["before"]["attack_success"],
                     "after": rep["after"]["attack_success"]}]
            print(f"unlearn mode: {rep['mode']}")
            _print_table(rows, ["metric", "before", "after"])
        shown = True
    cpath = os.path.join(run_dir, "results.csv")
    if os.path.isfile(cpath):
        with open(cpath, newline="") as f:
            rows = list(csv.DictReader(f))
        if rows:
            _print_table(rows, list(rows[0].keys()))
            shown = True
    for name in sorted(os.listdir(run_dir)) if os.path.isdir(run_dir) else []:
        if name.endswith("_summary.json"):
            with open(os.path.join(run_dir, name)) as f:
                summary = json.load(f)
            points = summary.get("points", [])
            if points:
                cols = sorted({k for p in points for k in p})
                out = os.path.join(run_dir, name[:-len("_summary.json")]
                                   + "_plot.csv")
                with open(out, "w", newline="") as f:
                    writer = csv.DictWriter(f, fieldnames=cols)
                    writer.writeheader()
                    writer.writerows(points)
                _print_table([{c: p.get(c, "") for c in cols}
                              for p in points], cols)
                print(f"plot data -> {out}")
                shown = True
    if not shown:
        raise ValueError(f"nothing to report under {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p, registry=True):
    p.add_argument("--config", help="JSON config file with per-command "
                   "sections; flags override file values")
    if registry:
        p.add_argument("--registry", help="registry root (default: "
                       f"${store.REGISTRY_ENV} or ./registry)")


def build_parser():
    parser = _Parser(prog="advprobe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("dataset", help="create or import datasets")
    p.add_argument("action", choices=("make", "import"))
    p.add_argument("--id", required=True)
    p.add_argument("--source", help="CIFAR-10 binary file or directory "
                   "(import only)")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int, dest="per_class")
    p.add_argument("--per-class-test", type=int, dest="per_class_test")
    p.add_argument("--seed", type=int)
    p.add_argument("--template-scale", type=float, dest="template_scale")
    p.add_argument("--white-scale", type=float, dest="white_scale")
    p.add_argument("--smooth-scale", type=float, dest="smooth_scale")
    _common(p)
    p.set_defaults(func=_cmd_dataset)

    p = sub.add_parser("train", help="train a clean or backdoored model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model-id", required=True, dest="model_id")
    p.add_argument("--arch", choices=("small_cnn", "mlp"))
    p.add_argument("--attack", choices=("clean",) + TRIGGER_KINDS)
    p.add_argument("--target", type=int)
    p.add_argument("--trigger-size", type=int, dest="trigger_size")
    p.add_argument("--location", choices=("TL", "TR", "BR", "BL", "C"))
    p.add_argument("--sigma", type=float)
    p.add_argument("--count", type=int)
    p.add_argument("--poison-rate", type=float, dest="poison_rate")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    _common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("detect", help="probe a model for backdoors")
    p.add_argument("model")
    p.add_argument("--dataset", required=True,
                   help="dataset supplying clean probe images")
    p.add_argument("--tau", type=float)
    p.add_argument("--strategy", choices=REGION_STRATEGIES)
    p.add_argument("--budget-strategy", choices=BUDGET_STRATEGIES,
                   dest="budget_strategy")
    p.add_argument("--alpha", type=float)
    p.add_argument("--stop-fraction", type=float, dest="stop_fraction")
    p.add_argument("--samples-per-class", type=int, dest="samples_per_class")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="run directory (default: auto under ./runs)")
    _common(p)
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("bench", help="run an experiment sweep")
    p.add_argument("sweep", choices=bench_mod.SWEEP_KINDS)
    p.add_argument("--dataset", required=True)
    p.add_argument("--num-infected", type=int, dest="num_infected")
    p.add_argument("--num-clean", type=int, dest="num_clean")
    p.add_argument("--samples-per-class", type=int, dest="samples_per_class")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    _common(p)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("unlearn", help="fine-tune a backdoor away")
    p.add_argument("model")
    p.add_argument("--mode", choices=UNLEARN_MODES)
    p.add_argument("--dataset", required=True)
    p.add_argument("--archive", help="probe archive directory from a "
                   "detect run (reversed_trigger mode)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--subset-fraction", type=float, dest="subset_fraction")
    p.add_argument("--patch-fraction", type=float, dest="patch_fraction")
    p.add_argument("--seed", type=int)
    p.add_argument("--save-as", dest="save_as",
                   help="register the cleaned model under this id")
    p.add_argument("--out")
    _common(p)
    p.set_defaults(func=_cmd_unlearn)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("run_dir")
    _common(p, registry=False)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code or 0
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
