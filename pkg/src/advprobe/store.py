"""Filesystem registry for models and datasets, plus run directories.

Layout:
    <registry>/<model-id>/{model.bin, train_report.json}
    <registry>/datasets/<dataset-id>/   (dataset manifest + blobs)
    <runs>/<run-id>/{config.json, report.json, probes/, results.csv}

The registry root comes from an explicit argument, the ADVPROBE_REGISTRY
environment variable, or ./registry, in that order. Registrations are
append-only: writing an id that already exists is an error.
"""

from __future__ import annotations

import json
import os

from . import models as model_io
from .data import load_dataset, save_dataset

REGISTRY_ENV = "ADVPROBE_REGISTRY"


class RegistryError(Exception):
    pass


def registry_root(override=None):
    return override or os.environ.get(REGISTRY_ENV) or "registry"


def _model_dir(root, model_id):
    if not model_id or os.sep in model_id or model_id.startswith("."):
        raise RegistryError(f"bad model id {model_id!r}")
    return os.path.join(root, model_id)


def register_model(model, train_report_dict, model_id, root=None):
    """Store a model and its training report; refuses to overwrite."""
    root = registry_root(root)
    mdir = _model_dir(root, model_id)
    if os.path.exists(mdir):
        raise RegistryError(
            f"model id {model_id!r} already registered under {root}; "
            "the registry is append-only")
    os.makedirs(mdir)
    model_io.save_model(model, os.path.join(mdir, "model.bin"))
    with open(os.path.join(mdir, "train_report.json"), "w") as f:
        json.dump(train_report_dict, f, indent=2, sort_keys=True,
                  default=float)
        f.write("\n")
    return mdir


def load_registered(model_id, root=None):
    """Return (model, train_report_dict) for a registered id."""
    root = registry_root(root)
    mdir = _model_dir(root, model_id)
    path = os.path.join(mdir, "model.bin")
    if not os.path.isfile(path):
        raise RegistryError(f"no model {model_id!r} under {root}")
    model = model_io.load_model(path)
    rpath = os.path.join(mdir, "train_report.json")
    report = {}
    if os.path.isfile(rpath):
        with open(rpath) as f:
            report = json.load(f)
    return model, report


def list_models(root=None):
    root = registry_root(root)
    if not os.path.isdir(root):
        return []
    out = []
    for name in sorted(os.listdir(root)):
        if name == "datasets":
            continue
        if os.path.isfile(os.path.join(root, name, "model.bin")):
            out.append(name)
    return out


def register_dataset(dataset, dataset_id, root=None):
    root = registry_root(root)
    ddir = os.path.join(root, "datasets", dataset_id)
    if os.path.exists(ddir):
        raise RegistryError(
            f"dataset id {dataset_id!r} already registered under {root}; "
            "the registry is append-only")
    save_dataset(dataset, ddir)
    return ddir


def resolve_dataset(ref, root=None):
    """Load a dataset by registry id or by directory path."""
    root = registry_root(root)
    ddir = os.path.join(root, "datasets", ref)
    if os.path.isdir(ddir):
        return load_dataset(ddir)
    if os.path.isdir(ref):
        return load_dataset(ref)
    raise RegistryError(f"dataset {ref!r} is neither a registered id under "
                        f"{root} nor a dataset directory")


def make_run_dir(out, command):
    """Create the run directory; auto-name under ./runs when not given."""
    if out is None:
        base = "runs"
        os.makedirs(base, exist_ok=True)
        j = 0
        while True:
            cand = os.path.join(base, f"{command}-{j:04d}")
            if not os.path.exists(cand):
                out = cand
                break
            j += 1
    os.makedirs(out, exist_ok=True)
    return out


def write_config_snapshot(run_dir, resolved):
    """Record the fully resolved configuration used by a run."""
    with open(os.path.join(run_dir, "config.json"), "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True, default=float)
        f.write("\n")


def write_json(run_dir, name, payload):
    with open(os.path.join(run_dir, name), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=float)
        f.write("\n")
