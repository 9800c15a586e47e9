"""
Experiment configuration: a YAML file validated against a JSON schema,
resolved into the dataclasses the library functions take.
"""
import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import jsonschema
import yaml

from .data import DatasetSpec, mhealth_spec, pamap2_spec, realdisp_spec, synthetic_spec
from .errors import ConfigError
from .losses import LossWeights
from .models import DISCRIMINATORS, ModelConfig
from .trainer import MODES, TrainConfig

logger = logging.getLogger(__name__)

DATA_ROOT_ENV = "HARPAIR_DATA_ROOT"
DATASETS = ("PAMAP2", "MHEALTH", "REALDISP", "SYNTHETIC")

# pair-set size per class when the config does not set one
DEFAULT_PER_CLASS_TARGET = {"PAMAP2": 25000, "REALDISP": 25000, "MHEALTH": 5000, "SYNTHETIC": 500}

_POS_INT = {"type": "integer", "minimum": 1}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}
_LR = {"type": "object", "additionalProperties": False,
       "properties": {k: _POS_NUM for k in ("F", "R", "C", "D")}}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props, "required": list(required)}


SCHEMA = _obj({
    "dataset": _obj({
        "name": {"enum": list(DATASETS)},
        "root": {"type": ["string", "null"]},
        "subjects": {"type": "array", "items": _POS_INT, "minItems": 3},
        "window_size": _POS_INT,
        "overlap_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "scenario": {"enum": ["ideal", "self", "mutual"]},
        "synthetic": _obj({
            "n_subjects": {"type": "integer", "minimum": 3},
            "n_activities": _POS_INT,
            "duration_s": _POS_NUM,
            "sample_rate_hz": _POS_NUM,
            "c": _POS_INT,
            "subject_distortion_strength": {"type": "number", "minimum": 0},
            "seed": {"type": "integer"},
            "noise_std": {"type": "number", "minimum": 0},
        }),
    }, required=["name"]),
    "train": _obj({
        "epochs_step1": _POS_INT, "epochs_step2": _POS_INT, "epochs_step3": _POS_INT,
        "epochs_supervised": {"type": ["integer", "null"], "minimum": 1},
        "lr_step1": _LR, "lr_step2": _LR, "lr_step3": _LR, "lr_supervised": _LR,
        "batch_size_step1": _POS_INT, "batch_size": _POS_INT,
        "per_class_target": _POS_INT,
        "weights": _obj({k: {"type": "number", "minimum": 0} for k in ("w_A", "w_R", "w_C")}),
        "freeze_check": {"enum": ["substep", "epoch"]},
        "resample_pairs_each_epoch": {"type": "boolean"},
    }),
    "model": _obj({
        "d_latent": _POS_INT, "width_scale": _POS_NUM, "n_blocks": _POS_INT, "kernel_size": _POS_INT,
        "classifier_hidden": _POS_INT, "norm": {"enum": ["batch", "none"]},
    }),
    "mode": {"enum": list(MODES)},
    "discriminator": {"enum": list(DISCRIMINATORS)},
    "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
    "split_seed": {"type": "integer", "minimum": 0},
    "n_val": {"type": "integer", "minimum": 0},
    "shift_method": {"enum": ["per_dim", "sliced", "standardized"]},
    "out": {"type": "string"},
    "device": {"type": "string"},
    "workers": _POS_INT,
    "deterministic": {"type": "boolean"},
    "sweep": _obj({
        "which": {"enum": ["w_A", "w_R", "w_C"]},
        "values": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
    }),
}, required=["dataset"])


@dataclass
class ExperimentConfig:
    raw: Dict[str, Any]
    dataset: DatasetSpec
    data_root: Optional[str]
    synthetic: Dict[str, Any]
    train: TrainConfig
    model: ModelConfig
    mode: str = "full"
    discriminator: str = "ours"
    seeds: List[int] = field(default_factory=lambda: [0, 1])
    split_seed: int = 0
    n_val: int = 2
    shift_method: str = "per_dim"
    out: str = "runs"
    workers: int = 1
    deterministic: bool = True
    sweep: Optional[Dict[str, Any]] = None

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def config_hash(self) -> str:
        return _hash(self.resolved())

    def run_hash(self) -> str:
        """Hash of the settings that determine a single fold run's outcome."""
        r = self.resolved()
        for key in ("mode", "discriminator", "seeds", "out", "workers", "sweep"):
            r.pop(key)
        r["dataset"].pop("root")
        return _hash(r)

    def dataset_hash(self) -> str:
        """Hash of everything that determines the windowed dataset."""
        return _hash({"dataset": self.dataset_dict(), "synthetic": self.synthetic})

    def dataset_dict(self) -> dict:
        d = self.dataset
        return {"name": d.name, "subjects": list(d.subjects), "activity_labels": list(d.activity_labels),
                "window_size": d.window_size, "overlap_fraction": d.overlap_fraction,
                "channel_selector": d.channel_selector, "sample_rate_hz": d.sample_rate_hz,
                "scenario": d.scenario}

    def resolved(self) -> dict:
        """Fully resolved settings, defaults included; written next to every result."""
        return {
            "dataset": {**self.dataset_dict(), "root": self.data_root, "synthetic": self.synthetic},
            "train": self.train.to_dict(),
            "model": dict(self.model.__dict__),
            "mode": self.mode, "discriminator": self.discriminator, "seeds": list(self.seeds),
            "split_seed": self.split_seed, "n_val": self.n_val, "shift_method": self.shift_method,
            "out": self.out, "workers": self.workers, "deterministic": self.deterministic,
            "sweep": self.sweep,
        }


def _hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def validate(raw: dict) -> None:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None


def _dataset_spec(ds: dict) -> (DatasetSpec, dict):
    name = ds["name"]
    subjects = ds.get("subjects")
    synthetic = {}
    if name == "PAMAP2":
        spec = pamap2_spec(subjects)
    elif name == "MHEALTH":
        spec = mhealth_spec(subjects)
    elif name == "REALDISP":
        spec = realdisp_spec(subjects, ds.get("scenario", "ideal"))
    else:
        synthetic = {"n_subjects": 6, "n_activities": 4, "duration_s": 240.0, "sample_rate_hz": 25.0,
                     "c": 6, "subject_distortion_strength": 1.0, "seed": 0}
        synthetic.update(ds.get("synthetic", {}))
        spec = synthetic_spec(synthetic["n_subjects"], synthetic["n_activities"],
                              sample_rate_hz=synthetic["sample_rate_hz"])
        if subjects:
            spec.subjects = sorted(subjects)
    if "window_size" in ds:
        spec.window_size = ds["window_size"]
    if "overlap_fraction" in ds:
        spec.overlap_fraction = ds["overlap_fraction"]
    spec.__post_init__()  # re-validate after overrides
    return spec, synthetic


def from_dict(raw: dict, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Validate ``raw`` (with ``overrides`` merged on top) and resolve it."""
    raw = merge(copy.deepcopy(raw), overrides or {})
    validate(raw)
    ds = raw["dataset"]
    spec, synthetic = _dataset_spec(ds)
    train_kw = dict(raw.get("train", {}))
    train_kw.setdefault("per_class_target", DEFAULT_PER_CLASS_TARGET[spec.name])
    if "weights" in train_kw:
        train_kw["weights"] = LossWeights(**{**LossWeights().to_dict(), **train_kw["weights"]})
    defaults = TrainConfig()
    for key in ("lr_step1", "lr_step2", "lr_step3", "lr_supervised"):
        if key in train_kw:
            train_kw[key] = {**getattr(defaults, key), **train_kw[key]}
    device = raw.get("device", "cpu")
    try:
        train = TrainConfig(device=device, **train_kw)
        model = ModelConfig(**raw.get("model", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    root = os.environ.get(DATA_ROOT_ENV) or ds.get("root")
    if spec.name != "SYNTHETIC" and not root:
        raise ConfigError(f"dataset {spec.name} needs dataset.root or ${DATA_ROOT_ENV}")
    return ExperimentConfig(raw, spec, root, synthetic, train, model,
                            mode=raw.get("mode", "full"), discriminator=raw.get("discriminator", "ours"),
                            seeds=list(raw.get("seeds", [0, 1])), split_seed=raw.get("split_seed", 0),
                            n_val=raw.get("n_val", 2), shift_method=raw.get("shift_method", "per_dim"),
                            out=raw.get("out", "runs"), workers=raw.get("workers", 1),
                            deterministic=raw.get("deterministic", True), sweep=raw.get("sweep"))


def merge(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            merge(base[key], value)
        else:
            base[key] = value
    return base


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(raw, overrides)


def write_resolved(cfg: ExperimentConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.yaml"
    body = {"config_hash": cfg.config_hash(), **cfg.resolved()}
    path.write_text(yaml.safe_dump(json.loads(json.dumps(body, default=list)), sort_keys=False))
    return path
