"""Run-configuration files: JSON schema, strict validation, snapshots.

A run config has sections {model, data, train, attack_presets, output,
seed} plus an optional analysis section for activation export. Unknown
keys are rejected and every error names the offending field, so a config
is either fully valid before any work starts or the command exits with a
usage error.

``RunConfig.resolved()`` returns the config with all defaults filled in;
commands write it next to their outputs so a run can be repeated
exactly. The digest of that snapshot identifies the run in checkpoints.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig
from .data import Dataset, load_cifar_binary, load_idx, synth_dataset
from .errors import ConfigError
from .models import Model, build_model, insert_ewas
from .training import TrainConfig

_MODEL_KEYS = {"arch", "width", "input_shape", "num_classes", "insertion_points", "dtype"}
_DATA_COMMON = {"kind", "seed"}
_DATA_KEYS = {
    "synthetic": _DATA_COMMON | {"num_classes", "samples_per_class",
                                 "test_samples_per_class", "shape", "noise_std"},
    "idx": _DATA_COMMON | {"train_images", "train_labels", "test_images",
                           "test_labels", "num_classes"},
    "cifar_binary": _DATA_COMMON | {"train_files", "test_files", "num_classes"},
}
_TRAIN_KEYS = {"method", "lambda", "beta", "epochs", "batch_size", "lr", "momentum",
               "weight_decay", "milestones", "lr_decay", "attack"}
_ATTACK_KEYS = {"epsilon", "step_size", "steps", "random_start", "loss_kind",
                "lambda_attack", "kappa", "mask_mode", "seed", "name"}
_ANALYSIS_KEYS = {"layer", "class_label", "attack", "scope", "split"}
_TOP_KEYS = {"seed", "output_dir", "model", "data", "train", "attack_presets", "analysis"}


def _reject_unknown(section: dict, allowed: set, path: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}; allowed: {sorted(allowed)}")


def _need(section: dict, key: str, path: str):
    if key not in section:
        raise ConfigError(f"{path}.{key}: required field is missing")
    return section[key]


def _attack_from_dict(d: dict, path: str, default_seed: int,
                      default_name: str = "") -> AttackConfig:
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    _reject_unknown(d, _ATTACK_KEYS, path)
    try:
        return AttackConfig(
            epsilon=float(_need(d, "epsilon", path)),
            step_size=float(_need(d, "step_size", path)),
            steps=int(d.get("steps", 1)),
            random_start=bool(d.get("random_start", False)),
            loss_kind=str(d.get("loss_kind", "cross_entropy")),
            lambda_attack=float(d.get("lambda_attack", 0.0)),
            kappa=float(d.get("kappa", 0.0)),
            mask_mode=str(d.get("mask_mode", "inference")),
            seed=int(d.get("seed", default_seed)),
            name=str(d.get("name", default_name)),
        )
    except ConfigError as exc:
        raise ConfigError(f"{path}.{exc}") from exc


def _attack_to_dict(a: AttackConfig) -> dict:
    return {
        "epsilon": a.epsilon, "step_size": a.step_size, "steps": a.steps,
        "random_start": a.random_start, "loss_kind": a.loss_kind,
        "lambda_attack": a.lambda_attack, "kappa": a.kappa,
        "mask_mode": a.mask_mode, "seed": a.seed, "name": a.name,
    }


@dataclass
class ModelSection:
    arch: str = "small_cnn"
    width: int = 8
    input_shape: tuple = (1, 8, 8)
    num_classes: int = 3
    insertion_points: tuple = ()
    dtype: str = "float64"

    def build(self, seed: int) -> Model:
        model = build_model(self.arch, self.input_shape, self.num_classes,
                            width=self.width, dtype=np.dtype(self.dtype).type,
                            seed=seed)
        for i, host in enumerate(self.insertion_points):
            insert_ewas(model, host, self.num_classes, seed=seed + i + 1)
        return model

    def to_dict(self) -> dict:
        return {"arch": self.arch, "width": self.width,
                "input_shape": list(self.input_shape),
                "num_classes": self.num_classes,
                "insertion_points": list(self.insertion_points),
                "dtype": self.dtype}


@dataclass
class DataSection:
    kind: str
    options: dict

    def load(self, split: str, default_seed: int) -> Dataset:
        o = self.options
        if self.kind == "synthetic":
            per_class = o["samples_per_class"] if split == "train" else o["test_samples_per_class"]
            return synth_dataset(
                o["num_classes"], per_class, o["shape"],
                seed=o["seed"] if o["seed"] is not None else default_seed,
                noise_std=o["noise_std"], split=split,
            )
        if self.kind == "idx":
            images = o["train_images"] if split == "train" else o["test_images"]
            labels = o["train_labels"] if split == "train" else o["test_labels"]
            return load_idx(images, labels, num_classes=o["num_classes"])
        files = o["train_files"] if split == "train" else o["test_files"]
        return load_cifar_binary(files, num_classes=o["num_classes"], split=split)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.options}


@dataclass
class AnalysisSection:
    layer: str
    class_label: int = 0
    attack: str | None = None  # name of an attack preset, or None for natural-only
    scope: str = "sample"
    split: str = "test"

    def to_dict(self) -> dict:
        return {"layer": self.layer, "class_label": self.class_label,
                "attack": self.attack, "scope": self.scope, "split": self.split}


@dataclass
class RunConfig:
    seed: int
    output_dir: str
    model: ModelSection
    data: DataSection
    train: TrainConfig | None
    attack_presets: dict[str, AttackConfig] = field(default_factory=dict)
    analysis: AnalysisSection | None = None

    def resolved(self) -> dict:
        out = {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "model": self.model.to_dict(),
            "data": self.data.to_dict(),
            "attack_presets": {k: _attack_to_dict(v)
                               for k, v in sorted(self.attack_presets.items())},
        }
        if self.train is not None:
            out["train"] = {
                "method": self.train.method, "lambda": self.train.lam,
                "beta": self.train.beta, "epochs": self.train.epochs,
                "batch_size": self.train.batch_size, "lr": self.train.lr,
                "momentum": self.train.momentum,
                "weight_decay": self.train.weight_decay,
                "milestones": list(self.train.milestones),
                "lr_decay": self.train.lr_decay,
                "attack": _attack_to_dict(self.train.attack),
            }
        if self.analysis is not None:
            out["analysis"] = self.analysis.to_dict()
        return out

    def snapshot_json(self) -> str:
        return json.dumps(self.resolved(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.resolved(), sort_keys=True, separators=(",", ":")).encode()
        ).hexdigest()


def _parse_model(section: dict) -> ModelSection:
    _reject_unknown(section, _MODEL_KEYS, "model")
    ms = ModelSection(
        arch=str(section.get("arch", "small_cnn")),
        width=int(section.get("width", 8)),
        input_shape=tuple(section.get("input_shape", (1, 8, 8))),
        num_classes=int(section.get("num_classes", 3)),
        insertion_points=tuple(section.get("insertion_points", ())),
        dtype=str(section.get("dtype", "float64")),
    )
    if ms.arch not in ("small_cnn", "resnet18_like"):
        raise ConfigError(f"model.arch: unknown architecture {ms.arch!r}")
    if ms.dtype not in ("float32", "float64"):
        raise ConfigError(f"model.dtype: must be float32|float64, got {ms.dtype!r}")
    if len(ms.input_shape) != 3:
        raise ConfigError(f"model.input_shape: must be [C, H, W], got {list(ms.input_shape)}")
    return ms


def _parse_data(section: dict) -> DataSection:
    kind = _need(section, "kind", "data")
    if kind not in _DATA_KEYS:
        raise ConfigError(f"data.kind: must be one of {sorted(_DATA_KEYS)}, got {kind!r}")
    _reject_unknown(section, _DATA_KEYS[kind], "data")
    if kind == "synthetic":
        options = {
            "num_classes": int(section.get("num_classes", 3)),
            "samples_per_class": int(_need(section, "samples_per_class", "data")),
            "test_samples_per_class": int(section.get(
                "test_samples_per_class", section["samples_per_class"])),
            "shape": tuple(section.get("shape", (1, 8, 8))),
            "noise_std": float(section.get("noise_std", 0.1)),
            "seed": section.get("seed"),
        }
    elif kind == "idx":
        options = {
            "train_images": str(_need(section, "train_images", "data")),
            "train_labels": str(_need(section, "train_labels", "data")),
            "test_images": str(_need(section, "test_images", "data")),
            "test_labels": str(_need(section, "test_labels", "data")),
            "num_classes": section.get("num_classes"),
            "seed": section.get("seed"),
        }
    else:
        options = {
            "train_files": list(_need(section, "train_files", "data")),
            "test_files": list(_need(section, "test_files", "data")),
            "num_classes": int(section.get("num_classes", 10)),
            "seed": section.get("seed"),
        }
    return DataSection(kind, options)


def _parse_train(section: dict, default_seed: int) -> TrainConfig:
    _reject_unknown(section, _TRAIN_KEYS, "train")
    attack = _attack_from_dict(_need(section, "attack", "train"),
                               "train.attack", default_seed, "inner")
    return TrainConfig(
        method=str(section.get("method", "at")),
        lam=float(section.get("lambda", 0.0)),
        beta=float(section.get("beta", 0.0)),
        epochs=int(_need(section, "epochs", "train")),
        batch_size=int(section.get("batch_size", 128)),
        lr=float(section.get("lr", 0.1)),
        momentum=float(section.get("momentum", 0.9)),
        weight_decay=float(section.get("weight_decay", 2e-4)),
        milestones=tuple(section.get("milestones", ())),
        lr_decay=float(section.get("lr_decay", 0.1)),
        attack=attack,
        seed=default_seed,
    )


def _parse_analysis(section: dict) -> AnalysisSection:
    _reject_unknown(section, _ANALYSIS_KEYS, "analysis")
    a = AnalysisSection(
        layer=str(_need(section, "layer", "analysis")),
        class_label=int(section.get("class_label", 0)),
        attack=section.get("attack"),
        scope=str(section.get("scope", "sample")),
        split=str(section.get("split", "test")),
    )
    if a.scope not in ("sample", "dataset"):
        raise ConfigError(f"analysis.scope: must be sample|dataset, got {a.scope!r}")
    if a.split not in ("train", "test"):
        raise ConfigError(f"analysis.split: must be train|test, got {a.split!r}")
    return a


def parse_run_config(raw: dict, seed_override: int | None = None) -> RunConfig:
    """Validate a raw config dict; raises ConfigError naming bad fields."""
    if not isinstance(raw, dict):
        raise ConfigError("config root: expected a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "config root")
    seed = int(seed_override if seed_override is not None else raw.get("seed", 0))
    model = _parse_model(raw.get("model", {}))
    if "data" not in raw:
        raise ConfigError("data: required section is missing")
    data = _parse_data(raw["data"])
    train = _parse_train(raw["train"], seed) if "train" in raw else None
    presets = {}
    raw_presets = raw.get("attack_presets", {})
    if not isinstance(raw_presets, dict):
        raise ConfigError("attack_presets: expected an object of named attacks")
    for name, sub in raw_presets.items():
        presets[name] = _attack_from_dict(sub, f"attack_presets.{name}", seed, name)
    analysis = _parse_analysis(raw["analysis"]) if "analysis" in raw else None
    if analysis is not None and analysis.attack is not None \
            and analysis.attack not in presets:
        raise ConfigError(
            f"analysis.attack: {analysis.attack!r} is not an attack preset name"
        )
    return RunConfig(
        seed=seed,
        output_dir=str(raw.get("output_dir", "runs/run")),
        model=model, data=data, train=train,
        attack_presets=presets, analysis=analysis,
    )


def load_run_config(path, seed_override: int | None = None) -> RunConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return parse_run_config(raw, seed_override)
