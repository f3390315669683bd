"""Run configuration: JSON documents validated into dataclasses, with task presets.

A config names a ``task`` preset; every other section is optional and
overrides the preset key by key. Unknown keys are rejected everywhere.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .augment import AugmentConfig, WarpConfig
from .data import SyntheticTaskCfg
from .optim import OptimConfig


class ConfigError(ValueError):
    pass


@dataclass
class ArchConfig:
    scale: float = 1.0
    long_skips: bool = True
    dropout: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 < self.scale <= 1:
            raise ValueError("scale must be in (0, 1]")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


@dataclass
class TrainConfig:
    patience: int = 50
    max_epochs: int = 500
    ensemble: int = 10
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.patience < 0 or self.max_epochs < 1 or self.ensemble < 1:
            raise ValueError("need patience >= 0, max_epochs >= 1, ensemble >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")


@dataclass
class DataConfig:
    train: str | None = None  # manifest paths, relative to the config file
    val: str | None = None
    test: str | None = None
    predictions: str | None = None  # directory of SGT1 probability maps (evaluate / postprocess)


@dataclass
class AnalysisConfig:
    bins: int = 100
    fit: bool = True
    exclude_void: bool = True
    split: str = "val"

    def __post_init__(self):
        if self.bins < 1:
            raise ValueError("bins must be >= 1")


@dataclass
class PostprocessConfig:
    threshold: float = 0.5
    connectivity: int | None = None

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must be in (0, 1)")
        if self.connectivity not in (None, 4, 8, 6, 26):
            raise ValueError("connectivity must be one of 4, 8, 6, 26")


@dataclass
class RunConfig:
    task: str = "synthetic"
    seed: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticTaskCfg = field(default_factory=SyntheticTaskCfg)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    base_dir: str = field(default=".", metadata={"internal": True})

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def arch_dict(self) -> dict:
        """What determines parameter shapes; hashed into checkpoints."""
        return {"arch": "pipeline", "scale": self.arch.scale, "long_skips": self.arch.long_skips}

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


_SECTIONS = {
    "arch": ArchConfig, "optim": OptimConfig, "augment": AugmentConfig, "train": TrainConfig,
    "data": DataConfig, "synthetic": SyntheticTaskCfg, "analysis": AnalysisConfig,
    "postprocess": PostprocessConfig,
}

PRESETS: dict[str, dict] = {
    "em": {
        "optim": {"lr0": 0.001, "lr_decay": 0.001, "batch_size": 8, "weight_decay": 1e-4},
        "augment": {"flip_h": True, "flip_v": True, "shear_max": 0.41, "rotation_max": 25.0,
                    "crop_size": 256, "warp": {"enabled": True}},
        "train": {"ensemble": 10, "patience": 50},
        "synthetic": {"shape": "membranes"},
    },
    "liver": {
        "optim": {"lr0": 0.001, "lr_decay": 0.001, "batch_size": 20, "weight_decay": 1e-4,
                  "weight_decay_by_prefix": {"fcn.": 1e-4, "resnet.": 5e-4}},
        "augment": {"crop_size": 128, "crop_foreground": True},
        "train": {"ensemble": 1, "patience": 50},
        "synthetic": {"intensity_range": [-3000.0, 1500.0], "background_level": [20.0, 80.0],
                      "foreground_level": [100.0, 160.0]},
    },
    "prostate": {
        "optim": {"lr0": 0.0004, "lr_decay": 0.001, "batch_size": 24, "weight_decay": 1e-5},
        "augment": {"shear_max": 0.1, "rotation_max": 10.0, "crop_size": 256, "warp": {"enabled": True}},
        "train": {"ensemble": 10, "patience": 50},
    },
    # desk-scale overfit task
    "synthetic": {
        "arch": {"scale": 0.125},
        "optim": {"lr0": 0.003, "lr_decay": 0.001, "batch_size": 4, "weight_decay": 1e-4},
        "train": {"ensemble": 1, "patience": 200, "max_epochs": 200},
        "synthetic": {"shape": "disks", "size": 64, "splits": {"train": 8, "val": 4}},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("weight_decay_by_prefix", "splits"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _strict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    if cls is AugmentConfig and "warp" in d:
        d = {**d, "warp": _strict(WarpConfig, d["warp"], f"{where}.warp")}
    if cls is SyntheticTaskCfg:
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(doc: dict, base_dir=".") -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - set(_SECTIONS) - {"task", "seed"}
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    task = doc.get("task", "synthetic")
    if task not in PRESETS:
        raise ConfigError(f"unknown task preset {task!r}; choose from {sorted(PRESETS)}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    merged = _merge(PRESETS[task], {k: v for k, v in doc.items() if k in _SECTIONS})
    sections = {name: _strict(cls, merged.get(name, {}), name) for name, cls in _SECTIONS.items()}
    return RunConfig(task=task, seed=seed, base_dir=str(base_dir), **sections)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(doc, path.parent)
