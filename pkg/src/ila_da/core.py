"""Shared types and experiment configuration."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union

import torch

TASKS = ("m2u", "u2m", "s2m", "custom")
METHODS = ("dann", "cdan")
PSEUDO_MODES = ("knn", "classifier")
INSTANCE_LOSSES = ("msc", "triplet", "none")
RATIO_CAPS = ("both", "unlike")
EVAL_SPLITS = ("train", "test")

# Source/target dataset names per benchmark task.
TASK_DOMAINS = {
    "m2u": ("mnist", "usps"),
    "u2m": ("usps", "mnist"),
    "s2m": ("svhn", "mnist"),
}

_TASK_ALIASES = {
    "m->u": "m2u", "m→u": "m2u", "mnist-usps": "m2u",
    "u->m": "u2m", "u→m": "u2m", "usps-mnist": "u2m",
    "s->m": "s2m", "s→m": "s2m", "svhn-mnist": "s2m",
}


class ConfigError(ValueError):
    """Raised with every violated constraint of an :class:`ExperimentConfig`."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "m2u"
    method: str = "dann"
    pseudo_mode: str = "knn"
    instance_loss: str = "msc"
    k: int = 3
    mu: float = 0.75
    per_class: int = 12
    num_classes: int = 10
    target_batch: int = 120
    m_cap: Union[int, str] = "auto"
    ratio_cap: str = "both"
    lambda_adv: float = 1.0
    lambda_msc: float = 1.0
    triplet_margin: float = 0.3
    pretrain_iters: int = 500
    adv_in_pretrain: bool = False
    total_iters: int = 10000
    lr0: float = 0.01
    lr_alpha: float = 10.0
    lr_beta: float = 0.75
    momentum: float = 0.9
    weight_decay: float = 5e-4
    eval_every: int = 1000
    eval_split: str = "train"
    # 1-based target epoch at which one batch's affinity grids are written; 0 disables
    export_affinity_epoch: int = 40
    seed: int = 0
    # only read when task == "custom"
    source: str = ""
    target: str = ""

    @property
    def source_batch(self) -> int:
        return self.per_class * self.num_classes

    @property
    def domains(self) -> tuple[str, str]:
        if self.task == "custom":
            return self.source, self.target
        return TASK_DOMAINS[self.task]

    def replace(self, **changes: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        """Short stable hash of the full resolved config."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _normalize_task(task: str) -> str:
    t = str(task).strip().lower()
    return _TASK_ALIASES.get(t, t)


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check every invariant of ``cfg`` and resolve ``"auto"`` fields.

    Returns a new config with ``m_cap`` resolved to ``per_class`` when it was
    ``"auto"``.  Raises :class:`ConfigError` listing *all* violations.
    """
    errors = []
    task = _normalize_task(cfg.task)
    if task not in TASKS:
        errors.append(f"task must be one of {TASKS}, got {cfg.task!r}")
    elif task == "custom" and (not cfg.source or not cfg.target):
        errors.append("task 'custom' requires both source and target dataset names")
    method = str(cfg.method).lower()
    if method not in METHODS:
        errors.append(f"method must be one of {METHODS}, got {cfg.method!r}")
    for name, allowed in (("pseudo_mode", PSEUDO_MODES), ("instance_loss", INSTANCE_LOSSES),
                          ("ratio_cap", RATIO_CAPS), ("eval_split", EVAL_SPLITS)):
        if getattr(cfg, name) not in allowed:
            errors.append(f"{name} must be one of {allowed}, got {getattr(cfg, name)!r}")

    if not (isinstance(cfg.mu, (int, float)) and 0.0 < cfg.mu <= 1.0):
        errors.append("mu must lie in (0,1]")
    for name in ("k", "per_class", "num_classes", "target_batch", "total_iters", "eval_every"):
        value = getattr(cfg, name)
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            errors.append(f"{name} must be a positive integer, got {value!r}")
    if not isinstance(cfg.pretrain_iters, int) or cfg.pretrain_iters < 0:
        errors.append(f"pretrain_iters must be a nonnegative integer, got {cfg.pretrain_iters!r}")
    if isinstance(cfg.k, int) and isinstance(cfg.per_class, int) and isinstance(cfg.num_classes, int):
        n_s = cfg.per_class * cfg.num_classes
        if cfg.k > n_s >= 1:
            errors.append(f"k exceeds source batch size {n_s}")
    if isinstance(cfg.num_classes, int) and cfg.num_classes < 2:
        errors.append("num_classes must be at least 2 (ratio test needs unlike samples)")

    m_cap = cfg.m_cap
    if m_cap == "auto":
        m_cap = cfg.per_class
    elif not isinstance(m_cap, int) or isinstance(m_cap, bool) or m_cap < 1:
        errors.append(f"m_cap must be a positive integer or 'auto', got {cfg.m_cap!r}")

    for name in ("lambda_adv", "lambda_msc", "triplet_margin", "weight_decay", "momentum"):
        value = getattr(cfg, name)
        if not isinstance(value, (int, float)) or not math.isfinite(value) or value < 0:
            errors.append(f"{name} must be a nonnegative real, got {value!r}")
    if not (isinstance(cfg.lr0, (int, float)) and cfg.lr0 > 0):
        errors.append(f"lr0 must be positive, got {cfg.lr0!r}")
    for name in ("lr_alpha", "lr_beta"):
        if not (isinstance(getattr(cfg, name), (int, float)) and getattr(cfg, name) >= 0):
            errors.append(f"{name} must be nonnegative, got {getattr(cfg, name)!r}")
    if not (isinstance(cfg.export_affinity_epoch, int) and cfg.export_affinity_epoch >= 0):
        errors.append(f"export_affinity_epoch must be a nonnegative integer, got {cfg.export_affinity_epoch!r}")

    if errors:
        raise ConfigError(errors)
    return dataclasses.replace(cfg, task=task, method=method, m_cap=m_cap)


# ---------------------------------------------------------------------------
# flat key = value config documents
# ---------------------------------------------------------------------------

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name: str, raw: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    kind = _FIELD_TYPES[name]
    if kind == "bool":
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError([f"{name} must be a boolean, got {raw!r}"])
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError([f"{name} must be an integer, got {raw!r}"]) from None
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError([f"{name} must be a real number, got {raw!r}"]) from None
    if name == "m_cap":
        return raw if raw == "auto" else _coerce_int_or_raw(raw)
    return raw


def _coerce_int_or_raw(raw: str) -> Any:
    try:
        return int(raw)
    except ValueError:
        return raw


def config_from_mapping(values: dict[str, Any], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Build a config from ``values`` on top of ``base``; unknown keys are errors."""
    unknown = sorted(set(values) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError([f"unknown config key {key!r}" for key in unknown])
    base = base or ExperimentConfig()
    return dataclasses.replace(base, **{k: _coerce(k, v) for k, v in values.items()})


def parse_config(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Parse a flat ``key = value`` document (``#`` comments allowed)."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError([f"malformed config document: {exc}"]) from None
    if len(parser.sections()) != 1:
        raise ConfigError(["config documents are flat; section headers are not allowed"])
    return config_from_mapping(dict(parser["run"]), base)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = [f"{key} = {str(value).lower() if isinstance(value, bool) else value}"
             for key, value in cfg.to_dict().items()]
    return "\n".join(lines) + "\n"


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config not found: {path}")
    return parse_config(path.read_text())


# ---------------------------------------------------------------------------
# batches and per-step losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SourceBatch:
    images: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("source images and labels disagree in batch size")


@dataclass(frozen=True)
class TargetBatch:
    """Unlabeled target images.  There is deliberately no label field."""

    images: torch.Tensor


@dataclass
class TrainStepLosses:
    l_sup: float
    l_adv: float
    l_disc: float
    l_instance: float

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)

    def all_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_dict().values())


def check_class_balanced(labels: torch.Tensor, per_class: int, num_classes: int) -> None:
    counts = torch.bincount(labels, minlength=num_classes)
    if counts.numel() != num_classes or not bool((counts == per_class).all()):
        raise ValueError(f"source batch is not class balanced: counts {counts.tolist()}")


@dataclass
class RunPaths:
    root: Path
    manifest: Path = field(init=False)
    metrics: Path = field(init=False)
    report: Path = field(init=False)
    checkpoint: Path = field(init=False)
    affinity_dir: Path = field(init=False)

    def __post_init__(self):
        self.root = Path(self.root)
        self.manifest = self.root / "manifest.json"
        self.metrics = self.root / "metrics.jsonl"
        self.report = self.root / "report.json"
        self.checkpoint = self.root / "checkpoint.pt"
        self.affinity_dir = self.root / "affinity"
