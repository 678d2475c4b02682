"""Run, pretrain and sweep configuration, loaded from versioned JSON.

Unknown keys are rejected so a misspelled field (or swept parameter name)
fails loudly instead of silently falling back to a default.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Optional

from .data import DatasetSpec
from .errors import ConfigurationError
from .models import EncoderSpec

SCHEMA_VERSION = 1
DEFAULT_ALPHA = 1.0


class TrainMode(str, Enum):
    ATSC = "ATSC"
    SIMKD = "SIMKD"
    O_SIMKD = "O_SIMKD"
    O_ATSC = "O_ATSC"
    ATSC_STUDENT_FT = "ATSC_STUDENT_FT"
    STANDALONE_STUDENT = "STANDALONE_STUDENT"
    MULTI_ATSC = "MULTI_ATSC"

    @property
    def needs_pretrained_teacher(self) -> bool:
        return self in (TrainMode.ATSC, TrainMode.SIMKD, TrainMode.ATSC_STUDENT_FT, TrainMode.MULTI_ATSC)

    @property
    def online(self) -> bool:
        return self in (TrainMode.O_SIMKD, TrainMode.O_ATSC)

    @property
    def adaptive(self) -> bool:
        """Modes whose teacher encoder is optimized under the anchor penalty."""
        return self in (TrainMode.ATSC, TrainMode.ATSC_STUDENT_FT, TrainMode.O_ATSC, TrainMode.MULTI_ATSC)

    @property
    def uses_alpha(self) -> bool:
        return self.adaptive


def _check_keys(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where}: expected an object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {sorted(unknown)}")


@dataclass
class OptimConfig:
    base_lr: float = 0.05
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    milestones: tuple = (150, 180, 210)
    decay_factor: float = 0.1
    epochs: int = 240
    batch_size: int = 64

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if not self.base_lr > 0 or not self.decay_factor > 0:
            raise ConfigurationError("optim.base_lr and optim.decay_factor must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("optim.weight_decay must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("optim.epochs and optim.batch_size must be positive")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigurationError("optim.milestones must be strictly increasing")
        if self.milestones and (self.milestones[0] < 0 or self.milestones[-1] >= self.epochs):
            raise ConfigurationError("optim.milestones must lie in [0, epochs)")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d) -> "OptimConfig":
        _check_keys(cls, d, "optim")
        return cls(**d)


@dataclass
class TeacherRef:
    """A teacher is either loaded from ``checkpoint`` or freshly built from
    ``encoder`` (online modes)."""

    checkpoint: Optional[str] = None
    encoder: Optional[EncoderSpec] = None

    def to_dict(self) -> dict:
        return {
            "checkpoint": self.checkpoint,
            "encoder": None if self.encoder is None else self.encoder.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> "TeacherRef":
        _check_keys(cls, d, "teachers[]")
        enc = d.get("encoder")
        return cls(d.get("checkpoint"), None if enc is None else EncoderSpec.from_dict(enc))


@dataclass
class RunConfig:
    mode: TrainMode
    dataset: DatasetSpec
    student: EncoderSpec
    teachers: list = field(default_factory=list)
    alpha: Optional[float] = None
    reduction_factor: int = 2
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    out_dir: Optional[str] = None
    deterministic: bool = True
    dtype: str = "float32"
    divergence_threshold: float = 1e6
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.mode = TrainMode(self.mode)
        if self.alpha is not None:
            if not self.alpha >= 0:
                raise ConfigurationError("alpha must be >= 0")
            if not self.mode.uses_alpha:
                warnings.warn(f"alpha is ignored in mode {self.mode.value}", stacklevel=3)
        if self.reduction_factor < 1:
            raise ConfigurationError("reduction_factor must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema_version {self.schema_version}")
        n = len(self.teachers)
        if self.mode == TrainMode.STANDALONE_STUDENT:
            if n:
                raise ConfigurationError("STANDALONE_STUDENT takes no teachers")
        elif self.mode == TrainMode.MULTI_ATSC:
            if n < 1:
                raise ConfigurationError("MULTI_ATSC needs at least one teacher")
        elif n != 1:
            raise ConfigurationError(f"{self.mode.value} needs exactly one teacher, got {n}")
        for i, t in enumerate(self.teachers):
            if self.mode.needs_pretrained_teacher and not t.checkpoint:
                raise ConfigurationError(f"teachers[{i}].checkpoint: required for mode {self.mode.value}")
            if self.mode.online and t.encoder is None:
                raise ConfigurationError(f"teachers[{i}].encoder: required for mode {self.mode.value}")

    @property
    def alpha_value(self) -> float:
        return DEFAULT_ALPHA if self.alpha is None else float(self.alpha)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "mode": self.mode.value,
            "dataset": self.dataset.to_dict(),
            "student": self.student.to_dict(),
            "teachers": [t.to_dict() for t in self.teachers],
            "alpha": self.alpha,
            "reduction_factor": self.reduction_factor,
            "optim": self.optim.to_dict(),
            "seed": self.seed,
            "out_dir": self.out_dir,
            "deterministic": self.deterministic,
            "dtype": self.dtype,
            "divergence_threshold": self.divergence_threshold,
        }

    @classmethod
    def from_dict(cls, d) -> "RunConfig":
        _check_keys(cls, d, "config")
        for key in ("mode", "dataset", "student"):
            if key not in d:
                raise ConfigurationError(f"{key}: required")
        kw = dict(d)
        kw["dataset"] = DatasetSpec.from_dict(d["dataset"])
        kw["student"] = EncoderSpec.from_dict(d["student"])
        kw["teachers"] = [TeacherRef.from_dict(t) for t in d.get("teachers", [])]
        if "optim" in d:
            kw["optim"] = OptimConfig.from_dict(d["optim"])
        try:
            kw["mode"] = TrainMode(d["mode"])
        except ValueError:
            raise ConfigurationError(
                f"mode: unknown value {d['mode']!r}; choose from {[m.value for m in TrainMode]}"
            ) from None
        return cls(**kw)


@dataclass
class PretrainConfig:
    dataset: DatasetSpec
    encoder: EncoderSpec
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    out_dir: Optional[str] = None
    deterministic: bool = True
    dtype: str = "float32"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema_version {self.schema_version}")

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "dataset": self.dataset.to_dict(),
            "encoder": self.encoder.to_dict(),
            "optim": self.optim.to_dict(),
            "seed": self.seed,
            "out_dir": self.out_dir,
            "deterministic": self.deterministic,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d) -> "PretrainConfig":
        _check_keys(cls, d, "config")
        for key in ("dataset", "encoder"):
            if key not in d:
                raise ConfigurationError(f"{key}: required")
        kw = dict(d)
        kw["dataset"] = DatasetSpec.from_dict(d["dataset"])
        kw["encoder"] = EncoderSpec.from_dict(d["encoder"])
        if "optim" in d:
            kw["optim"] = OptimConfig.from_dict(d["optim"])
        return cls(**kw)


SWEEPABLE = ("alpha", "reduction_factor")


@dataclass
class SweepSpec:
    base: RunConfig
    param: str
    values: list
    seeds: list = field(default_factory=lambda: [0])
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.param not in SWEEPABLE:
            raise ConfigurationError(f"param: must be one of {SWEEPABLE}, got {self.param!r}")
        if not self.values:
            raise ConfigurationError("values: grid must be non-empty")
        if not self.seeds:
            raise ConfigurationError("seeds: need at least one seed")

    @classmethod
    def from_dict(cls, d) -> "SweepSpec":
        _check_keys(cls, d, "sweep")
        for key in ("base", "param", "values"):
            if key not in d:
                raise ConfigurationError(f"{key}: required")
        kw = dict(d)
        kw["base"] = RunConfig.from_dict(d["base"])
        return cls(**kw)


def load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
