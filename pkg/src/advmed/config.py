"""Run configuration: nested dataclasses loaded strictly from JSON (unknown keys rejected)."""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from advmed.attacks import PatchConfig, PerturbationBall, PgdConfig
from advmed.classifier import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    source: str = "synthetic"  # synthetic | directory
    directory: str | None = None  # manifest.csv root when source == directory
    n_patients: int = 200
    images_per_patient: int = 5
    test_fraction: float = 0.12
    seed: int = 0


@dataclass
class Augmentation:
    rotate: bool = True
    hflip: bool = True
    vflip: bool = True
    mixup: bool = True


@dataclass
class TrainSection:
    epochs: int = 10
    batch_size: int = 4
    learning_rate: float = 1e-3
    momentum: float = 0.9
    augmentation: Augmentation = field(default_factory=Augmentation)
    mixup_alpha: float = 0.2
    seed: int = 0
    surrogate_seed_offset: int = 1000


@dataclass
class PatchSection:
    scale: float = 0.4
    steps: int = 400
    step_size: float = 0.05
    batch: int = 32


@dataclass
class AttackSection:
    epsilon: float = 0.02
    iterations: int = 20
    step_size: float | None = None
    targeted: bool = True
    random_start: bool = False
    patch: PatchSection = field(default_factory=PatchSection)
    seed: int = 0


@dataclass
class Thresholds:
    clean_accuracy_min: float = 0.90
    clean_auroc_min: float = 0.90
    pgd_white_accuracy_max: float = 0.01
    pgd_white_auroc_max: float = 0.05
    pgd_white_confidence_min: float = 0.90
    pgd_black_accuracy_ratio_max: float = 0.5
    pgd_black_auroc_max: float = 0.30
    patch_white_accuracy_max: float = 0.02
    patch_white_auroc_max: float = 0.05
    natural_auroc_min: float = 0.30
    natural_auroc_max: float = 0.90
    patch_ordering: bool = True


@dataclass
class ReportSection:
    output_dir: str = "run"
    thresholds: Thresholds = field(default_factory=Thresholds)


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    report: ReportSection = field(default_factory=ReportSection)

    def validate(self) -> "RunConfig":
        d = self.data
        if d.source not in ("synthetic", "directory"):
            raise ConfigError(f"data.source: expected 'synthetic' or 'directory', got {d.source!r}")
        if d.source == "directory" and not d.directory:
            raise ConfigError("data.directory: required when data.source is 'directory'")
        if d.n_patients < 2:
            raise ConfigError(f"data.n_patients: must be >= 2, got {d.n_patients}")
        if d.images_per_patient < 1:
            raise ConfigError(f"data.images_per_patient: must be >= 1, got {d.images_per_patient}")
        if not 0 < d.test_fraction < 1:
            raise ConfigError(f"data.test_fraction: must be in (0, 1), got {d.test_fraction}")
        a = self.attack
        if a.epsilon < 0:
            raise ConfigError(f"attack.epsilon: must be >= 0, got {a.epsilon}")
        if a.iterations < 1:
            raise ConfigError(f"attack.iterations: must be >= 1, got {a.iterations}")
        if not 0 < a.patch.scale <= 1:
            raise ConfigError(f"attack.patch.scale: must be in (0, 1], got {a.patch.scale}")
        try:
            self.train_config("victim")
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from exc
        return self

    def train_config(self, role: str) -> TrainConfig:
        t = self.train
        seed = t.seed + (t.surrogate_seed_offset if role == "surrogate" else 0)
        return TrainConfig(
            learning_rate=t.learning_rate, momentum=t.momentum, epochs=t.epochs,
            batch_size=t.batch_size, rotate=t.augmentation.rotate, hflip=t.augmentation.hflip,
            vflip=t.augmentation.vflip, mixup=t.augmentation.mixup, mixup_alpha=t.mixup_alpha, seed=seed,
        )

    def pgd_config(self) -> PgdConfig:
        a = self.attack
        return PgdConfig(PerturbationBall(a.epsilon), a.iterations, a.step_size, a.targeted, a.random_start, a.seed)

    def patch_config(self) -> PatchConfig:
        p = self.attack.patch
        return PatchConfig(p.scale, p.steps, p.step_size, p.batch, seed=self.attack.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SCALARS = {int: (int,), float: (int, float), bool: (bool,), str: (str,)}


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    ok = _SCALARS.get(tp)
    if ok is None:
        return value
    if isinstance(value, bool) and tp is not bool:
        raise ConfigError(f"{where}: expected {tp.__name__}, got boolean")
    if not isinstance(value, ok):
        raise ConfigError(f"{where}: expected {tp.__name__}, got {type(value).__name__} {value!r}")
    return tp(value)


def from_dict(cls, data, where: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    return cls(**kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(RunConfig, raw).validate()
