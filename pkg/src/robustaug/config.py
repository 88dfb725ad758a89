"""Run configuration: YAML documents with strict keys and full write-back."""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import yaml

from .attacks import ATTACK_NAMES, AttackConfig, PerturbationBall, make_attack, train_adam_schedule
from .augment import AugmentSpec
from .data import Dataset, Split, load_cifar10, make_split, synthetic_dataset
from .errors import ConfigError, RobustAugError
from .models import ArchSpec
from .trainer import TrainConfig

_REQUIRED = object()


def parse_number(value, path: str) -> float:
    """Accepts numbers and fraction strings such as ``"8/255"``."""
    if isinstance(value, bool):
        raise ConfigError(f"expected a number, got {value!r}", path)
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError):
            pass
    raise ConfigError(f"expected a number, got {value!r}", path)


@dataclass
class DataSection:
    source: str = "synthetic"
    kind: str = "striped_patterns"
    n: int = 1024
    num_classes: int = 2
    image_shape: list = field(default_factory=lambda: [3, 16, 16])
    separation: float | None = None
    noise: float | None = None
    label_noise: float = 0.0
    data_seed: int = 0
    data_dir: str | None = None
    classes: list | None = None
    limit: int | None = None
    val_size: int = 256
    test_size: int = 0
    split_seed: int = 0


@dataclass
class ModelSection:
    kind: str = "small_cnn"
    widths: list = field(default_factory=lambda: [16, 32, 64])


@dataclass
class AttackSection:
    norm: str = "linf"
    eps: float = 8 / 255
    steps: int = 10
    optimizer: str = "adam"
    step_size: float | None = None
    restarts: int = 1
    init: str = "uniform_random"
    inner: str = "kl_label"


@dataclass
class EvalSection:
    attack: str = "pgd_adam"
    norm: str = "linf"
    eps: float = 8 / 255
    steps: int | None = None
    restarts: int | None = None
    cascade: list = field(default_factory=lambda: ["apgd_ce", "apgd_margin", "mt"])


@dataclass
class TrainerSection:
    beta: float = _REQUIRED  # type: ignore[assignment]
    epochs: int = 60
    batch_size: int = 128
    base_lr: float = 0.1
    lr_drop_fraction: float = 2 / 3
    lr_drop_factor: float = 10.0
    weight_decay: float = 5e-4
    momentum: float = 0.9
    ema_decay: float | None = 0.999
    extra_ema_decays: list = field(default_factory=list)
    eval_every: int | None = None
    evals: int = 60
    snapshot_steps: list = field(default_factory=list)
    log_wallclock: bool = False


@dataclass
class DiagSection:
    radii: list = field(default_factory=lambda: [0, 2 / 255, 4 / 255, 8 / 255, 16 / 255, 32 / 255, 64 / 255])
    sweep_steps: int = 100
    step_counts: list = field(default_factory=lambda: [1, 5, 10, 20, 50, 100, 400])
    grid: int = 41
    extent: float = 2.0
    taus: list = field(default_factory=lambda: [0.0, 0.9, 0.95, 0.98, 0.99])
    augmentations: list = field(default_factory=lambda: ["pad_crop", "cutmix"])
    examples: int = 256


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    output_dir: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    augment: list = field(default_factory=lambda: ["pad_crop"])
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    diagnostics: DiagSection = field(default_factory=DiagSection)

    # ---------------------------------------------------------------- I/O

    @classmethod
    def from_dict(cls, doc: dict | None) -> "RunConfig":
        cfg = _build(cls, doc or {}, "")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}", "") from None
        if doc is not None and not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping", "")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["augment"] = [AugmentSpec.parse(a).to_dict() for a in self.augment]
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def replace(self, **changes) -> "RunConfig":
        doc = self.to_dict()
        for dotted, value in changes.items():
            node = doc
            keys = dotted.split(".")
            for k in keys[:-1]:
                node = node[k]
            node[keys[-1]] = value
        return RunConfig.from_dict(doc)

    # ---------------------------------------------------------------- builders

    def validate(self) -> None:
        try:
            self.arch_spec()
            self.train_config()
            self.eval_attack()
            [self.stage(s) for s in self.eval.cascade]
        except ConfigError:
            raise
        except RobustAugError as exc:
            raise ConfigError(str(exc), "") from None
        if self.data.source not in ("synthetic", "cifar10"):
            raise ConfigError(f"unknown data source {self.data.source!r}", "data.source")

    def arch_spec(self) -> ArchSpec:
        return ArchSpec(self.model.kind, tuple(self.data.image_shape), self.data.num_classes,
                        tuple(self.model.widths) if self.model.kind != "linear" else ())

    def train_attack(self) -> AttackConfig:
        a = self.attack
        ball = PerturbationBall(a.norm, a.eps)
        schedule = train_adam_schedule(a.steps) if a.optimizer == "adam" else ()
        return AttackConfig(ball, a.steps, a.step_size, a.restarts, a.init, "kl_to_label", a.optimizer, schedule,
                            name="train")

    def eval_attack(self) -> AttackConfig:
        e = self.eval
        return make_attack(e.attack, e.eps, e.norm, steps=e.steps, restarts=e.restarts, seed=self.seed)

    def stage(self, name: str) -> AttackConfig:
        if name not in ATTACK_NAMES:
            raise ConfigError(f"unknown attack {name!r}; expected one of {ATTACK_NAMES}", "eval.cascade")
        return make_attack(name, self.eval.eps, self.eval.norm, seed=self.seed)

    def train_config(self) -> TrainConfig:
        t = self.trainer
        return TrainConfig(beta=t.beta, epochs=t.epochs, batch_size=t.batch_size, base_lr=t.base_lr,
                           lr_drop_fraction=t.lr_drop_fraction, lr_drop_factor=t.lr_drop_factor,
                           weight_decay=t.weight_decay, momentum=t.momentum, ema_decay=t.ema_decay,
                           extra_ema_decays=tuple(t.extra_ema_decays), augment=tuple(self.augment),
                           attack=self.train_attack(), inner=self.attack.inner, eval_attack=self.eval_attack(),
                           eval_every=t.eval_every, evals=t.evals, snapshot_steps=tuple(t.snapshot_steps),
                           seed=self.seed, log_wallclock=t.log_wallclock)

    def dataset(self) -> tuple:
        """(dataset, split) as configured."""
        d = self.data
        if d.source == "synthetic":
            ds = synthetic_dataset(d.kind, d.n, d.data_seed, d.num_classes, image_shape=tuple(d.image_shape),
                                   separation=d.separation, noise=d.noise, label_noise=d.label_noise)
        else:
            ds = load_cifar10(d.data_dir, train=True, classes=d.classes)
            if d.limit:
                ds = ds.subset(np.arange(min(d.limit, len(ds))))
        return ds, make_split(ds, d.val_size, d.split_seed, d.test_size)


_SECTIONS = {"data": DataSection, "model": ModelSection, "attack": AttackSection, "eval": EvalSection,
             "trainer": TrainerSection, "diagnostics": DiagSection}
_FLOAT_KEYS = {"eps", "separation", "noise", "label_noise", "beta", "base_lr", "lr_drop_fraction", "lr_drop_factor",
               "weight_decay", "momentum", "ema_decay", "step_size", "extent"}
_FLOAT_LIST_KEYS = {"radii", "taus", "extra_ema_decays"}


def _build(cls, doc, prefix: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"expected a mapping, got {type(doc).__name__}", prefix or "<root>")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in fields:
            path = f"{prefix}.{key}" if prefix else str(key)
            raise ConfigError(f"unknown key {path!r}", path)
    values = {}
    for name, f in fields.items():
        path = f"{prefix}.{name}" if prefix else name
        if name in doc:
            values[name] = _coerce(name, doc[name], f, path)
        elif name in _SECTIONS and f.type in (_SECTIONS[name].__name__, _SECTIONS[name]):
            values[name] = _build(_SECTIONS[name], {}, path)
        elif f.default is _REQUIRED:
            raise ConfigError(f"missing required key {path!r}", path)
        elif f.default is not dataclasses.MISSING:
            values[name] = copy.deepcopy(f.default)
        else:
            values[name] = f.default_factory()
            if name == "augment" or name in _FLOAT_LIST_KEYS:
                values[name] = _coerce(name, values[name], f, path)
    return cls(**values)


def _coerce(name: str, value, f: dataclasses.Field, path: str):
    if name in _SECTIONS and f.type in (_SECTIONS[name].__name__, _SECTIONS[name]):
        return _build(_SECTIONS[name], value or {}, path)
    if name == "augment":
        if not isinstance(value, list):
            raise ConfigError("augment must be a list", path)
        try:
            return [AugmentSpec.parse(a).to_dict() for a in value]
        except ConfigError as exc:
            raise ConfigError(str(exc), path) from None
    if value is None:
        return None
    if name in _FLOAT_KEYS:
        return parse_number(value, path)
    if name in _FLOAT_LIST_KEYS:
        if not isinstance(value, list):
            raise ConfigError("expected a list", path)
        return [parse_number(v, f"{path}[{i}]") for i, v in enumerate(value)]
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path)
    elif isinstance(default, int) or f.type in ("int | None",):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
    elif isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"expected a list, got {value!r}", path)
    return value
