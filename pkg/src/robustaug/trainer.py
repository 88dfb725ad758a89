"""Outer loop: TRADES loss on augmented batches, Nesterov SGD, EMA weights."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, PerturbationBall, make_attack, predict_labels, attack_examples, run_attack
from .augment import AugmentSpec, ImageBatch, pipeline
from .data import Dataset, RngStream, Split, dataset_mean
from .errors import NumericalError, ValidationError
from .models import ArchSpec, Classifier, ModelParams, bind, forward, init_model

INNER_OBJECTIVES = {"kl_label": "kl_to_label", "kl_clean": "kl_to_clean"}
LOG_COLUMNS = ("step", "lr", "train_loss", "clean_val", "robust_val_pgd40", "clean_val_ema", "robust_val_ema",
               "wallclock_s")


def effective_lr(base_lr: float, batch_size: int) -> float:
    """Linear scaling rule, never below the base rate."""
    if base_lr <= 0 or batch_size <= 0:
        raise ValidationError("learning rate and batch size must be positive")
    return max(base_lr * batch_size / 256, base_lr)


def drop_step(total_steps: int, fraction: float = 2 / 3) -> int:
    # Fraction avoids float floor surprises: 2/3 * 3 must give 2, not 1.
    return math.floor(Fraction(fraction).limit_denominator(1000) * total_steps)


def lr_at(step: int, total_steps: int, lr0: float, fraction: float = 2 / 3, factor: float = 10.0) -> float:
    if not 0 <= step < total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps})")
    return lr0 if step < drop_step(total_steps, fraction) else lr0 / factor


@dataclass
class SgdState:
    velocity: list


def sgd_nesterov_step(params: ModelParams, grads: Sequence[np.ndarray], lr: float, momentum: float,
                      weight_decay: float, state: SgdState | None = None) -> tuple:
    """g = grad + wd*theta; v = m*v + g; theta -= lr*(g + m*v). Decay applies to every parameter."""
    if len(grads) != len(params) or any(g.shape != v.shape for g, v in zip(grads, params.values)):
        raise ValidationError("gradient layout does not match parameters")
    if state is None:
        state = SgdState([np.zeros_like(v) for v in params.values])
    new_values, new_vel = [], []
    for theta, grad, vel in zip(params.values, grads, state.velocity):
        g = grad + weight_decay * theta
        v = momentum * vel + g
        new_values.append(theta - lr * (g + momentum * v))
        new_vel.append(v)
    return ModelParams(params.names, new_values), SgdState(new_vel)


@dataclass
class EmaState:
    params: ModelParams
    decay: float
    count: int = 0

    @classmethod
    def start(cls, params: ModelParams, decay: float) -> "EmaState":
        if not 0.0 <= decay <= 1.0:
            raise ValidationError("EMA decay must lie in [0, 1]")
        return cls(params.copy(), decay, 0)


def ema_update(ema: EmaState, params: ModelParams) -> EmaState:
    if not ema.params.same_layout(params):
        raise ValidationError("EMA and live parameters have different layouts")
    tau = ema.decay
    values = [tau * a + (1 - tau) * b for a, b in zip(ema.params.values, params.values)]
    return EmaState(ModelParams(params.names, values), tau, ema.count + 1)


def trades_loss(spec: ArchSpec, p: dict, images: np.ndarray, soft_labels: np.ndarray, delta: np.ndarray,
                beta: float) -> T.Tensor:
    """CE(f(x'), y') + beta * KL(f(x') || f(x' + delta)), both branches differentiable."""
    if delta.shape != images.shape:
        raise ValidationError("perturbation and images differ in shape")
    clean = forward(spec, p, T.Tensor(images))
    loss = T.softmax_cross_entropy(clean, soft_labels)
    if beta == 0:
        return loss
    adv = forward(spec, p, T.Tensor(images + delta))
    return T.add(loss, T.scale(T.kl_divergence(clean, adv), beta))


@dataclass
class TrainConfig:
    beta: float
    epochs: int = 60
    batch_size: int = 128
    base_lr: float = 0.1
    lr_drop_fraction: float = 2 / 3
    lr_drop_factor: float = 10.0
    weight_decay: float = 5e-4
    momentum: float = 0.9
    ema_decay: float | None = 0.999
    extra_ema_decays: tuple = ()
    augment: tuple = ("pad_crop",)
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(
        PerturbationBall("linf", 8 / 255), steps=10, objective="kl_to_label", optimizer="adam", name="train"))
    inner: str = "kl_label"
    eval_attack: AttackConfig = field(default_factory=lambda: make_attack("pgd_adam", 8 / 255))
    eval_every: int | None = None
    evals: int = 60
    snapshot_steps: tuple = ()
    seed: int = 0
    log_wallclock: bool = False

    def __post_init__(self):
        if self.beta < 0:
            raise ValidationError("beta must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.base_lr <= 0:
            raise ValidationError("epochs >= 0, batch_size >= 1 and base_lr > 0 required")
        if not 0 < self.lr_drop_fraction < 1 or self.lr_drop_factor <= 0:
            raise ValidationError("lr_drop_fraction must lie in (0, 1)")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValidationError("weight_decay >= 0 and momentum in [0, 1) required")
        if self.inner not in INNER_OBJECTIVES:
            raise ValidationError(f"inner must be one of {list(INNER_OBJECTIVES)}")
        for tau in ((self.ema_decay,) if self.ema_decay is not None else ()) + tuple(self.extra_ema_decays):
            if not 0 <= tau <= 1:
                raise ValidationError("EMA decays must lie in [0, 1]")
        self.augment = tuple(AugmentSpec.parse(a) for a in self.augment)
        self.extra_ema_decays = tuple(float(t) for t in self.extra_ema_decays)
        self.snapshot_steps = tuple(int(s) for s in self.snapshot_steps)

    def steps_per_epoch(self, n_train: int) -> int:
        return math.ceil(n_train / self.batch_size) if n_train else 0

    def eval_interval(self, total_steps: int) -> int:
        if self.eval_every:
            return self.eval_every
        return max(1, -(-total_steps // max(1, self.evals)))  # at most `evals` records


@dataclass
class MetricsRecord:
    step: int
    lr: float
    train_loss: float
    clean_val: float
    robust_val_pgd40: float
    clean_val_ema: float
    robust_val_ema: float
    wallclock_s: float = 0.0

    def row(self) -> list:
        return [getattr(self, c) for c in LOG_COLUMNS]


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    best_step: int | None = None
    best_step_ema: int | None = None
    best_params: ModelParams | None = None
    best_params_ema: ModelParams | None = None
    abort: dict | None = None
    wallclock: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def best_minus_final(self, ema: bool = False) -> float:
        col = self.column("robust_val_ema" if ema else "robust_val_pgd40")
        return float(col.max() - col[-1]) if len(col) else 0.0

    def to_csv(self) -> str:
        lines = [",".join(LOG_COLUMNS)]
        for r in self.records:
            lines.append(",".join([str(r.step), repr(float(r.lr)), *(f"{v:.10g}" for v in r.row()[2:])]))
        return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    params: ModelParams
    ema: EmaState | None
    extra_emas: dict
    log: TrainLog


class TrainingAborted(NumericalError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


def evaluate(spec: ArchSpec, params: ModelParams, images: np.ndarray, labels: np.ndarray,
             attack: AttackConfig) -> tuple:
    """(clean accuracy, robust accuracy) on a labelled set; robust counts clean-correct survivors."""
    if len(images) == 0:
        return 0.0, 0.0
    model = Classifier(spec, params)
    correct = predict_labels(model, images) == labels
    robust = correct.copy()
    idx = np.flatnonzero(correct)
    if len(idx) and attack.ball.eps > 0:
        success, _, _ = attack_examples(model, images[idx], labels[idx], replace(attack, early_stop=True),
                                        index=idx)
        robust[idx[success]] = False
    return float(correct.mean()), float(robust.mean())


def _step_seed(seed: int, step: int) -> int:
    return int(seed) + (int(step) + 1) * (1 << 32)


def train(config: TrainConfig, spec: ArchSpec, dataset: Dataset, split: Split,
          init: ModelParams | None = None) -> TrainResult:
    if dataset.image_shape != spec.input_shape or dataset.num_classes != spec.num_classes:
        raise ValidationError("dataset does not match the architecture")
    params = init.copy() if init is not None else init_model(spec, config.seed)
    ema = EmaState.start(params, config.ema_decay) if config.ema_decay is not None else None
    extras = {tau: EmaState.start(params, tau) for tau in config.extra_ema_decays}
    log = TrainLog()
    train_idx = split.train
    steps_per_epoch = config.steps_per_epoch(len(train_idx))
    total = steps_per_epoch * config.epochs
    if total == 0:
        return TrainResult(params, ema, extras, log)

    lr0 = effective_lr(config.base_lr, config.batch_size)
    interval = config.eval_interval(total)
    fill = dataset_mean(dataset.subset(train_idx))
    attack = replace(config.attack, objective=INNER_OBJECTIVES[config.inner])
    val_x, val_y = dataset.images[split.val], dataset.labels[split.val]
    aug_stream = RngStream(config.seed, "augment")
    order_stream = RngStream(config.seed, "order")
    sgd = None
    losses = []
    t0 = time.perf_counter()
    best = best_ema = -1.0
    step = 0
    for epoch in range(config.epochs):
        order = train_idx[order_stream.generator(epoch).permutation(len(train_idx))]
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            lr = lr_at(step, total, lr0, config.lr_drop_fraction, config.lr_drop_factor)
            try:
                batch = ImageBatch.from_labels(dataset.images[idx], dataset.labels[idx], dataset.num_classes, idx)
                if config.augment:
                    batch = pipeline(batch, config.augment, aug_stream.child(step), fill)
                if config.beta > 0 and attack.ball.eps > 0:
                    res = run_attack(Classifier(spec, params), batch, replace(attack, seed=_step_seed(config.seed, step)))
                    delta = res.argmax_delta
                else:
                    delta = np.zeros_like(batch.images)
                p = bind(params, requires_grad=True)
                loss = trades_loss(spec, p, batch.images, batch.soft_labels, delta, config.beta)
                T.backward(loss)
                grads = [p[n].grad for n in params.names]
                params, sgd = sgd_nesterov_step(params, grads, lr, config.momentum, config.weight_decay, sgd)
            except NumericalError as exc:
                raise _aborted(log, step, epoch, lr, exc) from exc
            losses.append(loss.item())
            if ema is not None:
                ema = ema_update(ema, params)
            extras = {tau: ema_update(e, params) for tau, e in extras.items()}
            step += 1
            if step in config.snapshot_steps or step == total:
                log.snapshots[step] = (params.copy(), ema.params.copy() if ema else None)
            if step % interval == 0 or step == total:
                try:
                    clean, robust = evaluate(spec, params, val_x, val_y, config.eval_attack)
                    if ema is not None:
                        clean_e, robust_e = evaluate(spec, ema.params, val_x, val_y, config.eval_attack)
                    else:
                        clean_e, robust_e = clean, robust
                except NumericalError as exc:
                    raise _aborted(log, step, epoch, lr, exc) from exc
                wall = time.perf_counter() - t0
                log.wallclock.append(wall)
                log.records.append(MetricsRecord(step, lr, float(np.mean(losses)), clean, robust, clean_e, robust_e,
                                                 wall if config.log_wallclock else 0.0))
                losses = []
                if robust > best:
                    best, log.best_step, log.best_params = robust, step, params.copy()
                if ema is not None and robust_e > best_ema:
                    best_ema, log.best_step_ema, log.best_params_ema = robust_e, step, ema.params.copy()
    return TrainResult(params, ema, extras, log)


def _aborted(log: TrainLog, step: int, epoch: int, lr: float, exc: Exception) -> TrainingAborted:
    log.abort = {"step": step, "epoch": epoch, "lr": lr, "error": str(exc)}
    return TrainingAborted(f"non-finite value at step {step}: {exc}", log.abort)
