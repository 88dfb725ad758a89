"""Robustness diagnostics: sweeps, margin landscapes, ensembles, snapshot diversity."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .attacks import (AttackConfig, PerturbationBall, attack_examples, cascade, make_attack, predict_labels)
from .data import RngStream
from .errors import ValidationError
from .models import Ensemble


@dataclass
class PredictionVector:
    correct: np.ndarray
    snapshot: str = ""

    def __post_init__(self):
        self.correct = np.asarray(self.correct, dtype=bool)

    @property
    def errors(self) -> np.ndarray:
        return ~self.correct


def robust_accuracy(model, images: np.ndarray, labels: np.ndarray, attack, snapshot: str = "",
                    workers: int | None = None) -> tuple:
    """(robust fraction, clean fraction, PredictionVector) under an attack or a cascade (list of stages)."""
    if len(images) == 0:
        raise ValidationError("robust accuracy of an empty dataset")
    stages = list(attack) if isinstance(attack, (list, tuple)) else [attack]
    res = cascade(model, images, labels, stages, workers=workers)
    return res.robust_accuracy, res.clean_accuracy, PredictionVector(res.robust, snapshot)


def _sweep_attack(eps: float, steps: int, norm: str, seed: int) -> AttackConfig:
    # The adaptive schedule needs five steps; shorter budgets fall back to sign PGD.
    if steps >= 5:
        return make_attack("apgd_ce", eps, norm, steps=steps, restarts=1, seed=seed, early_stop=True)
    return make_attack("pgd", eps, norm, steps=steps, restarts=1, seed=seed, early_stop=True)


def eps_sweep(model, images: np.ndarray, labels: np.ndarray, radii: Sequence[float], steps: int = 100,
              norm: str = "linf", seed: int = 0) -> list:
    """[(eps, robust accuracy)] with each radius warm-started from the previous radius's deltas.

    An example broken at a smaller radius stays broken: its misclassifying
    delta is feasible for every larger ball. The curve is non-increasing by
    construction.
    """
    radii = [float(r) for r in radii]
    if any(b < a for a, b in zip(radii, radii[1:])) or any(r < 0 for r in radii):
        raise ValidationError("radii must be non-negative and sorted ascending")
    labels = np.asarray(labels)
    alive = predict_labels(model, images) == labels
    delta = np.zeros_like(images)
    out = []
    for eps in radii:
        idx = np.flatnonzero(alive)
        if eps > 0 and len(idx):
            cfg = _sweep_attack(eps, steps, norm, seed)
            success, d, _ = attack_examples(model, images[idx], labels[idx], cfg, index=idx, init_delta=delta[idx])
            delta[idx] = d
            alive[idx[success]] = False
        out.append((eps, float(alive.mean())))
    return out


def steps_sweep(model, images: np.ndarray, labels: np.ndarray, counts: Sequence[int], eps: float = 8 / 255,
                norm: str = "linf", seed: int = 0) -> list:
    """[(K, robust accuracy)]; every K uses the same seed, so initial points are shared."""
    if any(int(k) < 1 for k in counts):
        raise ValidationError("step counts must be >= 1")
    labels = np.asarray(labels)
    correct = predict_labels(model, images) == labels
    idx = np.flatnonzero(correct)
    out = []
    for k in counts:
        robust = correct.copy()
        if len(idx):
            success, _, _ = attack_examples(model, images[idx], labels[idx], _sweep_attack(eps, int(k), norm, seed),
                                            index=idx)
            robust[idx[success]] = False
        out.append((int(k), float(robust.mean())))
    return out


@dataclass
class LandscapeGrid:
    a: np.ndarray          # coefficients along u (a = 1 is the attack endpoint)
    b: np.ndarray          # coefficients along v
    margins: np.ndarray    # (len(a), len(b)); margins[i, j] at x + a_i u + b_j v
    u: np.ndarray
    v: np.ndarray
    eps: float
    inside: np.ndarray     # grid points whose perturbation lies in the ball

    @property
    def origin(self) -> float:
        return float(self.margins[len(self.a) // 2, len(self.b) // 2])

    def rows(self) -> list:
        return [(i, j, float(self.a[i]), float(self.b[j]), float(self.margins[i, j]), bool(self.inside[i, j]))
                for i in range(len(self.a)) for j in range(len(self.b))]


def grid_coefficients(n: int, extent: float) -> np.ndarray:
    if n < 1 or n % 2 == 0:
        raise ValidationError("grid extents must be odd so the origin is a grid point")
    c = n // 2
    if c == 0:
        return np.zeros(1)
    return np.array([(i - c) * extent / c for i in range(n)])


def landscape(model, image: np.ndarray, label: int, ball: PerturbationBall, n: int = 41, m: int | None = None,
              extent: float = 2.0, seed: int = 0, pgd_steps: int = 40) -> LandscapeGrid:
    """Margin over the plane spanned by the PGD endpoint u and a Rademacher direction v.

    v has entries +-eps, so b = 1 reaches the ball boundary coordinate-wise;
    coefficients run over [-extent, extent] in both directions.
    """
    m = n if m is None else m
    a, b = grid_coefficients(n, extent), grid_coefficients(m, extent)
    x = np.asarray(image, dtype=np.float64)[None]
    y = np.array([label])
    cfg = make_attack("pgd", ball.eps, ball.norm, steps=pgd_steps, seed=seed, objective="margin")
    _, u, _ = attack_examples(model, x, y, cfg)
    u = u[0]
    v = ball.eps * RngStream(seed, "landscape").generator(label).choice([-1.0, 1.0], size=x.shape[1:])
    pert = a[:, None, None, None, None] * u[None, None] + b[None, :, None, None, None] * v[None, None]
    pert = pert.reshape((-1,) + x.shape[1:])
    imgs = np.clip(x + pert, 0.0, 1.0)
    logits = np.concatenate([model(T.Tensor(imgs[s:s + 256])).data for s in range(0, len(imgs), 256)])
    margins = T.margin_loss(T.Tensor(logits), np.full(len(logits), label)).data.reshape(n, m)
    inside = PerturbationBall(ball.norm, ball.eps).contains(pert).reshape(n, m)
    return LandscapeGrid(a, b, margins, u, v, ball.eps, inside)


def ensemble_predict(models: Sequence, images: np.ndarray) -> np.ndarray:
    """argmax of the mean softmax over models."""
    if not models:
        raise ValidationError("an ensemble needs at least one model")
    if len({mdl.num_classes for mdl in models}) != 1:
        raise ValidationError("ensemble members disagree on class count")
    probs = None
    for mdl in models:
        z = mdl(T.Tensor(images)).data
        p = np.exp(T._log_softmax_np(z))
        probs = p if probs is None else probs + p
    return (probs / len(models)).argmax(axis=1)


def ensemble_robust_accuracy(models: Sequence, images: np.ndarray, labels: np.ndarray, attack) -> tuple:
    """Attack the averaged-probability model end to end."""
    return robust_accuracy(Ensemble(list(models)), images, labels, attack)


@dataclass
class DiffReport:
    errors: np.ndarray         # per snapshot
    unique: np.ndarray         # wrong here, right in every other snapshot
    agreement: np.ndarray      # fraction of examples where correctness agrees, pairwise
    order: np.ndarray          # example permutation grouping identical error patterns
    unique_mask: np.ndarray    # (snapshots, N)


def prediction_diff(vectors: Sequence[PredictionVector]) -> DiffReport:
    if not vectors:
        raise ValidationError("need at least one prediction vector")
    n = {len(v.correct) for v in vectors}
    if len(n) != 1:
        raise ValidationError("prediction vectors differ in length")
    err = np.array([v.errors for v in vectors])
    wrong_count = err.sum(axis=0)
    # a lone snapshot has nothing to differ from, so it has no unique errors
    unique_mask = err & (wrong_count == 1)[None] & (len(err) > 1)
    agreement = np.array([[float((a == b).mean()) for b in err] for a in err])
    # rows sorted by: number of snapshots wrong, then which snapshot (so blocks are contiguous)
    keys = [err[i] for i in range(len(err) - 1, -1, -1)] + [-wrong_count]
    order = np.lexsort(keys)
    return DiffReport(err.sum(axis=1), unique_mask.sum(axis=1), agreement, order, unique_mask)


def wa_decay_sweep(base_config, spec, dataset, split, taus: Sequence[float], augmentations: Sequence,
                   eval_attack: AttackConfig | None = None) -> list:
    """Rows (augmentation, tau, clean, robust) for the final averaged weights.

    One run per augmentation tracks every tau at once: the live trajectory
    does not depend on tau, so this equals one run per tau with a shared seed.
    """
    from .trainer import evaluate, train

    taus = [float(t) for t in taus]
    if any(not 0 <= t < 1 for t in taus):
        raise ValidationError("decays must lie in [0, 1)")
    attack = eval_attack or base_config.eval_attack
    val_x, val_y = dataset.images[split.val], dataset.labels[split.val]
    rows = []
    for aug in augmentations:
        augment = tuple(aug) if isinstance(aug, (list, tuple)) else (aug,)
        cfg = replace(base_config, augment=augment, ema_decay=None, extra_ema_decays=tuple(taus))
        result = train(cfg, spec, dataset, split)
        name = "+".join(a.kind if hasattr(a, "kind") else str(a) for a in cfg.augment)
        for tau in taus:
            clean, robust = evaluate(spec, result.extra_emas[tau].params, val_x, val_y, attack)
            rows.append((name, tau, clean, robust))
    return rows
