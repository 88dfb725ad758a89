"""Inner-maximization and evaluation attacks.

Every attack evaluates a sequence of candidate perturbations and keeps, per
example, the best one seen (never just the final iterate). Candidates are
always feasible: the ball projection is followed by the image-validity clamp
``x + delta in [0, 1]``. For l-inf that composition is the exact projection
onto the intersection; for l2 it is feasible but only approximate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .augment import ImageBatch
from .data import RngStream
from .errors import ValidationError
from .parallel import map_ordered

NORMS = ("linf", "l2")
OBJECTIVES = ("ce", "kl_to_label", "kl_to_clean", "margin", "targeted_margin")
OPTIMIZERS = ("sign_gd", "adam", "adaptive", "multitargeted")
INITS = ("zero", "uniform_random")
ADAPTIVE_CHECKPOINTS = (0.22, 0.4, 0.55, 0.67, 0.77, 0.85, 0.92)
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
FEASIBILITY_TOL = 1e-9


@dataclass(frozen=True)
class PerturbationBall:
    norm: str = "linf"
    eps: float = 8 / 255

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValidationError(f"norm must be one of {NORMS}")
        if self.eps < 0:
            raise ValidationError("eps must be >= 0")

    def norms(self, delta: np.ndarray) -> np.ndarray:
        flat = delta.reshape(len(delta), -1)
        if self.norm == "linf":
            return np.abs(flat).max(axis=1)
        return np.sqrt((flat ** 2).sum(axis=1))

    def contains(self, delta: np.ndarray, tol: float = FEASIBILITY_TOL) -> np.ndarray:
        return self.norms(delta) <= self.eps + tol


def project(delta: np.ndarray, ball: PerturbationBall, x: np.ndarray | None = None) -> np.ndarray:
    """Project onto the ball, then (if ``x`` is given) clamp x + delta into [0, 1]."""
    delta = np.asarray(delta, dtype=np.float64)
    if ball.norm == "linf":
        out = np.clip(delta, -ball.eps, ball.eps)
    else:
        n = ball.norms(delta)
        factor = np.where(n > ball.eps, ball.eps / np.where(n > 0, n, 1.0), 1.0)
        out = delta * factor.reshape((-1,) + (1,) * (delta.ndim - 1))
    if x is not None:
        out = np.clip(x + out, 0.0, 1.0) - x
    return out


def uniform_in_ball(shape: tuple, ball: PerturbationBall, g: np.random.Generator) -> np.ndarray:
    if ball.norm == "linf":
        return g.uniform(-ball.eps, ball.eps, size=shape)
    d = int(np.prod(shape))
    v = g.standard_normal(shape)
    n = np.sqrt((v ** 2).sum())
    radius = ball.eps * g.random() ** (1.0 / d)
    return v / n * radius if n > 0 else np.zeros(shape)


def ascent_direction(grad: np.ndarray, norm: str) -> np.ndarray:
    """sign(g) for l-inf; g / ||g||_2 per example for l2 (zero where g = 0)."""
    if norm == "linf":
        return np.sign(grad)
    n = np.sqrt((grad.reshape(len(grad), -1) ** 2).sum(axis=1))
    safe = np.where(n > 0, n, 1.0).reshape((-1,) + (1,) * (grad.ndim - 1))
    return np.where(safe > 0, grad / safe, 0.0)


def train_adam_schedule(steps: int) -> tuple:
    """0.1, dropped to 0.01 halfway (5 of 10 steps)."""
    return ((0, 0.1), (steps // 2, 0.01))


def eval_adam_schedule(steps: int) -> tuple:
    """0.1, 0.01 from steps/2, 0.001 from 3*steps/4 (steps 20 and 30 of 40)."""
    return ((0, 0.1), (steps // 2, 0.01), (3 * steps // 4, 0.001))


def schedule_value(schedule: Sequence, k: int) -> float:
    lr = schedule[0][1]
    for start, value in schedule:
        if k >= start:
            lr = value
    return lr


@dataclass(frozen=True)
class AttackConfig:
    ball: PerturbationBall = PerturbationBall()
    steps: int = 10
    step_size: float | None = None
    restarts: int = 1
    init: str = "uniform_random"
    objective: str = "ce"
    optimizer: str = "sign_gd"
    lr_schedule: tuple = ()
    target: int | None = None
    seed: int = 0
    name: str = ""
    early_stop: bool = False

    def __post_init__(self):
        if self.steps < 1 or self.restarts < 1:
            raise ValidationError("steps and restarts must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ValidationError(f"objective must be one of {OBJECTIVES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}")
        if self.init not in INITS:
            raise ValidationError(f"init must be one of {INITS}")
        if self.optimizer == "adaptive" and self.steps < 5:
            raise ValidationError("adaptive PGD needs at least 5 steps")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else 2.5 * self.ball.eps / self.steps

    @property
    def label(self) -> str:
        return self.name or self.optimizer


ATTACK_NAMES = ("pgd", "pgd_adam", "apgd_ce", "apgd_margin", "mt")


def make_attack(name: str, eps: float = 8 / 255, norm: str = "linf", steps: int | None = None,
                restarts: int | None = None, seed: int = 0, **overrides) -> AttackConfig:
    """Canonical attack configurations by name.

    pgd          sign-gradient PGD on cross-entropy, 40 steps, alpha = 2.5 eps / K
    pgd_adam     Adam PGD on cross-entropy, 40 steps, lr 0.1 / 0.01 / 0.001 at K/2, 3K/4
    apgd_ce      adaptive-step PGD on cross-entropy, 100 steps, 5 restarts
    apgd_margin  adaptive-step PGD on the margin (stands in for the logit-ratio stage)
    mt           multi-targeted margin attack, 200 steps, 10 restarts
    """
    ball = PerturbationBall(norm, eps)
    if name == "pgd":
        cfg = AttackConfig(ball, steps or 40, None, restarts or 1, "uniform_random", "ce", "sign_gd", seed=seed)
    elif name == "pgd_adam":
        k = steps or 40
        cfg = AttackConfig(ball, k, None, restarts or 1, "uniform_random", "ce", "adam", eval_adam_schedule(k),
                           seed=seed)
    elif name == "apgd_ce":
        cfg = AttackConfig(ball, steps or 100, None, restarts or 5, "uniform_random", "ce", "adaptive", seed=seed)
    elif name == "apgd_margin":
        cfg = AttackConfig(ball, steps or 100, None, restarts or 5, "uniform_random", "margin", "adaptive",
                           seed=seed)
    elif name == "mt":
        cfg = AttackConfig(ball, steps or 200, None, restarts or 10, "uniform_random", "targeted_margin",
                           "multitargeted", seed=seed)
    else:
        raise ValidationError(f"unknown attack {name!r}; expected one of {ATTACK_NAMES}")
    return replace(cfg, name=name, **overrides)


@dataclass
class AttackResult:
    """Per-example outcome.

    ``delta`` is the strongest misclassifying candidate when one exists,
    otherwise the best-objective candidate; ``argmax_delta`` is always the
    best-objective candidate (what training consumes). ``objective`` is the
    max over all candidates; ``trace`` has shape (restarts, candidates, B).
    """

    delta: np.ndarray
    objective: np.ndarray
    success: np.ndarray
    trace: np.ndarray
    argmax_delta: np.ndarray
    extras: dict = field(default_factory=dict)


class _Tracker:
    """Per-example bookkeeping; updates arrive for a subset ``rows`` of the batch."""

    def __init__(self, x: np.ndarray, y: np.ndarray):
        B = len(x)
        self.y = y
        self.best = np.full(B, -np.inf)
        self.key = np.full(B, -np.inf)
        self.key_mis = np.zeros(B, dtype=bool)
        self.delta = np.zeros_like(x)
        self.argmax_delta = np.zeros_like(x)
        self.success = np.zeros(B, dtype=bool)
        self.traces: list = []
        self.current: list = []

    def new_restart(self):
        self.current = []
        self.traces.append(self.current)

    def update(self, rows: np.ndarray, delta: np.ndarray, value: np.ndarray, logits: np.ndarray) -> np.ndarray:
        mis = logits.argmax(axis=1) != self.y[rows]
        trace = np.full(len(self.y), np.nan)
        trace[rows] = value
        self.current.append(trace)
        improved = value > self.best[rows]
        r = rows[improved]
        self.argmax_delta[r] = delta[improved]
        self.best[r] = value[improved]
        self.success[rows] |= mis
        key_mis = self.key_mis[rows]
        take = (mis & ~key_mis) | ((mis == key_mis) & (value > self.key[rows]))
        r = rows[take]
        self.delta[r] = delta[take]
        self.key[r] = value[take]
        self.key_mis[r] = mis[take]
        return mis

    def result(self, **extras) -> AttackResult:
        n = max(len(t) for t in self.traces)
        pad = np.full(len(self.y), np.nan)
        trace = np.array([t + [pad] * (n - len(t)) for t in self.traces])
        return AttackResult(self.delta, self.best, self.success, trace, self.argmax_delta, extras)


def _objective_fn(config: AttackConfig, batch: ImageBatch, clean_logits: np.ndarray | None,
                  targets: np.ndarray | None) -> Callable:
    """Returns fn(logits, rows) -> per-example objective Tensor for batch rows ``rows``."""
    y_soft, y_hard = batch.soft_labels, batch.hard_labels
    kind = config.objective
    if kind == "ce":
        return lambda z, r: T.softmax_cross_entropy(z, y_soft[r], "none")
    if kind == "kl_to_label":
        return lambda z, r: T.kl_from_labels(y_soft[r], z, "none")
    if kind == "kl_to_clean":
        return lambda z, r: T.kl_divergence(T.Tensor(clean_logits[r]), z, "none")
    if kind == "margin":
        return lambda z, r: T.neg(T.margin_loss(z, y_hard[r]))
    return lambda z, r: T.targeted_margin(z, y_hard[r], targets[r])


def _evaluate(model, x: np.ndarray, delta: np.ndarray, fn: Callable, rows: np.ndarray,
              need_grad: bool = True) -> tuple:
    d = T.Tensor(delta.copy(), requires_grad=need_grad)
    logits = model(T.add(T.Tensor(x), d))
    obj = fn(logits, rows)
    if need_grad:
        T.backward(T.sum_all(obj))
        return obj.data.copy(), d.grad, logits.data
    return obj.data.copy(), None, logits.data


def _negative_margin(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    comp = T.top_competitor(logits, y)
    rows = np.arange(len(y))
    return logits[rows, comp] - logits[rows, y]


def _initial_delta(config: AttackConfig, batch: ImageBatch, restart: int, init_delta: np.ndarray | None):
    x = batch.images
    if init_delta is not None and restart == 0:
        return project(init_delta, config.ball, x)
    if config.init == "zero" or config.ball.eps == 0:
        return np.zeros_like(x)
    stream = RngStream(config.seed, f"attack/{config.label}")
    d = np.stack([uniform_in_ball(x.shape[1:], config.ball, stream.generator(idx, restart))
                  for idx in batch.index])
    return project(d, config.ball, x)


def _run(model, batch: ImageBatch, config: AttackConfig, *, init_delta=None, clean_logits=None,
         targets_for: Callable[[int], np.ndarray] | None = None, report: str = "objective") -> AttackResult:
    """Shared restart/step loop.

    With ``config.early_stop`` an example leaves the active set once it is
    misclassified. Examples never interact, so success flags are identical to
    a full run; only the returned deltas and objectives differ.
    """
    x, y = batch.images, batch.hard_labels
    if len(x) == 0:
        raise ValidationError("cannot attack an empty batch")
    if config.objective == "kl_to_clean" and clean_logits is None:
        clean_logits = model(T.Tensor(x)).data
    tracker = _Tracker(x, y)
    ball = config.ball
    alpha_trace = []

    for r in range(config.restarts):
        targets = targets_for(r) if targets_for else (
            np.full(len(x), config.target) if config.objective == "targeted_margin" else None)
        if config.objective == "targeted_margin" and (targets is None or targets[0] is None):
            raise ValidationError("targeted_margin needs a target class")
        fn = _objective_fn(config, batch, clean_logits, targets)
        tracker.new_restart()

        def record(rows, delta, obj, logits):
            value = _negative_margin(logits, y[rows]) if report == "negative_margin" else obj
            return tracker.update(rows, delta, value, logits)

        active = np.flatnonzero(~tracker.success) if config.early_stop else np.arange(len(x))
        if len(active) == 0:
            break
        delta = _initial_delta(config, batch, r, init_delta)
        if config.optimizer == "adaptive":
            alpha_trace.append(_adaptive_restart(model, x, delta, fn, ball, config.steps, record, active,
                                                 config.early_stop))
            continue
        m = np.zeros_like(x)
        v = np.zeros_like(x)
        b1, b2 = ADAM_BETAS
        for k in range(config.steps):
            obj, grad, logits = _evaluate(model, x[active], delta[active], fn, active)
            mis = record(active, delta[active], obj, logits)
            if config.optimizer == "adam":
                t = k + 1
                with np.errstate(over="ignore", invalid="ignore"):  # a diverged model is caught downstream
                    m[active] = b1 * m[active] + (1 - b1) * grad
                    v[active] = b2 * v[active] + (1 - b2) * grad ** 2
                    step = (m[active] / (1 - b1 ** t)) / (np.sqrt(v[active] / (1 - b2 ** t)) + ADAM_EPS)
                step = schedule_value(config.lr_schedule, k) * step
            else:
                step = config.alpha * ascent_direction(grad, ball.norm)
            delta[active] = project(delta[active] + step, ball, x[active])
            if config.early_stop:
                active = active[~mis]
                if len(active) == 0:
                    break
        else:
            obj, _, logits = _evaluate(model, x[active], delta[active], fn, active, need_grad=False)
            record(active, delta[active], obj, logits)
    extras = {"step_sizes": alpha_trace} if alpha_trace else {}
    return tracker.result(**extras)


def _adaptive_restart(model, x, delta, fn, ball: PerturbationBall, steps: int, record, active: np.ndarray,
                      early_stop: bool) -> np.ndarray:
    """One restart of simplified adaptive-step PGD; returns the per-step alpha history."""
    B = len(x)
    shape = (-1,) + (1,) * (x.ndim - 1)
    alpha = np.full(B, 2.0 * ball.eps)
    checkpoints = sorted({math.ceil(p * steps) for p in ADAPTIVE_CHECKPOINTS})
    obj, g, logits = _evaluate(model, x[active], delta[active], fn, active)
    mis = record(active, delta[active], obj, logits)
    grad = np.zeros_like(x)
    grad[active] = g
    best_val = np.full(B, -np.inf)
    best_val[active] = obj
    best_delta, best_grad, prev = delta.copy(), grad.copy(), delta.copy()
    current = best_val.copy()
    increases = np.zeros(B)
    last_cp = 0
    history = []
    if early_stop:
        active = active[~mis]
    for k in range(steps):
        if len(active) == 0:
            break
        history.append(alpha.copy())
        xa, da = x[active], delta[active]
        z = project(da + alpha[active].reshape(shape) * ascent_direction(grad[active], ball.norm), ball, xa)
        a = 0.75 if k > 0 else 1.0
        new = project(da + a * (z - da) + (1 - a) * (da - prev[active]), ball, xa)
        prev[active] = da
        delta[active] = new
        obj, g, logits = _evaluate(model, xa, new, fn, active, need_grad=k < steps - 1)
        mis = record(active, new, obj, logits)
        increases[active] += obj > current[active]
        current[active] = obj
        better = obj > best_val[active]
        rows = active[better]
        best_val[rows] = obj[better]
        best_delta[rows] = new[better]
        if g is not None:
            grad[active] = g
            best_grad[rows] = g[better]
        if k + 1 in checkpoints and k < steps - 1:
            halve = increases < 0.75 * (k + 1 - last_cp)
            alpha[halve] /= 2
            delta[halve] = best_delta[halve]
            prev[halve] = best_delta[halve]
            grad[halve] = best_grad[halve]
            current[halve] = best_val[halve]
            increases[:] = 0
            last_cp = k + 1
        if early_stop:
            active = active[~mis]
    return np.array(history)


def pgd(model, batch: ImageBatch, config: AttackConfig, init_delta=None, clean_logits=None) -> AttackResult:
    """K sign-gradient (l-inf) or normalized-gradient (l2) ascent steps per restart."""
    return _run(model, batch, replace(config, optimizer="sign_gd"), init_delta=init_delta,
                clean_logits=clean_logits)


def pgd_adam(model, batch: ImageBatch, config: AttackConfig, init_delta=None, clean_logits=None) -> AttackResult:
    cfg = config if config.lr_schedule else replace(config, lr_schedule=train_adam_schedule(config.steps))
    return _run(model, batch, replace(cfg, optimizer="adam"), init_delta=init_delta, clean_logits=clean_logits)


def adaptive_pgd(model, batch: ImageBatch, config: AttackConfig, init_delta=None) -> AttackResult:
    """Step 2*eps, halved at budget checkpoints when under 75% of steps improved."""
    return _run(model, batch, replace(config, optimizer="adaptive"), init_delta=init_delta)


def multitargeted(model, batch: ImageBatch, ball: PerturbationBall, restarts: int = 10, steps: int = 200,
                  step_size: float | None = None, seed: int = 0, init: str = "uniform_random") -> AttackResult:
    """Targeted margin PGD; restart r aims at the (r mod K-1)-th wrong class.

    Reported objective is max_{i != y} z_i - z_y, so success <=> it turns positive.
    """
    K = model.num_classes
    if K < 2:
        raise ValidationError("multi-targeted attack needs at least two classes")
    y = batch.hard_labels
    wrong = np.array([[c for c in range(K) if c != yi] for yi in y])
    cfg = AttackConfig(ball, steps, step_size, restarts, init, "targeted_margin", "sign_gd", seed=seed, name="mt")
    return _run(model, batch, cfg, targets_for=lambda r: wrong[:, r % (K - 1)], report="negative_margin")


def run_attack(model, batch: ImageBatch, config: AttackConfig, init_delta=None) -> AttackResult:
    if config.optimizer == "multitargeted":
        return multitargeted(model, batch, config.ball, config.restarts, config.steps, config.step_size,
                             config.seed, config.init)
    if config.optimizer == "adam":
        return pgd_adam(model, batch, config, init_delta)
    if config.optimizer == "adaptive":
        return adaptive_pgd(model, batch, config, init_delta)
    return pgd(model, batch, config, init_delta)


# ---------------------------------------------------------------- dataset-level helpers

DEFAULT_CHUNK = 128


def _chunks(n: int, size: int) -> list:
    return [np.arange(s, min(s + size, n)) for s in range(0, n, size)]


def predict_labels(model, images: np.ndarray, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    if len(images) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([model(T.Tensor(images[c])).data.argmax(axis=1) for c in _chunks(len(images), chunk)])


def _attack_chunk(args):
    model, images, labels, num_classes, index, config, init = args
    batch = ImageBatch.from_labels(images, labels, num_classes, index)
    res = run_attack(model, batch, config, init)
    return res.success, res.delta, res.objective


def attack_examples(model, images: np.ndarray, labels: np.ndarray, config: AttackConfig, index=None,
                    init_delta=None, chunk: int = DEFAULT_CHUNK, workers: int | None = None) -> tuple:
    """Attack in fixed-size chunks (results do not depend on ``workers``).

    Returns (success, delta, objective) over all examples; ``index`` are the
    global example ids that key the random streams.
    """
    n = len(images)
    index = np.arange(n) if index is None else np.asarray(index)
    if n == 0:
        return np.zeros(0, bool), np.zeros_like(images), np.zeros(0)
    jobs = [(model, images[c], labels[c], model.num_classes, index[c], config,
             None if init_delta is None else init_delta[c]) for c in _chunks(n, chunk)]
    parts = map_ordered(_attack_chunk, jobs, workers)
    return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
            np.concatenate([p[2] for p in parts]))


@dataclass
class CascadeResult:
    robust: np.ndarray
    clean_correct: np.ndarray
    stage_names: list
    stage_robust_accuracy: list

    @property
    def robust_accuracy(self) -> float:
        return float(self.robust.mean()) if len(self.robust) else 0.0

    @property
    def clean_accuracy(self) -> float:
        return float(self.clean_correct.mean()) if len(self.clean_correct) else 0.0


def cascade(model, images: np.ndarray, labels: np.ndarray, stages: Sequence, chunk: int = DEFAULT_CHUNK,
            workers: int | None = None) -> CascadeResult:
    """Robust iff clean-correct and every stage fails; later stages skip broken examples."""
    if not stages:
        raise ValidationError("a cascade needs at least one stage")
    configs = [replace(make_attack(s) if isinstance(s, str) else s, early_stop=True) for s in stages]
    labels = np.asarray(labels)
    correct = predict_labels(model, images, chunk) == labels
    alive = correct.copy()
    accs = []
    for cfg in configs:
        idx = np.flatnonzero(alive)
        if len(idx):
            success, _, _ = attack_examples(model, images[idx], labels[idx], cfg, index=idx, chunk=chunk,
                                            workers=workers)
            alive[idx[success]] = False
        accs.append(float(alive.mean()))
    return CascadeResult(alive, correct, [c.label for c in configs], accs)
