"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk experiments (criteria 7 to 11) share six training runs: Pad & Crop
and CutMix, three seeds each, with the weight average tracked alongside the
live weights. The average never feeds back into training, so the live
trajectory is the no-WA run. Set ROBUSTAUG_ACCEPT_DIR to keep the runs
between sessions; a run is reused only when its resolved config matches.
"""
import itertools
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import grad_check, rel_err, report
from robustaug import attacks as AT
from robustaug import augment as A
from robustaug import diagnostics as D
from robustaug import tensor as T
from robustaug.attacks import AttackConfig, PerturbationBall
from robustaug.augment import ImageBatch
from robustaug.cli import desk_config, read_csv, run_dir, run_training
from robustaug.data import Dataset, RngStream, dataset_mean
from robustaug.models import ArchSpec, Classifier, ModelParams, bind, init_model, load_checkpoint
from robustaug.trainer import EmaState, drop_step, effective_lr, ema_update, lr_at, trades_loss

SEEDS = (0, 1, 2)
AUGS = ("pad_crop", "cutmix")


# ---------------------------------------------------------------- 1. gradients


def _op_cases(rng):
    """(name, build, arrays) for every differentiable op; inputs avoid kinks."""
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    away = np.where(np.abs(a) < 0.1, 0.3, a)  # clamp at +-1 with no entry within 0.1 of a kink
    away = np.where(np.abs(np.abs(away) - 1) < 0.1, 1.3 * np.sign(away), away)
    x_img, k = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3))
    kb, cb = rng.normal(size=4), rng.normal(size=3)
    k4 = rng.normal(size=(4, 3, 4, 4))  # the stride-2 layer shape: 4x4, pad 1
    xa, wa, ba = rng.normal(size=(5, 7)), rng.normal(size=(7, 3)), rng.normal(size=3)
    z, z2 = rng.normal(size=(5, 4)) * 2, rng.normal(size=(5, 4)) * 2
    soft = rng.dirichlet(np.ones(4), 5)
    y = rng.integers(0, 4, 5)
    t = (y + 1 + rng.integers(0, 3, 5)) % 4
    ws = lambda out: T.weighted_sum(out, w if out.shape == w.shape else np.ones(out.shape))  # noqa: E731
    lin = lambda out, c: T.weighted_sum(out, c)  # noqa: E731
    cz = rng.normal(size=(5, 4))
    c5 = rng.normal(size=5)
    c_flat, c_img = rng.normal(size=(2, 108)), rng.normal(size=(2, 3, 6, 6))
    c_conv1, c_conv2 = rng.normal(size=(2, 4, 6, 6)), rng.normal(size=(2, 4, 3, 3))
    return [
        ("add", lambda p, q: ws(T.add(p, q)), [a, b]),
        ("sub", lambda p, q: ws(T.sub(p, q)), [a, b]),
        ("mul", lambda p, q: ws(T.mul(p, q)), [a, b]),
        ("scale", lambda p: ws(T.scale(p, -1.7)), [a]),
        ("neg", lambda p: ws(T.neg(p)), [a]),
        ("clamp", lambda p: ws(T.clamp(p, -1.0, 1.0)), [away]),
        ("exp", lambda p: ws(T.exp(p)), [a]),
        ("log", lambda p: ws(T.log(p)), [pos]),
        ("silu", lambda p: ws(T.silu(p)), [a]),
        ("reshape", lambda p: T.weighted_sum(T.reshape(p, (4, 3)), w.reshape(4, 3)), [a]),
        ("flatten", lambda p: lin(T.flatten(p), c_flat), [x_img]),
        ("sum_all", lambda p: T.sum_all(T.mul(p, T.Tensor(w))), [a]),
        ("mean", lambda p: T.mean(T.mul(p, T.Tensor(w))), [a]),
        ("affine", lambda p, q, r: lin(T.affine(p, q, r), np.ones((5, 3)) + np.arange(3)), [xa, wa, ba]),
        ("conv2d_s1p1", lambda p, q, r: lin(T.conv2d(p, q, r, 1, 1), c_conv1), [x_img, k, kb]),
        ("conv2d_s2p1", lambda p, q, r: lin(T.conv2d(p, q, r, 2, 1), c_conv2), [x_img, k4, kb]),
        ("add_channel_bias", lambda p, q: lin(T.add_channel_bias(p, q), c_img), [x_img, cb]),
        ("log_softmax", lambda p: lin(T.log_softmax(p), cz), [z]),
        ("softmax_cross_entropy", lambda p: T.softmax_cross_entropy(p, soft), [z]),
        ("kl_divergence", lambda p, q: T.kl_divergence(p, q), [z, z2]),
        ("kl_from_labels", lambda p: T.kl_from_labels(soft, p), [z]),
        ("margin_loss", lambda p: lin(T.margin_loss(p, y), c5), [z]),
        ("targeted_margin", lambda p: lin(T.targeted_margin(p, y, t), c5), [z]),
        ("log_mean_exp", lambda p, q: lin(T.log_mean_exp([p, q]), cz), [z, z2]),
    ]


def test_criterion_01_gradients():
    t0 = time.process_time()
    worst, worst_name = 0.0, ""
    for seed in range(5):
        for name, build, arrays in _op_cases(np.random.default_rng(seed)):
            e = grad_check(build, arrays)
            if e > worst:
                worst, worst_name = e, name
        spec = ArchSpec.small_cnn((3, 8, 8), 2, (2, 4, 8))
        rng = np.random.default_rng(seed)
        params = init_model(spec, seed)
        x = rng.uniform(size=(3, 3, 8, 8))
        y = rng.dirichlet(np.ones(2), 3)
        d = rng.uniform(-8 / 255, 8 / 255, x.shape)
        p = bind(params, requires_grad=True)
        T.backward(trades_loss(spec, p, x, y, d, 6.0))
        numeric = T.finite_difference_gradient(
            lambda vals: trades_loss(spec, bind(ModelParams(params.names, vals)), x, y, d, 6.0).item(),
            [v.copy() for v in params.values])
        e = max(rel_err(p[n].grad, g) for n, g in zip(params.names, numeric))
        if e > worst:
            worst, worst_name = e, "trades_loss"
    elapsed = time.process_time() - t0
    ok = worst < 1e-4 and elapsed < 60
    report(1, ok, f"max rel err {worst:.2e} ({worst_name}) over 24 ops + trades_loss x 5 seeds; {elapsed:.1f}s CPU")
    assert ok


# ---------------------------------------------------------------- 2. linear PGD oracle


def test_criterion_02_linear_pgd_oracle():
    worst = {"linf": 0.0, "l2": 0.0}
    for seed in range(20):
        spec = ArchSpec("linear", (3, 4, 4), 2)
        params = init_model(spec, seed)
        rng = np.random.default_rng(seed)
        params.values[1][:] = rng.normal(size=2) * 0.1
        model = Classifier(spec, params)
        x = rng.uniform(0.3, 0.7, (6, 3, 4, 4))  # interior: the image box never binds
        y = rng.integers(0, 2, 6)
        batch = ImageBatch.from_labels(x, y, 2)
        W = params["fc.w"]
        for norm, order, eps in (("linf", 1, 0.02), ("l2", 2, 0.1)):
            cfg = AttackConfig(PerturbationBall(norm, eps), steps=2, init="zero", objective="margin")
            res = AT.pgd(model, batch, cfg)
            z0, z1 = model.logits(x), model.logits(x + res.argmax_delta)
            for i in range(6):
                t = 1 - y[i]
                shift = (z0[i, y[i]] - z0[i, t]) - (z1[i, y[i]] - z1[i, t])
                closed = eps * np.linalg.norm(W[:, y[i]] - W[:, t], order)
                worst[norm] = max(worst[norm], abs(shift - closed))
    ok = max(worst.values()) <= 1e-9
    report(2, ok, f"worst |gap - closed form|: linf {worst['linf']:.1e}, l2 {worst['l2']:.1e} over 20 models")
    assert ok


# ---------------------------------------------------------------- 3. feasibility


def test_criterion_03_feasibility():
    spec = ArchSpec("mlp", (1, 3, 3), 3, (6,))
    model = Classifier(spec, init_model(spec, 0))
    rng = np.random.default_rng(0)
    violations, runs, worst = 0, 0, 0.0
    for r in range(10_000):
        name = AT.ATTACK_NAMES[r % len(AT.ATTACK_NAMES)]
        norm = ("linf", "l2")[(r // len(AT.ATTACK_NAMES)) % 2]
        eps = float(rng.choice([0.0, 1e-3, 0.03, 0.3, 2.0]) if rng.random() < 0.5 else rng.uniform(0, 1.5))
        steps = int(rng.integers(5, 8)) if name.startswith("apgd") else int(rng.integers(1, 4))
        cfg = AT.make_attack(name, eps, norm, steps=steps, restarts=int(rng.integers(1, 3)), seed=r)
        x = rng.uniform(size=(3, 1, 3, 3))
        x[rng.random(x.shape) < 0.2] = rng.choice([0.0, 1.0])  # pixels on the box boundary
        batch = ImageBatch.from_labels(x, rng.integers(0, 3, 3), 3)
        res = AT.run_attack(model, batch, cfg)
        for d in (res.delta, res.argmax_delta):
            flat = d.reshape(len(d), -1)
            size = np.abs(flat).max(1) if norm == "linf" else np.linalg.norm(flat, axis=1)
            worst = max(worst, float((size - eps).max()))
            bad = (size > eps + 1e-9).any() or (x + d < 0).any() or (x + d > 1).any()
            violations += int(bad)
        runs += 1
    ok = violations == 0
    report(3, ok, f"{violations} violations in {runs} runs (5 attacks x 2 norms); worst norm excess {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 4. augmentation labels


def _constant_batch(B, H=16, W=16):
    vals = (np.arange(B) + 1.0) / (B + 1)
    return ImageBatch.from_labels(np.broadcast_to(vals[:, None, None, None], (B, 3, H, W)).copy(), np.arange(B), B)


def _clipped_intervals(size, extent):
    out = set()
    for c in range(extent):
        lo = c - size // 2
        a, b = max(lo, 0), min(lo + size, extent)
        out.add((a, b) if b > a else None)
    return out


def test_criterion_04_augmentation_labels(monkeypatch):
    failures = []
    # CutMix: label weight of each source equals its measured pixel fraction
    for draw in range(1000):
        B = 2 + draw % 5
        b = _constant_batch(B)
        out = A.cutmix(b, RngStream(draw, "accept-cutmix"), length=None)
        for i in range(B):
            for j in range(B):
                if out.soft_labels[i, j] != (out.images[i, 0] == b.images[j, 0, 0, 0]).mean():
                    failures.append(("cutmix", draw))
    # RICAP: weights equal tile-area fractions and sum to one
    for draw in range(1000):
        B = 4 + draw % 4
        b = _constant_batch(B)
        out = A.ricap(b, RngStream(draw, "accept-ricap"))
        for i in range(B):
            for j in range(B):
                if out.soft_labels[i, j] != (out.images[i, 0] == b.images[j, 0, 0, 0]).mean():
                    failures.append(("ricap", draw))
        if np.abs(out.soft_labels.sum(1) - 1).max() > 1e-15:
            failures.append(("ricap-sum", draw))
    # MixUp: output is the labelled convex combination
    rng = np.random.default_rng(0)
    for draw in range(1000):
        B = 2 + draw % 5
        b = ImageBatch.from_labels(rng.uniform(size=(B, 3, 8, 8)), np.arange(B), B)
        out = A.mixup(b, RngStream(draw, "accept-mixup"), alpha=float(rng.uniform(0.1, 2.0)))
        for i in range(B):
            lam = out.soft_labels[i, i]
            others = [j for j in range(B) if j != i and out.soft_labels[i, j] > 0]
            expected = b.images[i] if not others else lam * b.images[i] + (1 - lam) * b.images[others[0]]
            if len(others) > 1 or np.abs(out.images[i] - expected).max() > 1e-15:
                failures.append(("mixup", draw))
    # Cutout: dataset-mean fill inside a clipped window, nothing else touched
    for draw in range(1000):
        images = rng.uniform(size=(3, 3, 16, 16))
        b = ImageBatch.from_labels(images, [0, 1, 0], 2)
        fill = dataset_mean(Dataset(images, np.array([0, 1, 0]), 2, "accept"))
        window = int(rng.integers(1, 24))
        out = A.cutout(b, RngStream(draw, "accept-cutout"), fill, window)
        for i in range(3):
            changed = (out.images[i] != images[i]).any(axis=0)
            ys, xs = np.nonzero(changed)
            rows = (ys.min(), ys.max() + 1) if len(ys) else None
            cols = (xs.min(), xs.max() + 1) if len(xs) else None
            ok = rows in _clipped_intervals(window, 16) and cols in _clipped_intervals(window, 16)
            ok = ok and changed.sum() == (rows[1] - rows[0]) * (cols[1] - cols[0])
            inside = out.images[i][:, changed]
            ok = ok and np.array_equal(inside, np.broadcast_to(fill[:, None], inside.shape))
            if not ok:
                failures.append(("cutout", draw))
    # curated RandAugment: record every op it applies over 10^4 draws
    seen = []
    real = A.apply_primitive

    def spy(image, op, magnitude, g):
        seen.append(op)
        return real(image, op, magnitude, g)

    monkeypatch.setattr(A, "apply_primitive", spy)
    imgs = rng.uniform(size=(5000, 3, 4, 4))
    A.rand_augment(ImageBatch.from_labels(imgs, np.zeros(5000, int), 2), RngStream(0, "accept-ra"), n=2)
    banned = set(seen) & set(A.EXCLUDED_FROM_CURATED)
    ok = not failures and not banned and len(seen) == 10_000
    report(4, ok, f"{len(failures)} label/pixel mismatches over 4 x 1000 draws; curated RandAugment drew "
                  f"{len(seen)} ops, banned ones: {sorted(banned) or 'none'}")
    assert ok


# ---------------------------------------------------------------- 5. EMA


def test_criterion_05_ema_closed_form():
    spec = ArchSpec.small_cnn((3, 8, 8), 2, (2, 4, 8))
    theta0, theta = init_model(spec, 0), init_model(spec, 1)
    errs = {}
    for tau in (0.999, 0.0, 1.0):
        ema = EmaState.start(theta0, tau)
        for _ in range(100):
            ema = ema_update(ema, theta)
        errs[tau] = max(float(np.abs(a - (tau ** 100 * b + (1 - tau ** 100) * c)).max())
                        for a, b, c in zip(ema.params.values, theta0.values, theta.values))
        if tau == 0.0:
            errs[tau] = 0.0 if ema.params.tobytes() == theta.tobytes() else np.inf
        if tau == 1.0:
            errs[tau] = 0.0 if ema.params.tobytes() == theta0.tobytes() else np.inf
    ok = errs[0.999] <= 1e-12 and errs[0.0] == 0 and errs[1.0] == 0
    report(5, ok, f"tau=0.999 max err {errs[0.999]:.1e}; tau=0 exact {errs[0.0] == 0}; tau=1 exact {errs[1.0] == 0}")
    assert ok


# ---------------------------------------------------------------- 6. schedule


def test_criterion_06_schedule():
    bad = [T_ for T_ in range(3, 301) if drop_step(T_) != (2 * T_) // 3
           or [lr_at(s, T_, 1.0) for s in range(T_)] != [1.0] * ((2 * T_) // 3) + [0.1] * (T_ - (2 * T_) // 3)]
    lr = effective_lr(0.1, 512)
    ok = lr == 0.2 and not bad
    report(6, ok, f"effective_lr(0.1, 512) = {lr}; drop step mismatches for T in 3..300: {len(bad)}")
    assert ok


# ---------------------------------------------------------------- desk experiments


def _desk_runs_root(tmp_path_factory) -> Path:
    env = os.environ.get("ROBUSTAUG_ACCEPT_DIR")
    return Path(env) if env else tmp_path_factory.mktemp("desk")


def _train_cached(cfg):
    out = run_dir(cfg)
    if (out / "summary.csv").exists() and (out / "config.yaml").read_text() == cfg.dump():
        return out
    return run_training(cfg)


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = _desk_runs_root(tmp_path_factory)
    base = desk_config().replace(output_dir=str(root))
    runs = {}
    for aug in AUGS:
        for seed in SEEDS:
            cfg = base.replace(name=f"accept-{aug}", seed=seed, augment=[aug])
            runs[aug, seed] = (cfg, _train_cached(cfg))
    return base, runs


def _log(out):
    _, header, rows = read_csv(out / "train_log.csv")
    cols = {h: np.array([float(r[i]) for r in rows]) for i, h in enumerate(header)}
    return cols


def _train_seconds(out):
    return float((out / "timing.log").read_text().split()[1])


@pytest.mark.slow
def test_criterion_07_robust_overfitting(desk):
    _, runs = desk
    gaps, finals, bests = [], [], []
    for seed in SEEDS:
        log = _log(runs["pad_crop", seed][1])
        r = log["robust_val_pgd40"]
        gaps.append(r.max() - r[-1])
        bests.append(r.max())
        finals.append(r[-1])
    seconds = sum(_train_seconds(runs["pad_crop", s][1]) for s in SEEDS)
    mean_gap = 100 * float(np.mean(gaps))
    ok = mean_gap >= 1.5 and seconds <= 30 * 60
    report(7, ok, f"pad_crop mean(best - final) robust = {mean_gap:.2f} pp (per seed "
                  f"{', '.join(f'{100 * g:.2f}' for g in gaps)}); training {seconds / 60:.1f} min for 3 seeds")
    assert ok


@pytest.mark.slow
def test_criterion_08_wa_and_augmentation(desk):
    _, runs = desk
    logs = {k: _log(v[1]) for k, v in runs.items()}
    live = {a: np.array([logs[a, s]["robust_val_pgd40"][-1] for s in SEEDS]) for a in AUGS}
    ema = {a: np.array([logs[a, s]["robust_val_ema"][-1] for s in SEEDS]) for a in AUGS}
    gap = {a: float(np.mean([logs[a, s]["robust_val_pgd40"].max() - logs[a, s]["robust_val_pgd40"][-1]
                             for s in SEEDS])) for a in AUGS}
    a_ok = ema["pad_crop"].mean() >= live["pad_crop"].mean()
    b_ok = gap["cutmix"] < gap["pad_crop"]
    wins = int((ema["cutmix"] >= ema["pad_crop"]).sum())
    c_ok = wins >= 2
    ok = a_ok and b_ok and c_ok
    report(8, ok, f"(a) pad_crop final EMA {100 * ema['pad_crop'].mean():.2f}% vs live "
                  f"{100 * live['pad_crop'].mean():.2f}% [{'ok' if a_ok else 'no'}]; "
                  f"(b) best-final gap cutmix {100 * gap['cutmix']:.2f} pp vs pad_crop {100 * gap['pad_crop']:.2f} pp "
                  f"[{'ok' if b_ok else 'no'}]; (c) cutmix+WA >= pad_crop+WA in {wins}/3 seeds "
                  f"[{'ok' if c_ok else 'no'}]")
    assert ok


def _checkpoint(out, name="final"):
    path = out / f"{_log(out)['step'][-1]:.0f}.ckpt" if name == "final" else out / name
    spec, params, _ = load_checkpoint(path)
    return Classifier(spec, params)


def _test_data(base, limit=None):
    ds, split = base.dataset()
    idx = split.test if len(split.test) else split.val
    idx = idx[:limit] if limit else idx
    return ds.images[idx], ds.labels[idx]


@pytest.mark.slow
def test_criterion_09_cascade_monotone(desk):
    base, runs = desk
    model = _checkpoint(runs["pad_crop", 0][1])
    x, y = _test_data(base, 128)
    rng = np.random.default_rng(9)
    violations, checked = 0, 0
    for trial in range(20):
        def stage():
            name = AT.ATTACK_NAMES[int(rng.integers(len(AT.ATTACK_NAMES)))]
            steps = int(rng.integers(5, 21))
            return AT.make_attack(name, float(rng.choice([4 / 255, 8 / 255, 12 / 255])), "linf", steps=steps,
                                  restarts=1, seed=int(rng.integers(1 << 30)))

        stages = [stage() for _ in range(int(rng.integers(1, 4)))]
        extra = stage()
        pos = int(rng.integers(0, len(stages) + 1))
        longer = stages[:pos] + [extra] + stages[pos:]
        short_res, long_res = AT.cascade(model, x, y, stages), AT.cascade(model, x, y, longer)
        accs = long_res.stage_robust_accuracy
        violations += int(long_res.robust_accuracy > short_res.robust_accuracy)
        violations += int(any(b > a for a, b in zip(accs, accs[1:])))
        violations += int(bool((long_res.robust & ~short_res.robust).any()))
        checked += 1
    ok = violations == 0
    report(9, ok, f"{violations} monotonicity violations over {checked} random cascades (stage inserted at a "
                  f"random position)")
    assert ok


@pytest.mark.slow
def test_criterion_10_diagnostics(desk):
    base, runs = desk
    model = _checkpoint(runs["pad_crop", 0][1])
    x, y = _test_data(base)
    ball = PerturbationBall("linf", 8 / 255)
    origin_ok = True
    for i in range(5):
        g = D.landscape(model, x[i], int(y[i]), ball, n=5, pgd_steps=10, seed=i)
        clean = T.margin_loss(model(T.Tensor(x[i:i + 1])), np.array([y[i]])).data[0]
        origin_ok &= bool(g.origin == clean == g.margins[2, 2])
    radii = [0, 2 / 255, 4 / 255, 8 / 255, 16 / 255, 32 / 255, 64 / 255]
    curve = [a for _, a in D.eps_sweep(model, x, y, radii, steps=20)]
    sweep_ok = all(b <= a for a, b in zip(curve, curve[1:]))
    steps = dict(D.steps_sweep(model, x, y, [100, 400]))
    plateau = abs(steps[100] - steps[400])
    ok = origin_ok and sweep_ok and plateau <= 0.01
    report(10, ok, f"landscape origin exact on 5 examples: {origin_ok}; eps sweep "
                   f"{' >= '.join(f'{100 * a:.1f}' for a in curve)}; |acc(100) - acc(400)| = {100 * plateau:.2f} pp")
    assert ok


@pytest.mark.slow
def test_criterion_11_ensembles(desk):
    base, runs = desk
    x, y = _test_data(base)
    attack = base.eval_attack()
    models = [_checkpoint(runs["pad_crop", s][1], "best.ckpt") for s in SEEDS]
    single = [D.robust_accuracy(m, x, y, attack)[0] for m in models]
    dup = D.ensemble_robust_accuracy([models[0], models[0]], x, y, attack)[0]
    dup_pred = np.array_equal(D.ensemble_predict([models[0], models[0]], x), models[0].logits(x).argmax(1))
    dup_ok = dup == single[0] and dup_pred
    pair_ok, strict = True, 0
    lines = []
    for a, b in itertools.combinations(range(3), 2):
        acc = D.ensemble_robust_accuracy([models[a], models[b]], x, y, attack)[0]
        pair_ok &= acc >= min(single[a], single[b])
        strict += int(acc > max(single[a], single[b]))
        lines.append(f"{a}+{b}: {100 * acc:.2f}")
    ok = dup_ok and pair_ok and strict >= 1
    report(11, ok, f"duplicate ensemble exact: {dup_ok}; singles "
                   f"{', '.join(f'{100 * s:.2f}' for s in single)}; pairs {'; '.join(lines)}; "
                   f"{strict} pair(s) beat both members")
    assert ok


# ---------------------------------------------------------------- 12. determinism


def test_criterion_12_determinism(tmp_path):
    """Every subcommand, run twice with different thread counts, writes identical bytes."""
    base = desk_config().replace(**{"trainer.epochs": 2, "trainer.evals": 2, "data.n": 160, "data.val_size": 48,
                                    "data.test_size": 0, "eval.steps": 5, "diagnostics.examples": 32,
                                    "diagnostics.sweep_steps": 5, "diagnostics.step_counts": [1, 5],
                                    "diagnostics.grid": 5, "diagnostics.taus": [0.0, 0.9],
                                    "diagnostics.augmentations": ["pad_crop"], "name": "det"})
    cfg_path = tmp_path / "det.yaml"
    cfg_path.write_text(base.dump())
    trees = []
    for threads in ("1", "4"):
        root = tmp_path / f"threads{threads}"
        env = {**os.environ, "ROBUSTAUG_THREADS": threads}

        def cli(*args):
            subprocess.run([sys.executable, "-m", "robustaug.cli", *map(str, args)], check=True, env=env,
                           capture_output=True)

        cli("train", cfg_path, "--output-dir", root)
        run = root / "det-0"
        ck = sorted(run.glob("[0-9]*.ckpt"), key=lambda p: int(p.name.split(".")[0]))[-1]
        cli("eval", ck, "--config", cfg_path, "--cascade", "pgd,apgd_ce,mt", "--per-example", "--out",
            root / "eval.csv")
        for kind in ("landscape", "eps-sweep", "steps-sweep"):
            cli("diag", kind, ck, "--config", cfg_path, "--out", root / f"{kind}.csv", "--plot")
        cli("diag", "diff", ck, run / "best.ckpt", "--config", cfg_path, "--out", root / "diff.csv", "--plot")
        cli("diag", "ensemble", ck, run / "best.ckpt", "--config", cfg_path, "--out", root / "ensemble.csv")
        cli("diag", "wa-sweep", "--config", cfg_path, "--out", root / "wa.csv", "--plot")
        cli("repro", "fig2a", "--config", cfg_path, "--seeds", "0,1", "--output-dir", root / "repro",
            "--workers", threads)
        files = {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
                 if p.is_file() and p.suffix in (".csv", ".ckpt", ".svg")}
        trees.append(files)
    differing = [str(k) for k in trees[0] if trees[1].get(k) != trees[0][k]]
    missing = set(trees[0]) ^ set(trees[1])
    ok = not differing and not missing and len(trees[0]) > 20
    report(12, ok, f"{len(trees[0])} CSV/SVG/checkpoint files compared across ROBUSTAUG_THREADS=1 and 4; "
                   f"{len(differing)} differ, {len(missing)} unmatched")
    assert ok
