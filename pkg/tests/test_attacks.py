from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robustaug import attacks as AT
from robustaug import tensor as T
from robustaug.attacks import AttackConfig, PerturbationBall
from robustaug.augment import ImageBatch
from robustaug.errors import ValidationError
from robustaug.models import ArchSpec, Classifier, init_model


def linear_model(seed, K=2, shape=(1, 4, 4)):
    spec = ArchSpec("linear", shape, K)
    p = init_model(spec, seed)
    p.values[1][:] = np.random.default_rng(seed).normal(size=K) * 0.1
    return Classifier(spec, p)


def mlp(seed=0, K=3, shape=(2, 4, 4)):
    spec = ArchSpec("mlp", shape, K, (12,))
    return Classifier(spec, init_model(spec, seed))


def batch_for(model, n, seed=0, lo=0.0, hi=1.0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(lo, hi, size=(n, *model.spec.input_shape))
    y = rng.integers(0, model.num_classes, n)
    return ImageBatch.from_labels(x, y, model.num_classes)


def feasible(delta, x, ball):
    return ball.contains(delta).all() and (x + delta >= -1e-12).all() and (x + delta <= 1 + 1e-12).all()


# ---------------------------------------------------------------- projection


def test_projection_examples():
    assert np.allclose(AT.project(np.array([[3.0, 4.0]]), PerturbationBall("l2", 1.0)), [[0.6, 0.8]], atol=1e-15)
    e = 8 / 255
    assert np.array_equal(AT.project(np.array([[0.2, -0.5]]), PerturbationBall("linf", e)), [[e, -e]])
    inside = np.array([[0.01, -0.02]])
    assert np.array_equal(AT.project(inside, PerturbationBall("linf", e)), inside)
    assert np.array_equal(AT.project(inside, PerturbationBall("l2", 1.0)), inside)


def test_image_clamp_follows_ball():
    x = np.array([[0.99, 0.0]])
    out = AT.project(np.array([[0.5, -0.5]]), PerturbationBall("linf", 0.1), x)
    assert np.allclose(out, [[0.01, 0.0]], atol=1e-15)


@given(st.sampled_from(["linf", "l2"]), st.floats(0, 2), st.integers(0, 2**31))
def test_projection_is_feasible_and_idempotent(norm, eps, seed):
    rng = np.random.default_rng(seed)
    ball = PerturbationBall(norm, eps)
    x = rng.uniform(size=(3, 5))
    d = AT.project(rng.normal(scale=2, size=(3, 5)), ball, x)
    assert feasible(d, x, ball)
    assert np.allclose(AT.project(d, ball, x), d, atol=1e-15)


def test_ball_validation():
    with pytest.raises(ValidationError):
        PerturbationBall("l1", 0.1)
    with pytest.raises(ValidationError):
        PerturbationBall("linf", -0.1)


def test_config_validation():
    with pytest.raises(ValidationError):
        AttackConfig(steps=0)
    with pytest.raises(ValidationError):
        AttackConfig(objective="accuracy")
    with pytest.raises(ValidationError):
        AttackConfig(optimizer="adaptive", steps=4)
    with pytest.raises(ValidationError):
        AT.make_attack("fab")
    assert AttackConfig(PerturbationBall("linf", 0.1), steps=4).alpha == pytest.approx(2.5 * 0.1 / 4)


def test_named_attacks():
    assert AT.make_attack("pgd").steps == 40
    adam = AT.make_attack("pgd_adam")
    assert [AT.schedule_value(adam.lr_schedule, k) for k in (0, 19, 20, 29, 30, 39)] == [0.1, 0.1, 0.01, 0.01, 0.001, 0.001]
    assert (AT.make_attack("apgd_ce").steps, AT.make_attack("apgd_ce").restarts) == (100, 5)
    assert AT.make_attack("apgd_margin").objective == "margin"
    assert (AT.make_attack("mt").steps, AT.make_attack("mt").restarts) == (200, 10)


def test_train_adam_schedule():
    s = AT.train_adam_schedule(10)
    assert [AT.schedule_value(s, k) for k in range(10)] == [0.1] * 5 + [0.01] * 5


# ---------------------------------------------------------------- linear oracles


@pytest.mark.parametrize("norm,order", [("linf", 1), ("l2", 2)])
@pytest.mark.parametrize("seed", range(5))
def test_pgd_reaches_linear_worst_case(norm, order, seed):
    m = linear_model(seed)
    b = batch_for(m, 4, seed, 0.3, 0.7)
    eps = 0.02 if norm == "linf" else 0.1
    cfg = AttackConfig(PerturbationBall(norm, eps), steps=2, init="zero", objective="margin")
    res = AT.pgd(m, b, cfg)
    W = m.params["fc.w"]
    y = b.hard_labels
    for i in range(4):
        t = 1 - y[i]
        diff = W[:, y[i]] - W[:, t]
        z0, z1 = m.logits(b.images[i:i + 1])[0], m.logits(b.images[i:i + 1] + res.argmax_delta[i:i + 1])[0]
        shift = (z0[y[i]] - z0[t]) - (z1[y[i]] - z1[t])
        assert abs(shift - eps * np.linalg.norm(diff, order)) < 1e-9


def test_single_step_zero_init_is_fgsm():
    m = mlp()
    b = batch_for(m, 5, 1, 0.2, 0.8)
    cfg = AttackConfig(PerturbationBall("linf", 0.03), steps=1, step_size=0.01, init="zero")
    res = AT.pgd(m, b, cfg)
    d = T.Tensor(np.zeros_like(b.images), requires_grad=True)
    T.backward(T.softmax_cross_entropy(m(T.add(T.Tensor(b.images), d)), b.soft_labels, "sum"))
    fgsm = 0.01 * np.sign(d.grad)
    # the candidate after the step is evaluated, and best-over-trajectory keeps it when it helps
    final = res.trace[0, -1]
    assert np.isfinite(final).all()
    improved = final >= res.trace[0, 0]
    assert np.allclose(res.argmax_delta[improved], fgsm[improved], atol=1e-15, rtol=0)


def test_multitargeted_matches_best_linear_target():
    m = linear_model(3, K=4)
    b = batch_for(m, 6, 3, 0.3, 0.7)
    eps = 0.02
    res = AT.multitargeted(m, b, PerturbationBall("linf", eps), restarts=3, steps=2, step_size=eps, init="zero")
    W = m.params["fc.w"]
    z = m.logits(b.images)
    for i, yi in enumerate(b.hard_labels):
        best = max(z[i, t] - z[i, yi] + eps * np.abs(W[:, t] - W[:, yi]).sum() for t in range(4) if t != yi)
        assert abs(res.objective[i] - best) < 1e-9
    assert np.array_equal(res.success, res.objective > 0)


def test_multitargeted_binary_is_single_target_margin():
    m = linear_model(1)
    b = batch_for(m, 4, 1, 0.3, 0.7)
    ball = PerturbationBall("linf", 0.02)
    mt = AT.multitargeted(m, b, ball, restarts=1, steps=3, init="zero")
    cfg = AttackConfig(ball, 3, None, 1, "zero", "margin")
    pgd = AT.pgd(m, b, cfg)
    assert np.array_equal(mt.argmax_delta, pgd.argmax_delta)


# ---------------------------------------------------------------- trajectory tracking


@pytest.mark.parametrize("name", AT.ATTACK_NAMES)
def test_reported_objective_is_trace_max(name):
    m = mlp(2)
    b = batch_for(m, 6, 2)
    cfg = AT.make_attack(name, eps=0.1, steps=6, restarts=2)
    res = AT.run_attack(m, b, cfg)
    assert np.array_equal(res.objective, np.nanmax(res.trace.reshape(-1, 6), axis=0))
    assert feasible(res.delta, b.images, cfg.ball) and feasible(res.argmax_delta, b.images, cfg.ball)


def test_zero_radius_returns_clean_loss():
    m = mlp(0)
    b = batch_for(m, 5)
    for opt in ("sign_gd", "adam", "adaptive"):
        res = AT.run_attack(m, b, AttackConfig(PerturbationBall("linf", 0.0), steps=5, optimizer=opt))
        assert (res.delta == 0).all()
        clean = T.softmax_cross_entropy(m(T.Tensor(b.images)), b.soft_labels, "none").data
        assert np.allclose(res.objective, clean, atol=1e-15)


def test_success_means_misclassified_by_delta():
    m = mlp(4)
    b = batch_for(m, 40, 4)
    res = AT.pgd(m, b, AttackConfig(PerturbationBall("linf", 0.3), steps=5))
    pred = m.logits(b.images + res.delta).argmax(1)
    assert np.array_equal(res.success, pred != b.hard_labels)


def test_adam_never_worse_than_start():
    wins = 0
    for seed in range(40):
        m = mlp(seed)
        b = batch_for(m, 1, seed)
        cfg = AttackConfig(PerturbationBall("linf", 0.05), steps=10, objective="kl_to_label", optimizer="adam",
                           seed=seed)
        res = AT.pgd_adam(m, b, cfg)
        wins += res.objective[0] >= res.trace[0, 0, 0]
    assert wins == 40


def test_adaptive_alpha_never_increases_and_beats_pgd_on_average():
    gaps = []
    for seed in range(50):
        m = mlp(seed)
        b = batch_for(m, 1, seed)
        ball = PerturbationBall("linf", 0.05)
        ap = AT.adaptive_pgd(m, b, AttackConfig(ball, 20, seed=seed))
        hist = ap.extras["step_sizes"][0][:, 0]
        assert (np.diff(hist) <= 0).all() and hist[0] == 2 * 0.05
        pg = AT.pgd(m, b, AttackConfig(ball, 20, seed=seed))
        gaps.append(ap.objective[0] - pg.objective[0])
    assert np.mean(gaps) >= 0


def test_kl_to_clean_needs_random_init():
    m = mlp(1)
    b = batch_for(m, 4)
    ball = PerturbationBall("linf", 0.05)
    stuck = AT.pgd(m, b, AttackConfig(ball, steps=3, init="zero", objective="kl_to_clean"))
    assert (stuck.objective == 0).all()  # zero gradient at the clean point
    moved = AT.pgd(m, b, AttackConfig(ball, steps=3, objective="kl_to_clean"))
    assert (moved.objective > 0).all()


# ---------------------------------------------------------------- early stop, determinism, chunking


@pytest.mark.parametrize("name", AT.ATTACK_NAMES)
def test_early_stop_keeps_success_flags(name):
    m = mlp(5)
    b = batch_for(m, 24, 5)
    cfg = AT.make_attack(name, eps=0.08, steps=8, restarts=3, seed=1)
    full = AT.run_attack(m, b, cfg)
    fast = AT.run_attack(m, b, replace(cfg, early_stop=True))
    assert np.array_equal(full.success, fast.success)


def test_attacks_are_bit_reproducible():
    m = mlp(6)
    b = batch_for(m, 10, 6)
    cfg = AT.make_attack("apgd_ce", eps=0.1, steps=10, restarts=2, seed=3)
    a, c = AT.run_attack(m, b, cfg), AT.run_attack(m, b, cfg)
    assert a.delta.tobytes() == c.delta.tobytes() and a.trace.tobytes() == c.trace.tobytes()


def test_attack_examples_independent_of_chunking():
    m = mlp(7)
    b = batch_for(m, 37, 7)
    cfg = AT.make_attack("pgd", eps=0.1, steps=4, seed=2)
    s1, d1, o1 = AT.attack_examples(m, b.images, b.hard_labels, cfg, chunk=37)
    s2, d2, o2 = AT.attack_examples(m, b.images, b.hard_labels, cfg, chunk=5)
    assert np.array_equal(s1, s2) and d1.tobytes() == d2.tobytes() and o1.tobytes() == o2.tobytes()


def test_attack_examples_independent_of_workers():
    m = mlp(8)
    b = batch_for(m, 20, 8)
    cfg = AT.make_attack("pgd", eps=0.1, steps=3, seed=2)
    one = AT.attack_examples(m, b.images, b.hard_labels, cfg, chunk=8, workers=1)
    two = AT.attack_examples(m, b.images, b.hard_labels, cfg, chunk=8, workers=2)
    assert all(a.tobytes() == c.tobytes() for a, c in zip(one, two))


def test_empty_batch_rejected():
    m = mlp()
    with pytest.raises(ValidationError):
        AT.run_attack(m, ImageBatch(np.zeros((0, 2, 4, 4)), np.zeros((0, 3))), AttackConfig())


# ---------------------------------------------------------------- cascade


def test_cascade_single_stage_and_order():
    m = mlp(9)
    b = batch_for(m, 30, 9)
    pgd = AT.make_attack("pgd", eps=0.05, steps=5)
    mt = AT.make_attack("mt", eps=0.05, steps=5, restarts=2)
    single = AT.cascade(m, b.images, b.hard_labels, [pgd])
    s, _, _ = AT.attack_examples(m, b.images, b.hard_labels, replace(pgd, early_stop=True))
    assert np.array_equal(single.robust, single.clean_correct & ~s)
    ab = AT.cascade(m, b.images, b.hard_labels, [pgd, mt])
    ba = AT.cascade(m, b.images, b.hard_labels, [mt, pgd])
    assert np.array_equal(ab.robust, ba.robust)
    assert ab.stage_robust_accuracy == sorted(ab.stage_robust_accuracy, reverse=True)
    with pytest.raises(ValidationError):
        AT.cascade(m, b.images, b.hard_labels, [])
