from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedsir.losses import (
    KDConfig,
    LAConfig,
    class_priors,
    log_softmax,
    logit_adjustment,
    loss_ce,
    loss_la,
    loss_la_kd,
    softmax,
)
from fedsir.model import MLP, LocalTrainConfig, LossAux, LossKind, local_train, mean_loss

GRAD_RTOL = 1e-4


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


# ---------------------------------------------------------------- forward


def test_zero_params_give_uniform_softmax():
    mlp = MLP(4, 5, 3, 6)
    out = mlp.forward(np.zeros(mlp.num_params), np.ones(4))
    assert np.array_equal(out.logits, np.zeros(6))
    assert np.allclose(softmax(out.logits), 1 / 6)


def test_identity_head_returns_features():
    mlp = MLP(4, 5, 3, 3)
    w1, b1, w2, b2, _, _ = mlp.unpack(mlp.init_params(1))
    params = mlp.pack([w1, b1, w2, b2, np.eye(3), np.zeros(3)])
    out = mlp.forward(params, np.random.default_rng(0).standard_normal((7, 4)))
    assert np.array_equal(out.logits, out.features)
    assert out.features.shape == (7, 3)


def test_forward_shapes_and_finiteness(rng):
    mlp = MLP(6, 8, 4, 5)
    out = mlp.forward(mlp.init_params(3), rng.standard_normal((10, 6)) * 1e3)
    assert out.features.shape == (10, 4) and out.logits.shape == (10, 5)
    assert np.all(np.isfinite(out.logits))
    assert np.all(out.features >= 0)


def test_forward_dimension_mismatch():
    mlp = MLP(6, 8, 4, 5)
    with pytest.raises(ValueError):
        mlp.forward(mlp.init_params(0), np.zeros(5))
    with pytest.raises(ValueError):
        mlp.forward(np.zeros(3), np.zeros(6))


# ---------------------------------------------------------------- priors and margins


def test_priors_balanced():
    assert np.allclose(class_priors(np.array([0, 1, 0, 1]), 2), [0.5, 0.5])


def test_priors_counts_with_absent_class():
    assert np.array_equal(class_priors(np.array([0, 0, 0, 1]), 3), [0.75, 0.25, 0.0])


def test_priors_single_class():
    assert np.array_equal(class_priors(np.array([2, 2]), 4), [0, 0, 1, 0])


def test_uniform_prior_margin_preserves_argmax(rng):
    m = logit_adjustment(np.full(5, 0.2), LAConfig(beta=3.0))
    assert np.allclose(m, m[0])
    logits = rng.standard_normal((20, 5))
    assert np.array_equal(np.argmax(logits + m, axis=1), np.argmax(logits, axis=1))


@pytest.mark.oracle
def test_margin_direct_evaluation():
    m = logit_adjustment(np.array([1.0, 0.0]), LAConfig(beta=1.0, epsilon=1e-8))
    assert m[0] == pytest.approx(np.log(1 + 1e-8), abs=1e-9)
    assert m[1] == pytest.approx(np.log(1e-8), abs=1e-9)


def test_zero_beta_margin_is_zero():
    assert np.array_equal(logit_adjustment(np.array([0.9, 0.1, 0.0]), LAConfig(beta=0.0)), np.zeros(3))


# ---------------------------------------------------------------- losses


def test_ce_uniform_logits_is_log_c():
    loss, _ = loss_ce(np.zeros(7), 3)
    assert loss == pytest.approx(np.log(7), abs=1e-12)


def test_ce_saturated():
    loss, grad = loss_ce(np.array([0.0, 1e6, 0.0]), 1)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(grad, 0.0)


@pytest.mark.oracle
def test_ce_gradient_check(rng):
    logits = rng.standard_normal((4, 6))
    labels = np.array([0, 5, 2, 2])
    _, g = loss_ce(logits, labels)
    fd = central_difference(lambda z: loss_ce(z, labels)[0], logits)
    assert rel_err(g, fd) < GRAD_RTOL


def test_la_with_zero_margin_equals_ce(rng):
    logits = rng.standard_normal((3, 4))
    a, ga = loss_la(logits, np.zeros(4), [1, 2, 3])
    b, gb = loss_ce(logits, [1, 2, 3])
    assert a == b and np.array_equal(ga, gb)


def test_la_uniform_margin_preserves_label_ranking(rng):
    logits = rng.standard_normal(5)
    m = np.full(5, -2.3)
    ce = [loss_ce(logits, y)[0] for y in range(5)]
    la = [loss_la(logits, m, y)[0] for y in range(5)]
    assert np.argmin(ce) == np.argmin(la)
    assert np.allclose(ce, la)


@pytest.mark.oracle
def test_la_gradient_check(rng):
    logits = rng.standard_normal((5, 4))
    m = logit_adjustment(np.array([0.7, 0.2, 0.1, 0.0]), LAConfig())
    labels = np.array([0, 1, 3, 2, 0])
    _, g = loss_la(logits, m, labels)
    fd = central_difference(lambda z: loss_la(z, m, labels)[0], logits)
    assert rel_err(g, fd) < GRAD_RTOL


def test_la_kd_zero_weight_equals_la(rng):
    s, t = rng.standard_normal((2, 3, 5))
    m = rng.standard_normal(5)
    a, ga = loss_la_kd(s, m, t, [0, 1, 2], KDConfig(kd_weight=0.0))
    b, gb = loss_la(s, m, [0, 1, 2])
    assert a == pytest.approx(b, abs=1e-15) and np.allclose(ga, gb, atol=1e-15)


def test_la_kd_kl_vanishes_when_teacher_matches_adjusted_student(rng):
    s = rng.standard_normal((4, 6))
    m = rng.standard_normal(6)
    loss, grad = loss_la_kd(s, m, s + m, [0, 1, 2, 3], KDConfig(temperature=1.0, kd_weight=1.0))
    assert abs(loss) <= 1e-12
    assert np.allclose(grad, 0.0, atol=1e-12)


@pytest.mark.oracle
def test_la_kd_gradient_check(rng):
    s, t = rng.standard_normal((2, 4, 5))
    m = rng.standard_normal(5)
    kd = KDConfig(temperature=2.0, kd_weight=0.5)
    labels = np.array([4, 0, 1, 1])
    _, g = loss_la_kd(s, m, t, labels, kd)
    fd = central_difference(lambda z: loss_la_kd(z, m, t, labels, kd)[0], s)
    assert rel_err(g, fd) < GRAD_RTOL


def test_t2_scaling_multiplies_kl_term(rng):
    s, t = rng.standard_normal((2, 1, 4))
    m = np.zeros(4)
    plain, _ = loss_la_kd(s, m, t, [0], KDConfig(temperature=3.0, kd_weight=1.0))
    scaled, _ = loss_la_kd(s, m, t, [0], KDConfig(temperature=3.0, kd_weight=1.0, scale_by_t2=True))
    assert scaled == pytest.approx(9.0 * plain)


@pytest.mark.parametrize("kwargs", [{"temperature": 0.0}, {"kd_weight": 1.5}])
def test_kd_config_validation(kwargs):
    with pytest.raises(ValueError):
        KDConfig(**kwargs)


@pytest.mark.oracle
def test_network_gradient_check(rng):
    mlp = MLP(5, 7, 4, 3)
    params = mlp.init_params(2) + 0.01 * rng.standard_normal(mlp.num_params)
    x = rng.standard_normal((6, 5))
    y = rng.integers(0, 3, 6)
    teacher = mlp.init_params(9)
    aux = LossAux(margin=rng.standard_normal(3), teacher_params=teacher, kd=KDConfig())
    for kind in LossKind:
        _, g = mlp.loss_and_grad(params, x, _loss_fn(kind, y, aux, mlp.logits(teacher, x)))
        fd = central_difference(lambda p: mean_loss(mlp, p, x, y, kind, aux), params)
        assert rel_err(g, fd) < GRAD_RTOL, kind


def _loss_fn(kind, y, aux, teacher_logits):
    if kind is LossKind.CE:
        return lambda z: loss_ce(z, y)
    if kind is LossKind.LA:
        return lambda z: loss_la(z, aux.margin, y)
    return lambda z: loss_la_kd(z, aux.margin, teacher_logits, y, aux.kd)


# ---------------------------------------------------------------- local_train


def _blobs(seed=0, n=200):
    r = np.random.default_rng(seed)
    y = r.integers(0, 2, n)
    x = r.standard_normal((n, 4)) + np.where(y[:, None] == 1, 3.0, -3.0)
    return x, y


def test_zero_learning_rate_returns_input():
    mlp = MLP(4, 8, 4, 2)
    p = mlp.init_params(0)
    x, y = _blobs()
    out = local_train(mlp, p, x, y, LocalTrainConfig(learning_rate=0.0))
    assert np.array_equal(out, p) and out is not p


@pytest.mark.oracle
def test_one_epoch_reduces_training_loss():
    mlp = MLP(4, 8, 4, 2)
    p = mlp.init_params(0)
    x, y = _blobs()
    before = mean_loss(mlp, p, x, y)
    after = mean_loss(mlp, local_train(mlp, p, x, y, LocalTrainConfig(learning_rate=1e-2)), x, y)
    assert after < before


def test_local_train_is_deterministic():
    mlp = MLP(4, 8, 4, 2)
    x, y = _blobs()
    cfg = LocalTrainConfig(epochs=2, learning_rate=1e-2, rng_seed=5)
    a = local_train(mlp, mlp.init_params(1), x, y, cfg)
    b = local_train(mlp, mlp.init_params(1), x, y, cfg)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, local_train(mlp, mlp.init_params(1), x, y, replace(cfg, rng_seed=6)))


def test_la_kd_requires_teacher():
    mlp = MLP(4, 8, 4, 2)
    x, y = _blobs()
    with pytest.raises(ValueError):
        local_train(mlp, mlp.init_params(0), x, y, LocalTrainConfig(), LossKind.LA_KD, LossAux(margin=np.zeros(2)))


@pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"learning_rate": -1.0}, {"optimizer": "rmsprop"}])
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        LocalTrainConfig(**kwargs)


# ---------------------------------------------------------------- invariants

small_logits = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s))


@pytest.mark.invariant
@given(small_logits, st.integers(2, 8), st.integers(1, 5))
def test_every_loss_gradient_matches_finite_differences(r, c, b):
    s = r.standard_normal((b, c)) * 2
    t = r.standard_normal((b, c)) * 2
    m = logit_adjustment(r.dirichlet(np.ones(c)), LAConfig(beta=r.uniform(0, 2)))
    y = r.integers(0, c, b)
    kd = KDConfig(temperature=r.uniform(0.5, 4.0), kd_weight=r.uniform(0, 1))
    for fn in (lambda z: loss_ce(z, y), lambda z: loss_la(z, m, y), lambda z: loss_la_kd(z, m, t, y, kd)):
        _, g = fn(s)
        assert rel_err(g, central_difference(lambda z: fn(z)[0], s)) < GRAD_RTOL


@pytest.mark.invariant
@given(small_logits, st.floats(1e-3, 1e4))
def test_softmax_on_simplex_without_overflow(r, scale):
    z = r.uniform(-1, 1, (5, 7)) * scale
    p = softmax(z)
    assert np.all(np.isfinite(p)) and np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(np.isfinite(log_softmax(z)))


@pytest.mark.invariant
@given(small_logits, st.floats(-1e3, 1e3))
def test_softmax_shift_invariance(r, shift):
    z = r.standard_normal((3, 6))
    assert np.allclose(softmax(z + shift), softmax(z), atol=1e-12)


@pytest.mark.invariant
@given(small_logits, st.integers(2, 8))
def test_la_kd_reductions(r, c):
    s = r.standard_normal((4, c))
    m = r.standard_normal(c)
    y = r.integers(0, c, 4)
    a, _ = loss_la_kd(s, m, r.standard_normal((4, c)), y, KDConfig(kd_weight=0.0, temperature=r.uniform(0.5, 3)))
    assert a == pytest.approx(loss_la(s, m, y)[0], abs=1e-12)
    kl, _ = loss_la_kd(s, m, s + m, y, KDConfig(kd_weight=1.0, temperature=1.0))
    assert abs(kl) <= 1e-12


@pytest.mark.invariant
@given(small_logits, st.sampled_from(list(LossKind)))
def test_zero_weight_decay_is_plain_gradient_step(r, kind):
    mlp = MLP(3, 5, 4, 3)
    params = mlp.init_params(int(r.integers(1000)))
    x = r.standard_normal((8, 3))
    y = r.integers(0, 3, 8)
    aux = LossAux(margin=r.standard_normal(3), teacher_params=mlp.init_params(7), kd=KDConfig())
    lr = float(r.uniform(1e-3, 1e-1))
    cfg = LocalTrainConfig(epochs=1, learning_rate=lr, weight_decay=0.0, batch_size=8, optimizer="sgd")
    out = local_train(mlp, params, x, y, cfg, kind, aux)
    teacher = mlp.logits(aux.teacher_params, x)
    # one full batch, so the shuffle only reorders the sum inside the gradient
    _, g = mlp.loss_and_grad(params, x, _loss_fn(kind, y, aux, teacher))
    assert np.allclose(out, params - lr * g, rtol=0, atol=1e-12)
