"""Loss values against direct-summation oracles, gradients against FD."""

import math

import numpy as np
import pytest

from posekd.heatmaps import HeatmapSet
from posekd.losses import (
    LossWeights,
    bce_loss,
    kd_loss,
    loss_first_teacher,
    loss_second_teacher,
    loss_student,
    loss_student_first_phase,
    loss_student_second_phase,
    mse_loss,
    mse_via_sigmoid,
)

SHAPE = (2, 4, 3)


# ------------------------------------------------- independent oracles
# Naive per-element loops, written without reusing the library's vector
# expressions, so agreement is evidence rather than tautology.

def oracle_mse(pred, target):
    total = 0.0
    for a, b in zip(pred.ravel(), target.ravel()):
        total += (a - b) ** 2
    return total / pred.size


def oracle_bce(logits, target):
    total = 0.0
    for l, p in zip(logits.ravel(), target.ravel()):
        softplus = max(l, 0.0) + math.log1p(math.exp(-abs(l)))
        total += softplus - p * l
    return total / logits.size


def oracle_softmax(v):
    e = [math.exp(x - max(v)) for x in v]
    s = sum(e)
    return [x / s for x in e]


def oracle_kd(s, t, hard, temperature, alpha):
    k = s.shape[0]
    total = 0.0
    for j in range(k):
        sj, tj, hj = s[j].ravel(), t[j].ravel(), hard[j].ravel()
        ps = oracle_softmax(list(sj))
        ce = -sum(h * math.log(p) for h, p in zip(hj, ps))
        ys = oracle_softmax([x / temperature for x in sj])
        yt = oracle_softmax([x / temperature for x in tj])
        kl = sum(a * (math.log(a) - math.log(b)) for a, b in zip(ys, yt))
        total += (1.0 - alpha) * ce + alpha * temperature * temperature * kl
    return total / k


def oracle_binarize(prob, beta):
    out = np.zeros_like(prob)
    for idx, v in np.ndenumerate(prob):
        out[idx] = 1.0 if v > beta else 0.0
    return out


def rand_binary(rng):
    return (rng.random(SHAPE) > 0.5).astype(np.float64)


def fd_grad(fn, x, step=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        hi, lo = x.copy(), x.copy()
        hi[idx] += step
        lo[idx] -= step
        g[idx] = (fn(hi) - fn(lo)) / (2 * step)
    return g


# ---------------------------------------------------------- value oracles

def test_mse_matches_oracle(rng):
    for _ in range(50):
        p, t = rng.random(SHAPE), rng.random(SHAPE)
        assert abs(mse_loss(p, t).value - oracle_mse(p, t)) <= 1e-10


def test_bce_matches_oracle(rng):
    for _ in range(50):
        l = rng.standard_normal(SHAPE) * 3.0
        p = rand_binary(rng)
        assert abs(bce_loss(l, p).value - oracle_bce(l, p)) <= 1e-10


def test_kd_matches_oracle(rng):
    for _ in range(50):
        s = rng.standard_normal(SHAPE)
        t = rng.standard_normal(SHAPE)
        hard = rand_binary(rng)
        temperature = float(rng.uniform(0.5, 4.0))
        alpha = float(rng.random())
        got = kd_loss(s, t, hard, temperature, alpha).value
        assert abs(got - oracle_kd(s, t, hard, temperature, alpha)) <= 1e-10


def test_second_teacher_matches_oracle(rng):
    for _ in range(50):
        p, gt, ft = rng.random(SHAPE), rng.random(SHAPE), rng.random(SHAPE)
        a0 = float(rng.random())
        want = (1.0 - a0) * oracle_mse(p, gt) + a0 * oracle_mse(p, ft)
        assert abs(loss_second_teacher(p, gt, ft, a0).value - want) <= 1e-10


def test_student_phase_losses_match_composition_oracle(rng):
    for _ in range(50):
        s = rng.standard_normal(SHAPE)
        gt = rand_binary(rng)
        tp = rng.random(SHAPE)
        beta = float(rng.uniform(0.1, 0.9))
        alpha = float(rng.random())
        tb = oracle_binarize(tp, beta)
        want = (1.0 - alpha) * oracle_bce(s, gt) + alpha * oracle_bce(s, tb)
        got1 = loss_student_first_phase(s, gt, tp, beta, alpha).value
        got2 = loss_student_second_phase(s, gt, tp, beta, alpha).value
        assert abs(got1 - want) <= 1e-10
        assert abs(got2 - want) <= 1e-10


def test_dual_teacher_student_splits_share(rng):
    s = rng.standard_normal(SHAPE)
    gt = rand_binary(rng)
    t1 = HeatmapSet(rand_binary(rng), kind="binary")
    t2 = HeatmapSet(rand_binary(rng), kind="binary")
    alpha = 0.6
    got = loss_student(s, gt, [t1, t2], alpha)
    want = ((1.0 - alpha) * oracle_bce(s, gt)
            + 0.3 * oracle_bce(s, t1.values)
            + 0.3 * oracle_bce(s, t2.values))
    assert abs(got.value - want) <= 1e-10


# ----------------------------------------------------------- analytic spots

def test_bce_spot_values():
    assert abs(bce_loss(np.zeros((1, 1, 1)), np.ones((1, 1, 1))).value
               - math.log(2.0)) <= 1e-15
    assert abs(bce_loss(np.full((1, 1, 1), 30.0), np.ones((1, 1, 1))).value) <= 1e-9
    with pytest.raises(ValueError, match="binary"):
        bce_loss(np.zeros(SHAPE), np.full(SHAPE, 0.5))


def test_mse_zero_iff_equal(rng):
    p = rng.random(SHAPE)
    assert mse_loss(p, p).value == 0.0
    assert loss_first_teacher(p, p).value == 0.0
    q = p.copy()
    q[0, 0, 0] += 1e-6
    assert mse_loss(q, p).value > 0.0


def test_kd_spot_values(rng):
    s = rng.standard_normal(SHAPE)
    hard = rand_binary(rng)
    # identical distributions: the KL share vanishes
    assert abs(kd_loss(s, s.copy(), hard, 2.0, 1.0).value) <= 1e-14
    # alpha = 0 ignores the teacher entirely
    t1, t2 = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    assert kd_loss(s, t1, hard, 1.0, 0.0).value == kd_loss(s, t2, hard, 1.0, 0.0).value
    with pytest.raises(ValueError):
        kd_loss(s, t1, hard, temperature=0.0)


def test_losses_are_nonnegative(rng):
    for _ in range(20):
        p, t = rng.random(SHAPE), rng.random(SHAPE)
        assert mse_loss(p, t).value >= 0.0
        l, b = rng.standard_normal(SHAPE), rand_binary(rng)
        assert bce_loss(l, b).value >= 0.0


# ----------------------------------------------------------- affine in alpha

def test_second_teacher_affine_in_alpha(rng):
    p, gt, ft = rng.random(SHAPE), rng.random(SHAPE), rng.random(SHAPE)
    at0 = loss_second_teacher(p, gt, ft, 0.0)
    at1 = loss_second_teacher(p, gt, ft, 1.0)
    for a in (0.0, 0.25, 0.5, 0.75, 1.0):
        mixed = loss_second_teacher(p, gt, ft, a)
        assert mixed.value == (1.0 - a) * at0.value + a * at1.value
        np.testing.assert_array_equal(mixed.grad, (1.0 - a) * at0.grad + a * at1.grad)


def test_student_phase_affine_in_alpha(rng):
    s, gt, tp = rng.standard_normal(SHAPE), rand_binary(rng), rng.random(SHAPE)
    for fn in (loss_student_first_phase, loss_student_second_phase):
        at0 = fn(s, gt, tp, 0.3, 0.0)
        at1 = fn(s, gt, tp, 0.3, 1.0)
        for a in (0.0, 0.25, 0.5, 0.75, 1.0):
            mixed = fn(s, gt, tp, 0.3, a)
            assert mixed.value == (1.0 - a) * at0.value + a * at1.value
            np.testing.assert_array_equal(mixed.grad,
                                          (1.0 - a) * at0.grad + a * at1.grad)


def test_kd_affine_in_alpha_single_joint(rng):
    s = rng.standard_normal((1, 4, 3))
    t = rng.standard_normal((1, 4, 3))
    hard = (rng.random((1, 4, 3)) > 0.5).astype(np.float64)
    at0 = kd_loss(s, t, hard, 1.0, 0.0).value
    at1 = kd_loss(s, t, hard, 1.0, 1.0).value
    for a in (0.0, 0.25, 0.5, 0.75, 1.0):
        assert kd_loss(s, t, hard, 1.0, a).value == (1.0 - a) * at0 + a * at1


def test_dual_student_affine_in_alpha_to_rounding(rng):
    s, gt = rng.standard_normal(SHAPE), rand_binary(rng)
    bins = [HeatmapSet(rand_binary(rng), kind="binary") for _ in range(2)]
    at0 = loss_student(s, gt, bins, 0.0).value
    at1 = loss_student(s, gt, bins, 1.0).value
    for a in (0.25, 0.5, 0.75):
        got = loss_student(s, gt, bins, a).value
        np.testing.assert_allclose(got, (1.0 - a) * at0 + a * at1, rtol=1e-14)


# ------------------------------------------------------------ gradients

def test_mse_gradient_fd(rng):
    p, t = rng.random(SHAPE), rng.random(SHAPE)
    num = fd_grad(lambda x: mse_loss(x, t).value, p)
    np.testing.assert_allclose(mse_loss(p, t).grad, num, atol=1e-9)


def test_bce_gradient_formula_and_fd(rng):
    from scipy.special import expit
    l, p = rng.standard_normal(SHAPE), rand_binary(rng)
    out = bce_loss(l, p)
    np.testing.assert_array_equal(out.grad, (expit(l) - p) / l.size)
    num = fd_grad(lambda x: bce_loss(x, p).value, l)
    np.testing.assert_allclose(out.grad, num, atol=1e-9)


def test_kd_gradient_fd(rng):
    s, t = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    hard = rand_binary(rng)
    out = kd_loss(s, t, hard, 2.0, 0.7)
    num = fd_grad(lambda x: kd_loss(x, t, hard, 2.0, 0.7).value, s)
    np.testing.assert_allclose(out.grad, num, atol=1e-8)


def test_composite_gradients_fd(rng):
    p, gt, ft = rng.random(SHAPE), rng.random(SHAPE), rng.random(SHAPE)
    out = loss_second_teacher(p, gt, ft, 0.4)
    num = fd_grad(lambda x: loss_second_teacher(x, gt, ft, 0.4).value, p)
    np.testing.assert_allclose(out.grad, num, atol=1e-9)

    s, gtb, tp = rng.standard_normal(SHAPE), rand_binary(rng), rng.random(SHAPE)
    out = loss_student_first_phase(s, gtb, tp, 0.3, 0.5)
    num = fd_grad(lambda x: loss_student_first_phase(x, gtb, tp, 0.3, 0.5).value, s)
    np.testing.assert_allclose(out.grad, num, atol=1e-9)


def test_mse_via_sigmoid_gradient_fd(rng):
    s = rng.standard_normal(SHAPE)
    gt, tp = rng.random(SHAPE), rng.random(SHAPE)
    out = mse_via_sigmoid(s, gt, [tp], 0.5)
    num = fd_grad(lambda x: mse_via_sigmoid(x, gt, [tp], 0.5).value, s)
    np.testing.assert_allclose(out.grad, num, atol=1e-9)


# ------------------------------------------------- teachers are constants

def test_teacher_perturbation_within_bucket_changes_nothing(rng):
    # teacher values sit away from the threshold, so a small perturbation
    # leaves the binarized target, hence loss and gradient, untouched
    s, gt = rng.standard_normal(SHAPE), rand_binary(rng)
    tp = np.where(rng.random(SHAPE) > 0.5, 0.9, 0.05)
    base = loss_student_first_phase(s, gt, tp, 0.3, 0.5)
    nudged = loss_student_first_phase(s, gt, tp + 1e-6, 0.3, 0.5)
    assert base.value == nudged.value
    np.testing.assert_array_equal(base.grad, nudged.grad)


def test_gradient_shape_tracks_student_only(rng):
    s, gt, tp = rng.standard_normal(SHAPE), rand_binary(rng), rng.random(SHAPE)
    out = loss_student_first_phase(s, gt, tp, 0.3, 0.5)
    assert out.grad.shape == s.shape


# --------------------------------------------------------------- weights

def test_loss_weights_validation():
    assert LossWeights().validate() == []
    bad = LossWeights(alpha1=1.3, temperature=-1.0, beta_gt=1.0)
    problems = bad.validate()
    assert any("alpha1" in p for p in problems)
    assert any("temperature" in p for p in problems)
    assert any("beta_gt" in p for p in problems)


def test_shape_mismatch_rejected(rng):
    with pytest.raises(ValueError, match="mismatch"):
        mse_loss(rng.random((1, 2, 2)), rng.random((1, 2, 3)))
