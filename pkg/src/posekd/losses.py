"""Distillation losses with closed-form gradients.

Every loss returns a :class:`LossOutput` holding the scalar value and the
gradient with respect to the trainee's raw output (probability maps for the
teachers, logits for the student).  Teacher predictions and ground truth
enter as constants; no gradient is ever produced for them.

Reductions are per-joint pixel means averaged over joints, which for equal
channel sizes equals the global element mean.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from posekd.heatmaps import HeatmapSet, binarize

Array = np.ndarray


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights and thresholds for the staged losses.

    alpha0 mixes the second teacher's loss (GT vs first-teacher targets);
    alpha1/alpha2 mix the student's loss in its first/second phase.
    beta_gt binarizes rendered GT heatmaps, beta_teacher binarizes teacher
    probability maps.  Validation is deferred to :meth:`validate` so plans
    built from config files can report violations instead of crashing.
    """

    alpha0: float = 0.5
    alpha1: float = 0.5
    alpha2: float = 0.5
    temperature: float = 1.0
    beta_gt: float = 0.6
    beta_teacher: float = 0.3

    def validate(self) -> list[str]:
        problems = []
        for name in ("alpha0", "alpha1", "alpha2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                problems.append(f"{name}={v} outside [0, 1]")
        if self.temperature <= 0.0:
            problems.append(f"temperature={self.temperature} must be positive")
        for name in ("beta_gt", "beta_teacher"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                problems.append(f"{name}={v} outside [0, 1)")
        return problems


@dataclass
class LossOutput:
    """Scalar loss plus gradient wrt the trainee's raw output."""

    value: float
    grad: Array


def _values(x) -> Array:
    v = x.values if isinstance(x, HeatmapSet) else np.asarray(x, dtype=np.float64)
    if v.ndim != 3:
        raise ValueError(f"expected (K, h, w) heatmaps, got shape {v.shape}")
    return v


def _pair(a, b) -> tuple[Array, Array]:
    va, vb = _values(a), _values(b)
    if va.shape != vb.shape:
        raise ValueError(f"heatmap shape mismatch: {va.shape} vs {vb.shape}")
    return va, vb


def mse_loss(pred, target) -> LossOutput:
    """Mean squared error over all heatmap elements."""
    p, t = _pair(pred, target)
    diff = p - t
    value = float(np.mean(diff * diff))
    return LossOutput(value, 2.0 * diff / diff.size)


def bce_loss(logits, target) -> LossOutput:
    """Pixelwise binary cross-entropy on logits against a {0,1} target.

    Evaluated as mean(softplus(l) - p*l), which is exact and stable for any
    logit magnitude; the gradient is (sigmoid(l) - p) / N.
    """
    l, p = _pair(logits, target)
    if not np.isin(p, (0.0, 1.0)).all():
        raise ValueError("bce target must be binary (0/1)")
    value = float(np.mean(np.logaddexp(0.0, l) - p * l))
    return LossOutput(value, (expit(l) - p) / l.size)


def kd_loss(student_logits, teacher_logits, hard_target, temperature: float = 1.0,
            alpha: float = 0.5) -> LossOutput:
    """Generic distillation loss: (1-a)*CE + a*T^2*KL per joint, joint-mean.

    Softmax runs over the flattened pixels of each joint channel.  The KL
    term compares softened student and teacher distributions in the order
    KL(student || teacher); only the student receives a gradient.
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    s, t = _pair(student_logits, teacher_logits)
    _, hard = _pair(student_logits, hard_target)
    k = s.shape[0]
    value = 0.0
    grad = np.zeros_like(s)
    for j in range(k):
        sj = s[j].ravel()
        tj = t[j].ravel()
        hj = hard[j].ravel()
        log_ps = sj - logsumexp(sj)
        ce = -float(hj @ log_ps)
        d_ce = np.exp(log_ps) * hj.sum() - hj

        log_ys = sj / temperature - logsumexp(sj / temperature)
        log_yt = tj / temperature - logsumexp(tj / temperature)
        ys = np.exp(log_ys)
        delta = log_ys - log_yt
        kl = float(ys @ delta)
        d_kl = temperature * ys * (delta - kl)  # T^2 * KL differentiated wrt s

        value += (1.0 - alpha) * ce + alpha * temperature**2 * kl
        grad[j] = ((1.0 - alpha) * d_ce + alpha * d_kl).reshape(s.shape[1:])
    return LossOutput(value / k, grad / k)


def loss_first_teacher(pred_prob, gt) -> LossOutput:
    """First teacher trains on ground truth alone: plain MSE."""
    return mse_loss(pred_prob, gt)


def loss_second_teacher(pred_prob, gt, first_teacher_prob, alpha0: float) -> LossOutput:
    """Second teacher mixes GT regression with first-teacher regression."""
    a = mse_loss(pred_prob, gt)
    b = mse_loss(pred_prob, first_teacher_prob)
    return LossOutput((1.0 - alpha0) * a.value + alpha0 * b.value,
                      (1.0 - alpha0) * a.grad + alpha0 * b.grad)


def loss_student(s_logits, gt_binary, teacher_bins: list, alpha: float) -> LossOutput:
    """Student BCE against binarized GT mixed with binarized teacher targets.

    With one teacher: (1-a)*bce(gt) + a*bce(teacher).  With two teachers the
    distillation share is split evenly: (1-a)*bce(gt) + a/2 per teacher.
    With none, plain bce(gt) regardless of alpha.
    """
    base = bce_loss(s_logits, gt_binary)
    if not teacher_bins:
        return base
    value = (1.0 - alpha) * base.value
    grad = (1.0 - alpha) * base.grad
    share = alpha / len(teacher_bins)
    for tb in teacher_bins:
        term = bce_loss(s_logits, tb)
        value += share * term.value
        grad = grad + share * term.grad
    return LossOutput(value, grad)


def loss_student_first_phase(s_logits, gt_binary, st_prob, beta_teacher: float,
                             alpha1: float) -> LossOutput:
    """Student's first phase: distill from the mask-aware teacher's maps."""
    tb = binarize(_as_prob_set(st_prob), beta_teacher)
    return loss_student(s_logits, gt_binary, [tb], alpha1)


def loss_student_second_phase(s_logits, gt_binary, pt_prob, beta_teacher: float,
                              alpha2: float) -> LossOutput:
    """Student's second phase: distill from the RGB-only teacher's maps."""
    tb = binarize(_as_prob_set(pt_prob), beta_teacher)
    return loss_student(s_logits, gt_binary, [tb], alpha2)


def mse_via_sigmoid(s_logits, gt_prob, teacher_probs: list, alpha: float) -> LossOutput:
    """MSE-form student loss on sigmoid(logits); the no-binarization control.

    Targets are raw probability maps.  The gradient is chained through the
    sigmoid so it is still taken wrt the logits.
    """
    l = _values(s_logits)
    q = expit(l)
    base = mse_loss(q, gt_prob)
    if not teacher_probs:
        value, grad_q = base.value, base.grad
    else:
        value = (1.0 - alpha) * base.value
        grad_q = (1.0 - alpha) * base.grad
        share = alpha / len(teacher_probs)
        for tp in teacher_probs:
            term = mse_loss(q, tp)
            value += share * term.value
            grad_q = grad_q + share * term.grad
    return LossOutput(value, grad_q * q * (1.0 - q))


def _as_prob_set(x) -> HeatmapSet:
    return x if isinstance(x, HeatmapSet) else HeatmapSet(np.asarray(x, dtype=np.float64), "prob")
