"""Losses for supervised and unsupervised adversarial fine-tuning.

All divergences are over softmax probabilities with temperature 1 and are
averaged over the batch. ``x_hat`` arguments are always treated as data:
the inner maximizer is fixed when the outer loss is differentiated.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import forward, watch_params

METHODS = ("pgd_at", "trades", "trades_u", "tgra")
SUPERVISED = ("pgd_at", "trades")
PROB_FLOOR = 1e-12
_LOG_FLOOR = float(np.log(PROB_FLOOR))


class LabelError(ValueError):
    """Labels missing for a supervised method or supplied to an unsupervised one."""


class VerificationError(AssertionError):
    """A gradient decomposition failed its residual check."""


@dataclass(frozen=True)
class MethodConfig:
    method: str = "tgra"
    beta: float = 6.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.beta >= 0:
            raise ValueError("beta must be nonnegative")

    @property
    def supervised(self):
        return self.method in SUPERVISED

    def check_labels(self, y):
        if self.supervised and y is None:
            raise LabelError(f"{self.method} needs labels")
        if not self.supervised and y is not None:
            raise LabelError(f"{self.method} is unsupervised; labels must not be supplied")


# ---------------------------------------------------------------------------
# array-level reference functions


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def kl_divergence(p, q):
    """``sum p * ln(p / q)`` over the last axis, with ``0 ln 0 = 0`` and q floored."""
    p = np.asarray(p, dtype=np.float64)
    q = np.maximum(np.asarray(q, dtype=np.float64), PROB_FLOOR)
    safe_p = np.where(p > 0, p, 1.0)
    return np.sum(np.where(p > 0, p * (np.log(safe_p) - np.log(q)), 0.0), axis=-1)


def cross_entropy(z, y):
    """``-log_softmax(z)[y]`` for a single logit vector."""
    z = np.asarray(z, dtype=np.float64)
    if not 0 <= y < z.shape[-1]:
        raise IndexError(f"label {y} out of range for {z.shape[-1]} classes")
    shifted = z - z.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[y])


# ---------------------------------------------------------------------------
# tensor-level losses (batch means)


def ce_loss(logits, y):
    y = np.asarray(y)
    if y.min(initial=0) < 0 or y.max(initial=0) >= logits.shape[1]:
        raise IndexError("label out of range")
    return T.neg(T.mean(T.pick(T.log_softmax(logits), y)))


def kl_loss(ref, logits):
    """Mean KL(ref || softmax(logits)).

    ``ref`` is either a logits tensor (differentiated through) or a fixed
    probability array.
    """
    log_q = T.clamp_min(T.log_softmax(logits), _LOG_FLOOR)
    if isinstance(ref, T.Tensor):
        log_p = T.log_softmax(ref)
        p = T.exp(log_p)
        per = T.sum(T.mul(p, T.sub(log_p, log_q)), axis=1)
    else:
        p = np.asarray(ref, dtype=np.float64)
        neg_ent = np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=1)
        per = T.sub(neg_ent, T.sum(T.mul(p, log_q), axis=1))
    return T.mean(per)


def _student(student, x, params, bn_mode):
    return forward(student, x, bn_mode, params)


def teacher_probs(teacher, x):
    """q(x): the teacher's clean predictive distribution, detached."""
    return softmax(forward(teacher, x).values)


def r_self(student, x, x_hat, params=None, bn_mode="frozen_eval"):
    """KL(p(x) || p(x_hat)), differentiable through both branches."""
    return kl_loss(_student(student, x, params, bn_mode), _student(student, x_hat, params, bn_mode))


def r_teach(teacher, student, x, x_hat, params=None, bn_mode="frozen_eval", q=None):
    """KL(q(x) || p(x_hat)) with the teacher branch detached."""
    if q is None:
        q = teacher_probs(teacher, x)
    return kl_loss(q, _student(student, x_hat, params, bn_mode))


def loss_terms(cfg, teacher, student, x, x_hat, y=None, params=None, bn_mode="frozen_eval", q=None):
    """(accuracy term, robustness term) of the method's outer objective."""
    cfg.check_labels(y)
    x_hat = T.detach(x_hat)
    clean = _student(student, x, params, bn_mode)
    if cfg.method == "pgd_at":
        return ce_loss(clean, y), ce_loss(_student(student, x_hat, params, bn_mode), y)
    if cfg.method == "trades":
        return ce_loss(clean, y), kl_loss(clean, _student(student, x_hat, params, bn_mode))
    if q is None:
        q = teacher_probs(teacher, x)
    acc = kl_loss(q, clean)
    if cfg.method == "trades_u":
        return acc, kl_loss(clean, _student(student, x_hat, params, bn_mode))
    return acc, kl_loss(q, _student(student, x_hat, params, bn_mode))


def composite_loss(cfg, teacher, student, x, x_hat, y=None, params=None, bn_mode="frozen_eval", q=None):
    acc, rob = loss_terms(cfg, teacher, student, x, x_hat, y, params, bn_mode, q)
    return T.add(acc, T.mul(rob, cfg.beta))


# ---------------------------------------------------------------------------
# gradient decompositions


@dataclass
class GradDecomposition:
    reference_side: dict
    adversarial_side: dict
    total: dict

    def residual(self):
        """max-abs of total - (reference + adversarial) over all coordinates."""
        return max(
            float(np.max(np.abs(self.total[k] - self.reference_side[k] - self.adversarial_side[k]), initial=0.0))
            for k in self.total
        )

    def reference_max_abs(self):
        return max(float(np.max(np.abs(g), initial=0.0)) for g in self.reference_side.values())


def _grad_of(student, build):
    with T.Tape() as tape:
        params = watch_params(tape, student)
        loss = build(params)
    return tape.backprop(loss, params)


def grad_decompose_self(student, x, x_hat, tol=1e-6):
    """Split the R_self gradient into reference- and adversarial-side parts."""
    x_hat = T.detach(x_hat)

    def branches(params, detach_ref, detach_adv):
        ref = _student(student, x, params, "frozen_eval")
        adv = _student(student, x_hat, params, "frozen_eval")
        if detach_ref:
            ref = T.detach(ref)
        if detach_adv:
            adv = T.detach(adv)
        return kl_loss(ref, adv)

    dec = GradDecomposition(
        reference_side=_grad_of(student, lambda p: branches(p, False, True)),
        adversarial_side=_grad_of(student, lambda p: branches(p, True, False)),
        total=_grad_of(student, lambda p: branches(p, False, False)),
    )
    res = dec.residual()
    if res > tol:
        raise VerificationError(f"R_self decomposition residual {res:.3e} exceeds {tol:.0e}")
    return dec


def grad_decompose_teach(teacher, student, x, x_hat):
    """R_teach gradient; the reference side must vanish identically."""
    x_hat = T.detach(x_hat)
    q_logits = forward(teacher, x)

    def build(params, detach_adv):
        adv = _student(student, x_hat, params, "frozen_eval")
        if detach_adv:
            adv = T.detach(adv)
        return kl_loss(q_logits, adv)

    total = _grad_of(student, lambda p: build(p, False))
    dec = GradDecomposition(
        reference_side=_grad_of(student, lambda p: build(p, True)),
        adversarial_side={k: v.copy() for k, v in total.items()},
        total=total,
    )
    if dec.reference_max_abs() != 0.0:
        raise VerificationError("R_teach reference-side gradient is nonzero")
    return dec
