"""Supervised and unsupervised loss terms with exact gradients.

Per-sample losses accept a single probability vector ``[m]`` or a batch
``[B x m]`` and return a scalar or ``[B]`` array respectively. Each has a
``*_grad`` companion giving the derivative w.r.t. the probabilities (same
shape as the input); chain through :func:`ifssl.netcore.softmax_backward`
to reach the logits. Every log uses probabilities clamped at ``EPS``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ifssl.errors import ConfigurationError, InputError
from ifssl.netcore import softmax, softmax_backward

EPS = 1e-12

UNSUPERVISED_TERMS = ("meanteacher", "entropy", "pushaway", "none")
CONSISTENCY_KINDS = ("mse", "kl")


@dataclass(frozen=True)
class LossWeights:
    consistency_max: float = 10.0
    entropy_min_w: float = 1.0
    entropy_balance_w: float = 1.0
    push_away_c: float = 1.0
    ramp_epochs: int = 5

    def __post_init__(self):
        for name in ("consistency_max", "entropy_min_w", "entropy_balance_w", "push_away_c"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigurationError("must be finite and >= 0", name)
        if self.push_away_c <= 0:
            raise ConfigurationError("must be > 0", "push_away_c")
        if self.ramp_epochs < 0:
            raise ConfigurationError("must be >= 0", "ramp_epochs")


def _log(p):
    return np.log(np.maximum(p, EPS))


def _dlog(p):
    # derivative of log(max(p, EPS)); zero on the clamped branch
    return np.where(p > EPS, 1.0 / np.maximum(p, EPS), 0.0)


def _as_probs(probs):
    p = np.asarray(probs, dtype=float)
    if p.ndim not in (1, 2):
        raise InputError(f"expected [m] or [B x m] probabilities, got shape {p.shape}")
    return p


def _labels_for(p, label):
    m = p.shape[-1]
    lab = np.asarray(label)
    if not np.issubdtype(lab.dtype, np.integer):
        raise InputError(f"label must be an integer class index, got {label!r}")
    if np.any(lab < 0) or np.any(lab >= m):
        raise InputError(f"label {label!r} out of range for {m} classes")
    if p.ndim == 2 and lab.shape != (p.shape[0],):
        raise InputError(f"need one label per row, got {lab.shape} for {p.shape[0]} rows")
    return lab


def _pick(p, lab):
    if p.ndim == 1:
        return p[lab]
    return p[np.arange(p.shape[0]), lab]


def _onehot_like(p, lab):
    out = np.zeros_like(p)
    if p.ndim == 1:
        out[lab] = 1.0
    else:
        out[np.arange(p.shape[0]), lab] = 1.0
    return out


def nll_loss(probs, label):
    """``-log p[label]``."""
    p = _as_probs(probs)
    lab = _labels_for(p, label)
    return -_log(_pick(p, lab))


def nll_grad(probs, label):
    p = _as_probs(probs)
    lab = _labels_for(p, label)
    return -_onehot_like(p, lab) * _dlog(p)


def negated_nll_loss(probs, label, c: float = 1.0):
    """Negative-weight reweighting, ``-c * NLL``.

    Its gradient w.r.t. the logits is ``-c * (p - onehot)``, which goes to
    zero as the prediction approaches the (wrong) label.
    """
    if c <= 0:
        raise ConfigurationError("c must be > 0", "push_away_c")
    return -c * nll_loss(probs, label)


def negated_nll_grad(probs, label, c: float = 1.0):
    return -c * nll_grad(probs, label)


def push_away_loss(probs, label, c: float = 1.0):
    """Mean NLL over the ``m - 1`` classes other than ``label``, times ``c``."""
    p = _as_probs(probs)
    m = p.shape[-1]
    if m < 2:
        raise ConfigurationError("push-away loss needs at least 2 classes")
    if c <= 0:
        raise ConfigurationError("c must be > 0", "push_away_c")
    lab = _labels_for(p, label)
    others = 1.0 - _onehot_like(p, lab)
    return c * np.sum(-_log(p) * others, axis=-1) / (m - 1)


def push_away_grad(probs, label, c: float = 1.0):
    p = _as_probs(probs)
    m = p.shape[-1]
    if m < 2:
        raise ConfigurationError("push-away loss needs at least 2 classes")
    lab = _labels_for(p, label)
    others = 1.0 - _onehot_like(p, lab)
    return -c * others * _dlog(p) / (m - 1)


def entropy_min_loss(probs):
    """Shannon entropy of each prediction."""
    p = _as_probs(probs)
    return -np.sum(p * _log(p), axis=-1)


def entropy_min_grad(probs):
    p = _as_probs(probs)
    return -(_log(p) + p * _dlog(p))


def entropy_balance_loss(batch_probs) -> float:
    """``log m - H(mean prediction)``; zero when the batch mean is uniform."""
    p = np.asarray(batch_probs, dtype=float)
    if p.ndim != 2 or p.shape[0] == 0:
        raise InputError("entropy balance needs a non-empty [B x m] batch")
    m = p.shape[1]
    return float(math.log(m) - entropy_min_loss(p.mean(axis=0)))


def entropy_balance_grad(batch_probs) -> np.ndarray:
    p = np.asarray(batch_probs, dtype=float)
    if p.ndim != 2 or p.shape[0] == 0:
        raise InputError("entropy balance needs a non-empty [B x m] batch")
    mean = p.mean(axis=0)
    g = -entropy_min_grad(mean) / p.shape[0]
    return np.broadcast_to(g, p.shape).copy()


def _check_pair(a, b):
    a = _as_probs(a)
    b = _as_probs(b)
    if a.shape != b.shape:
        raise InputError(f"width mismatch: {a.shape} vs {b.shape}")
    return a, b


def consistency_mse(student_probs, teacher_probs):
    """Squared error averaged over classes."""
    s, t = _check_pair(student_probs, teacher_probs)
    return np.mean((s - t) ** 2, axis=-1)


def consistency_mse_grad(student_probs, teacher_probs):
    """Gradient w.r.t. the student argument."""
    s, t = _check_pair(student_probs, teacher_probs)
    return 2.0 * (s - t) / s.shape[-1]


def consistency_kl(teacher_probs, student_probs):
    """``KL(teacher || student)``; the teacher is a constant target."""
    t, s = _check_pair(teacher_probs, student_probs)
    return np.sum(t * (_log(t) - _log(s)), axis=-1)


def consistency_kl_grad(teacher_probs, student_probs):
    """Gradient w.r.t. the student argument."""
    t, s = _check_pair(teacher_probs, student_probs)
    return -t * _dlog(s)


def ramp_factor(epoch, ramp_epochs: int) -> float:
    """Sigmoid-shaped ramp ``exp(-5 (1 - min(e / R, 1))^2)``; 1 when ``R == 0``."""
    if ramp_epochs <= 0:
        return 1.0
    x = 1.0 - min(max(epoch, 0) / ramp_epochs, 1.0)
    return math.exp(-5.0 * x * x)


def ramp_weight(epoch, weights: LossWeights) -> float:
    return weights.consistency_max * ramp_factor(epoch, weights.ramp_epochs)


@dataclass
class BatchLoss:
    """Scalar loss, its gradient w.r.t. the student logits, and the parts."""

    loss: float
    grad_logits: np.ndarray
    supervised: float
    unsupervised: float
    unsupervised_weight: float


def total_batch_loss(
    student_logits,
    n_labeled: int,
    labels,
    weights: LossWeights,
    epoch,
    mode: str = "meanteacher",
    consistency: str = "mse",
    teacher_probs=None,
    push_labels=None,
) -> BatchLoss:
    """Supervised NLL on the first ``n_labeled`` rows plus a ramped unsupervised term on all rows.

    Args:
      student_logits: ``[B x m]`` student outputs for the whole batch. The
        labeled rows come first; the unsupervised term sees every row.
      n_labeled: number of leading rows that carry ``labels``.
      labels: ``[n_labeled]`` class indices.
      weights: loss weights; the ramp uses ``weights.ramp_epochs``.
      epoch: epoch index driving the ramp.
      mode: one of ``meanteacher``, ``entropy``, ``pushaway``, ``none``.
      consistency: ``mse`` or ``kl`` (mean-teacher mode only).
      teacher_probs: ``[B x m]`` teacher probabilities (mean-teacher mode).
      push_labels: ``[B]`` labels to push away from, ``-1`` where the row has
        none (push-away mode).
    """
    z = np.asarray(student_logits, dtype=float)
    if z.ndim != 2:
        raise InputError(f"student logits must be [B x m], got {z.shape}")
    if mode not in UNSUPERVISED_TERMS:
        raise ConfigurationError(f"unknown unsupervised term {mode!r}", "unsupervised")
    if not 0 <= n_labeled <= z.shape[0]:
        raise InputError(f"n_labeled={n_labeled} outside batch of {z.shape[0]}")
    n_rows = z.shape[0]
    p = softmax(z)
    grad_p = np.zeros_like(p)

    supervised = 0.0
    if n_labeled > 0:
        lab = np.asarray(labels)
        p_lab = p[:n_labeled]
        supervised = float(np.mean(nll_loss(p_lab, lab)))
        grad_p[:n_labeled] += nll_grad(p_lab, lab) / n_labeled

    unsup = 0.0
    w = 0.0
    if mode != "none" and n_rows > 0:
        r = ramp_factor(epoch, weights.ramp_epochs)
        if mode == "meanteacher":
            if teacher_probs is None:
                raise InputError("mean-teacher term requires teacher probabilities")
            t = np.asarray(teacher_probs, dtype=float)
            if consistency == "mse":
                unsup = float(np.mean(consistency_mse(p, t)))
                g = consistency_mse_grad(p, t)
            elif consistency == "kl":
                unsup = float(np.mean(consistency_kl(t, p)))
                g = consistency_kl_grad(t, p)
            else:
                raise ConfigurationError(f"unknown consistency {consistency!r}", "consistency")
            w = weights.consistency_max * r
            grad_p += w * g / n_rows
        elif mode == "entropy":
            ent = entropy_min_loss(p)
            unsup = float(weights.entropy_min_w * np.mean(ent) + weights.entropy_balance_w * entropy_balance_loss(p))
            w = r
            grad_p += w * (
                weights.entropy_min_w * entropy_min_grad(p) / n_rows
                + weights.entropy_balance_w * entropy_balance_grad(p)
            )
        else:  # pushaway
            if push_labels is None:
                raise InputError("push-away term requires push_labels")
            pl = np.asarray(push_labels)
            rows = np.flatnonzero(pl >= 0)
            w = r
            if rows.size:
                vals = push_away_loss(p[rows], pl[rows], weights.push_away_c)
                unsup = float(np.sum(vals) / n_rows)
                grad_p[rows] += w * push_away_grad(p[rows], pl[rows], weights.push_away_c) / n_rows

    loss = supervised + w * unsup
    return BatchLoss(loss, softmax_backward(p, grad_p), supervised, unsup, w)
