"""Supervised and distillation loss terms and their mini-batch combination.

Per-item functions accept a single vector or a batch of rows and return one
term per row. They accept ndarrays or :class:`~liser.tensor.Tensor` and stay
differentiable for the latter.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class LossWeights:
    lambda_sd: float = 1.0
    lambda_vd: float = 1.0

    def __post_init__(self):
        for name in ("lambda_sd", "lambda_vd"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def _rows(x):
    return T.reshape(x, (1, -1)) if x.ndim == 1 else x


def _finish(out, single, *inputs):
    """Scalar for single vectors; plain numpy/float when no input was a Tensor."""
    if single:
        out = T.reshape(out, ())
    if any(isinstance(x, T.Tensor) for x in inputs):
        return out
    return float(out.data) if single else out.data


def ce_loss(logits, labels):
    """-log softmax(logits)[label]."""
    raw = logits
    logits = T.as_tensor(logits)
    single = logits.ndim == 1
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    k = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range for {k} classes: {labels}")
    lp = T.log_softmax(_rows(logits))
    onehot = np.zeros(lp.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return _finish(-T.tsum(lp * onehot, axis=1), single, raw)


def mae_loss(student_probs, teacher_probs):
    """(1/K) * sum_k |p_k - q_k|."""
    p = T.as_tensor(student_probs)
    q = np.asarray(teacher_probs, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"mae_loss: shape mismatch {p.shape} vs {q.shape}")
    single = p.ndim == 1
    return _finish(T.mean(T.tabs(_rows(p) - q.reshape(-1, q.shape[-1])), axis=1), single, student_probs)


def distill_ce_loss(student_logits, teacher_probs):
    """Soft-target cross-entropy -sum_k q_k log softmax(logits)_k."""
    z = T.as_tensor(student_logits)
    q = np.asarray(teacher_probs, dtype=np.float64)
    if z.shape != q.shape:
        raise ValueError(f"distill_ce_loss: shape mismatch {z.shape} vs {q.shape}")
    single = z.ndim == 1
    lp = T.log_softmax(_rows(z))
    return _finish(-T.tsum(lp * q.reshape(lp.shape), axis=1), single, student_logits)


def aggregate_teacher_segments(segments) -> np.ndarray:
    """Mean of per-segment teacher distributions (rows)."""
    seg = np.asarray(segments, dtype=np.float64)
    if seg.ndim != 2 or len(seg) == 0:
        raise ValueError("need at least one teacher segment")
    return seg.mean(axis=0)


def confidence_weight(dist) -> float:
    return float(np.max(dist))


def conf_batch_loss(sup_terms, sd_terms, vd_terms, weights: LossWeights, instance_weights=None):
    """Mini-batch loss with optional per-item weights on the distillation terms.

    ``instance_weights`` is an N_u x 2 array of (w_sd, w_vd); ``None`` means
    constant weights, which is exactly the plain mini-batch loss.
    """
    plain = not any(isinstance(t, T.Tensor) for t in (sup_terms, sd_terms, vd_terms))
    sup, sd, vd = (T.as_tensor(np.atleast_1d(t) if not isinstance(t, T.Tensor) else t)
                   for t in (sup_terms, sd_terms, vd_terms))
    n_l, n_u = sup.shape[0], sd.shape[0]
    if vd.shape[0] != n_u:
        raise ValueError(f"{n_u} speech-distill terms but {vd.shape[0]} video-distill terms")
    if n_l + n_u == 0:
        raise ValueError("empty mini-batch")
    if instance_weights is not None:
        w = np.asarray(instance_weights, dtype=np.float64).reshape(-1, 2)
        if len(w) != n_u:
            raise ValueError(f"{len(w)} instance weight pairs for {n_u} unlabeled items")
        sd = sd * w[:, 0]
        vd = vd * w[:, 1]
    distill = T.scale(sd, weights.lambda_sd) + T.scale(vd, weights.lambda_vd)
    total = (T.tsum(sup) + T.tsum(distill)) / (n_l + n_u)
    return total.item() if plain else total


def batch_loss(sup_terms, sd_terms, vd_terms, weights: LossWeights):
    return conf_batch_loss(sup_terms, sd_terms, vd_terms, weights, None)
