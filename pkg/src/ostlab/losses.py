"""Distillation losses between full-precision and quantized logits.

``kl_top`` measures KL divergence on the k most probable classes of the
full-precision distribution only: quantization should preserve what the
reference model actually predicts, and restricting to its top-k keeps
the signal from being diluted by vocabulary noise. By default the
selected probabilities are used as-is (the truncated sum, not a
renormalized distribution); set ``renormalize=True`` for the proper-KL
variant on renormalized restrictions.

Gradients returned here are with respect to the quantized logits and are
exact for both variants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

PROB_FLOOR = 1e-300
_LOG_FLOOR = np.log(PROB_FLOOR)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_logit_pair(z_ref: np.ndarray, z_q: np.ndarray):
    z_ref = np.asarray(z_ref, dtype=np.float64)
    z_q = np.asarray(z_q, dtype=np.float64)
    if z_ref.ndim != 2 or z_ref.shape != z_q.shape:
        raise ValidationError(
            f"logit arrays must be equal-shape 2-d, got {z_ref.shape} and {z_q.shape}"
        )
    if not np.isfinite(z_ref).all() or not np.isfinite(z_q).all():
        raise ValidationError("logits contain non-finite values")
    return z_ref, z_q


def _topk_mask(p_ref: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of each row's k highest probabilities, ties to lower index."""
    # Stable argsort on -p keeps the lower index first among exact ties.
    order = np.argsort(-p_ref, axis=-1, kind="stable")[:, :k]
    mask = np.zeros(p_ref.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


@dataclass
class KlTopResult:
    loss: float
    grad: np.ndarray
    floored: bool


def kl_top_with_grad(z_ref, z_q, k: int, renormalize: bool = False) -> KlTopResult:
    """KL-on-top-k loss and its gradient with respect to ``z_q``.

    Rows of the inputs are tokens; the loss is the mean over tokens. The
    quantized probabilities are floored at 1e-300 before the log; the
    result notes whether the floor fired.
    """
    z_ref, z_q = _check_logit_pair(z_ref, z_q)
    n, vocab = z_ref.shape
    if not 1 <= k <= vocab:
        raise ValidationError(f"k must be in [1, {vocab}], got {k}")

    log_p = log_softmax(z_ref)
    p = np.exp(log_p)
    log_q_raw = log_softmax(z_q)
    floored = bool((log_q_raw < _LOG_FLOOR).any())
    log_q = np.maximum(log_q_raw, _LOG_FLOOR)
    q = np.exp(log_q_raw)
    mask = _topk_mask(p, k)

    if renormalize:
        p_sel = np.where(mask, p, 0.0)
        q_sel = np.where(mask, q, 0.0)
        p_tot = p_sel.sum(axis=-1, keepdims=True)
        q_tot = np.maximum(q_sel.sum(axis=-1, keepdims=True), PROB_FLOOR)
        p_norm = p_sel / p_tot
        q_norm = np.maximum(q_sel / q_tot, PROB_FLOOR)
        terms = np.where(mask & (p_norm > 0.0), p_norm * (np.log(np.maximum(p_norm, PROB_FLOOR)) - np.log(q_norm)), 0.0)
        loss = float(terms.sum() / n)
        grad = np.where(mask, q_sel / q_tot - p_norm, 0.0) / n
        return KlTopResult(loss, grad, floored)

    terms = np.where(mask, p * (log_p - log_q), 0.0)
    loss = float(terms.sum() / n)
    covered = np.where(mask, p, 0.0).sum(axis=-1, keepdims=True)
    grad = (covered * q - np.where(mask, p, 0.0)) / n
    return KlTopResult(loss, grad, floored)


def kl_top(z_ref, z_q, k: int, renormalize: bool = False) -> float:
    """Loss-only convenience wrapper around kl_top_with_grad."""
    return kl_top_with_grad(z_ref, z_q, k, renormalize).loss


def kl_top_grad(z_ref, z_q, k: int, renormalize: bool = False) -> np.ndarray:
    """Gradient of kl_top with respect to the quantized logits."""
    return kl_top_with_grad(z_ref, z_q, k, renormalize).grad


def cross_entropy_with_grad(z_q, labels):
    """Mean negative log-likelihood of ``labels`` and its gradient."""
    z_q = np.asarray(z_q, dtype=np.float64)
    labels = np.asarray(labels)
    if z_q.ndim != 2:
        raise ValidationError(f"logits must be 2-d, got shape {z_q.shape}")
    if labels.shape != (z_q.shape[0],):
        raise ValidationError("labels must be a vector with one entry per logit row")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValidationError("labels must be integers")
    n, vocab = z_q.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= vocab:
        raise ValidationError(f"labels must lie in [0, {vocab})")
    log_q = log_softmax(z_q)
    rows = np.arange(n)
    loss = float(-log_q[rows, labels].mean())
    grad = np.exp(log_q)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def cross_entropy(z_q, labels) -> float:
    return cross_entropy_with_grad(z_q, labels)[0]


KL_TOP = "kl_top"
FULL_KL = "full_kl"
CROSS_ENTROPY = "cross_entropy"
_KINDS = (KL_TOP, FULL_KL, CROSS_ENTROPY)


@dataclass(frozen=True)
class LossConfig:
    """Loss selection for the optimization loop.

    ``k`` is clamped to the vocabulary size at evaluation time, so the
    default works for any model; ``full_kl`` is kl_top with k = vocab.
    """

    kind: str = KL_TOP
    k: int = 1000
    renormalize: bool = False

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValidationError(f"unknown loss kind {self.kind!r}")
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")

    def evaluate(self, z_ref, z_q, labels=None):
        """Return ``(loss, grad_wrt_z_q, floored)`` for flattened token rows."""
        if self.kind == CROSS_ENTROPY:
            if labels is None:
                raise ValidationError("cross_entropy requires labels")
            loss, grad = cross_entropy_with_grad(z_q, labels)
            return loss, grad, False
        vocab = np.asarray(z_ref).shape[-1]
        k = vocab if self.kind == FULL_KL else min(self.k, vocab)
        result = kl_top_with_grad(z_ref, z_q, k, self.renormalize)
        return result.loss, result.grad, result.floored
