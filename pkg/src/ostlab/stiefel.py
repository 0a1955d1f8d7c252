"""Optimization on the orthogonal manifold plus log-domain scale updates.

Orthogonal parameters move by projecting the Euclidean gradient onto the
tangent space at O (O skew(O^T G)) and retracting with the Cayley map.
Three steppers are provided: plain Riemannian SGD (QR retraction),
Cayley SGD, and a Riemannian Adam whose moments live on the ambient
tangent representation and are re-projected after each move.

Positive scale vectors are optimized as their logarithms with standard
Adam, which keeps them positive without clipping.

Every 64 steps an orthogonal parameter is re-orthonormalized by a
sign-fixed QR factorization to stop floating-point drift accumulating.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError

REORTHONORMALIZE_EVERY = 64
_SKEW_TOL = 1e-10


def skew_part(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a - a.T)


def riemannian_grad(o: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Project a Euclidean gradient onto the tangent space at ``o``."""
    o = np.asarray(o, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if o.shape != g.shape or o.ndim != 2 or o.shape[0] != o.shape[1]:
        raise ValidationError(f"shape mismatch: o {o.shape}, g {g.shape}")
    return o @ skew_part(o.T @ g)


def cayley_retract(o: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Move ``o`` along the skew direction ``a``: (I - A/2)^-1 (I + A/2) O.

    The Cayley factor is exactly orthogonal for skew A, so the retraction
    stays on the manifold up to the linear solve's rounding.
    """
    o = np.asarray(o, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    d = o.shape[0]
    if a.shape != (d, d):
        raise ValidationError(f"direction must be {d}x{d}, got {a.shape}")
    if np.abs(a + a.T).max() > _SKEW_TOL * max(1.0, float(np.abs(a).max())):
        raise ValidationError("direction matrix is not skew-symmetric")
    if not a.any():
        return o.copy()
    eye = np.eye(d)
    try:
        return np.linalg.solve(eye - 0.5 * a, (eye + 0.5 * a) @ o)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("Cayley retraction step is singular; reduce the step size") from exc


def _qr_orthonormalize(o: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(o)
    signs = np.sign(np.diag(r))
    signs[signs == 0.0] = 1.0
    return q * signs


@dataclass
class StiefelParam:
    """An orthogonal matrix parameter with optimizer state."""

    value: np.ndarray
    exp_avg: np.ndarray = field(init=False)
    exp_avg_sq: np.ndarray = field(init=False)
    step: int = field(init=False, default=0)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        d = self.value.shape[0]
        if self.value.ndim != 2 or self.value.shape != (d, d):
            raise ValidationError(f"orthogonal parameter must be square, got {self.value.shape}")
        residual = np.abs(self.value.T @ self.value - np.eye(d)).max()
        if residual > 1e-6:
            raise ValidationError(f"initial value is not orthogonal (residual {residual:.2e})")
        self.exp_avg = np.zeros_like(self.value)
        self.exp_avg_sq = np.zeros_like(self.value)


@dataclass
class ScaleParam:
    """A positive scale vector parameterized by its logarithm."""

    log_value: np.ndarray
    exp_avg: np.ndarray = field(init=False)
    exp_avg_sq: np.ndarray = field(init=False)
    step: int = field(init=False, default=0)

    def __post_init__(self):
        self.log_value = np.array(self.log_value, dtype=np.float64)
        if self.log_value.ndim != 1:
            raise ValidationError(f"scale parameter must be a vector, got {self.log_value.shape}")
        self.exp_avg = np.zeros_like(self.log_value)
        self.exp_avg_sq = np.zeros_like(self.log_value)

    @classmethod
    def identity(cls, d: int) -> "ScaleParam":
        return cls(np.zeros(d))

    @property
    def value(self) -> np.ndarray:
        return np.exp(self.log_value)


def _check_grad(g: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if not np.isfinite(g).all():
        raise NumericalError("gradient contains non-finite values")
    return g


def _maybe_reorthonormalize(param: StiefelParam) -> None:
    if param.step % REORTHONORMALIZE_EVERY == 0:
        param.value = _qr_orthonormalize(param.value)


def riemann_sgd_step(param: StiefelParam, grad: np.ndarray, lr: float) -> StiefelParam:
    """Projected gradient step with QR retraction."""
    grad = _check_grad(grad)
    if not grad.any():
        return param
    tangent = riemannian_grad(param.value, grad)
    param.value = _qr_orthonormalize(param.value - lr * tangent)
    param.step += 1
    return param


def cayley_sgd_step(param: StiefelParam, grad: np.ndarray, lr: float) -> StiefelParam:
    """Projected gradient step with Cayley retraction."""
    grad = _check_grad(grad)
    if not grad.any():
        return param
    tangent = riemannian_grad(param.value, grad)
    a = skew_part(tangent @ param.value.T)
    param.value = cayley_retract(param.value, -lr * a)
    param.step += 1
    _maybe_reorthonormalize(param)
    return param


def riemann_adam_step(
    param: StiefelParam,
    grad: np.ndarray,
    lr: float,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
) -> StiefelParam:
    """Adam moments on tangent matrices, Cayley retraction, projection transport.

    An exactly zero gradient is a no-op: the parameter and both moments
    are left untouched.
    """
    grad = _check_grad(grad)
    if not grad.any():
        return param
    beta1, beta2 = betas
    tangent = riemannian_grad(param.value, grad)
    param.step += 1
    param.exp_avg = beta1 * param.exp_avg + (1.0 - beta1) * tangent
    param.exp_avg_sq = beta2 * param.exp_avg_sq + (1.0 - beta2) * tangent * tangent
    m_hat = param.exp_avg / (1.0 - beta1**param.step)
    v_hat = param.exp_avg_sq / (1.0 - beta2**param.step)
    update = m_hat / (np.sqrt(v_hat) + eps)
    a = skew_part(update @ param.value.T)
    param.value = cayley_retract(param.value, -lr * a)
    # First moment rides along via projection onto the new tangent space;
    # the elementwise second moment has no geometric home and stays put.
    param.exp_avg = riemannian_grad(param.value, param.exp_avg)
    _maybe_reorthonormalize(param)
    return param


def adam_step_scale(
    param: ScaleParam,
    grad: np.ndarray,
    lr: float,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
) -> ScaleParam:
    """Adam step on log(s) given a gradient with respect to s itself."""
    grad = _check_grad(grad)
    if grad.shape != param.log_value.shape:
        raise ValidationError(f"gradient shape {grad.shape} does not match {param.log_value.shape}")
    if not grad.any():
        return param
    beta1, beta2 = betas
    g = grad * param.value  # d/d(log s) = s * d/ds
    param.step += 1
    param.exp_avg = beta1 * param.exp_avg + (1.0 - beta1) * g
    param.exp_avg_sq = beta2 * param.exp_avg_sq + (1.0 - beta2) * g * g
    m_hat = param.exp_avg / (1.0 - beta1**param.step)
    v_hat = param.exp_avg_sq / (1.0 - beta2**param.step)
    param.log_value = param.log_value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


def cosine_lr(base_lr: float, iteration: int, total: int) -> float:
    """Cosine decay from base_lr toward zero over ``total`` iterations."""
    if total < 1:
        raise ValidationError(f"total iterations must be >= 1, got {total}")
    if not 0 <= iteration < total:
        raise ValidationError(f"iteration {iteration} outside [0, {total})")
    return base_lr * 0.5 * (1.0 + float(np.cos(np.pi * iteration / total)))
