"""Linear transforms that reshape distributions before quantization.

Conventions, used consistently across the package:

* matrices returned here act in the column convention (x' = T x), so a
  row-data matrix transforms as ``X @ T.T`` (see ``transform_rows``);
* weight matrices are stored output-major (oc x ic), so a transform of
  a weight's input channels right-multiplies: ``W @ R``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .linalg import eig_symmetric, hadamard
from .qsur import GaussianStats
from .rng import Rng

_ORTHOGONALITY_TOL = 1e-8


def transform_rows(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Apply a column-convention transform to row-major data."""
    return np.asarray(x, dtype=np.float64) @ np.asarray(t, dtype=np.float64).T


def orthogonality_residual(o: np.ndarray) -> float:
    o = np.asarray(o, dtype=np.float64)
    return float(np.abs(o.T @ o - np.eye(o.shape[0])).max())


@dataclass
class TransformPair:
    """An invertible transform and the inverse its partner weight absorbs.

    ``orthogonal`` must be orthogonal to 1e-8 and ``scale`` strictly
    positive, so the pair composes to the identity: inserting
    ``O diag(scale)`` after one weight and ``diag(scale)^-1 O^T`` before
    the next leaves the product unchanged.
    """

    orthogonal: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.orthogonal, dtype=np.float64)
        s = np.asarray(self.scale, dtype=np.float64)
        if o.ndim != 2 or o.shape[0] != o.shape[1]:
            raise ValidationError(f"orthogonal part must be square, got {o.shape}")
        if s.shape != (o.shape[0],):
            raise ValidationError("scale vector length must match the orthogonal dimension")
        if not np.isfinite(o).all() or not np.isfinite(s).all():
            raise ValidationError("transform pair contains non-finite entries")
        if np.any(s <= 0.0):
            raise ValidationError("scales must be strictly positive")
        if orthogonality_residual(o) > _ORTHOGONALITY_TOL:
            raise ValidationError(f"matrix is not orthogonal to {_ORTHOGONALITY_TOL}")
        self.orthogonal = o
        self.scale = s


def apply_pair(w1: np.ndarray, w2: np.ndarray, pair: TransformPair):
    """Push a transform pair between two chained weights.

    ``w1`` maps into the shared space (columns index it from the left
    factor's perspective: w1 is (m x d)) and ``w2`` maps out of it
    (d x n). Returns ``(w1 @ O @ diag(s), diag(s)^-1 @ O.T @ w2)`` whose
    product equals ``w1 @ w2`` exactly in exact arithmetic.
    """
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    d = pair.orthogonal.shape[0]
    if w1.ndim != 2 or w1.shape[1] != d:
        raise ValidationError(f"w1 must have {d} columns, got shape {w1.shape}")
    if w2.ndim != 2 or w2.shape[0] != d:
        raise ValidationError(f"w2 must have {d} rows, got shape {w2.shape}")
    left = w1 @ pair.orthogonal * pair.scale
    right = (pair.orthogonal.T @ w2) / pair.scale[:, None]
    return left, right


def best_transform(stats: GaussianStats, c: float = 1.0) -> np.ndarray:
    """Utilization-maximizing transform c * Lambda^(-1/2) Q^T.

    Transformed covariance is c^2 * I, which makes the (zero-mean)
    confidence region a ball inscribed in its quantization cube.
    """
    if not (c > 0.0) or not np.isfinite(c):
        raise ValidationError(f"c must be positive and finite, got {c}")
    lam = stats.eig.eigenvalues
    if lam.min() <= 0.0:
        raise ValidationError("covariance must be positive definite")
    return c * (stats.eig.eigenvectors / np.sqrt(lam)).T


def best_orthogonal(stats: GaussianStats) -> np.ndarray:
    """Best rotation-only transform d^(-1/2) H Q^T.

    Rotations cannot equalize eigenvalues, but routing the eigenbasis
    through a Hadamard spreads every principal axis evenly over the
    coordinates: the transformed covariance has constant diagonal
    trace(sigma)/d.
    """
    return hadamard(stats.dim) @ stats.eig.eigenvectors.T


def womi_init(weight_stack: np.ndarray) -> np.ndarray:
    """Weight-outlier-minimizing rotation for a stack of weight rows.

    Eigendecomposes the sample covariance of the rows and returns
    R = Q_W H^T. Right-multiplying the stack by R balances its covariance
    diagonal exactly, which empirically also tames weight outliers better
    than a covariance-blind rotation.
    """
    w = np.asarray(weight_stack, dtype=np.float64)
    if w.ndim != 2:
        raise ValidationError(f"weight stack must be 2-d, got shape {w.shape}")
    n, d = w.shape
    if n < d:
        raise ValidationError(f"need at least {d} rows to estimate a {d}-d covariance, got {n}")
    if not np.isfinite(w).all():
        raise ValidationError("weight stack contains non-finite values")
    centered = w - w.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    eig = eig_symmetric(0.5 * (cov + cov.T))
    return eig.eigenvectors @ hadamard(d).T


def random_orthogonal(d: int, rng: Rng) -> np.ndarray:
    """Haar-distributed orthogonal matrix via sign-fixed QR."""
    if d < 1:
        raise ValidationError(f"dimension must be >= 1, got {d}")
    g = rng.normal((d, d))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0.0] = 1.0
    return q * signs
