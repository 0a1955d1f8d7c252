"""Dense symmetric eigendecomposition, Hadamard construction, Gaussian sampling.

The eigensolver is a Jacobi iteration: deterministic, accurate to
machine precision at the matrix sizes used here (d <= 256), and free of
platform-dependent tie-breaking. Each sweep visits every index pair once
in a round-robin tournament order; the pairs within a round are
disjoint, so their rotations commute and apply as one vectorized
orthogonal update. Eigenpairs come back sorted by descending eigenvalue
with a fixed sign convention so downstream transforms are reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import NumericalError, UnsupportedDimensionError, ValidationError
from .rng import Rng

_SYMMETRY_RTOL = 1e-12
_JACOBI_RTOL = 1e-12
_MAX_SWEEPS = 64


@lru_cache(maxsize=None)
def _round_robin_rounds(d: int):
    """Index pairs of one sweep, grouped into rounds of disjoint pairs.

    The standard tournament schedule: one player fixed, the rest rotate.
    Every unordered pair appears exactly once across the rounds.
    """
    players = list(range(d)) + ([-1] if d % 2 else [])
    m = len(players)
    arr = players[:]
    rounds = []
    for _ in range(m - 1):
        ps = []
        qs = []
        for i in range(m // 2):
            x, y = arr[i], arr[m - 1 - i]
            if x >= 0 and y >= 0:
                ps.append(min(x, y))
                qs.append(max(x, y))
        rounds.append((np.asarray(ps), np.asarray(qs)))
        arr = [arr[0], arr[-1]] + arr[1:-1]
    return tuple(rounds)


@dataclass
class EigenDecomposition:
    """Eigenvalues (descending) and matching orthonormal eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def check_symmetric(sigma: np.ndarray, name: str = "matrix") -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValidationError(f"{name} must be square, got shape {sigma.shape}")
    if not np.isfinite(sigma).all():
        raise ValidationError(f"{name} contains non-finite entries")
    scale = max(1.0, float(np.abs(sigma).max()))
    if np.abs(sigma - sigma.T).max() > _SYMMETRY_RTOL * scale:
        raise ValidationError(f"{name} is not symmetric to {_SYMMETRY_RTOL} relative")
    return sigma


def eig_symmetric(sigma: np.ndarray) -> EigenDecomposition:
    """Full eigendecomposition of a symmetric matrix via Jacobi sweeps.

    Convergence is declared when the off-diagonal Frobenius norm drops
    below 1e-12 times the Frobenius norm of the input. The entry of
    largest magnitude in each returned eigenvector is positive; exact
    magnitude ties resolve to the lowest index.
    """
    sigma = check_symmetric(sigma, "sigma")
    d = sigma.shape[0]
    a = 0.5 * (sigma + sigma.T)
    v = np.eye(d)
    if d == 1:
        return EigenDecomposition(a.diagonal().copy(), v)

    norm = float(np.linalg.norm(a))
    threshold = _JACOBI_RTOL * norm
    skip = threshold / max(1, d * d)
    rounds = _round_robin_rounds(d)

    converged = norm == 0.0
    for _ in range(_MAX_SWEEPS):
        if converged:
            break
        off = float(np.sqrt(np.sum(np.tril(a, -1) ** 2) * 2.0))
        if off < threshold:
            converged = True
            break
        for p_all, q_all in rounds:
            apq = a[p_all, q_all]
            active = np.abs(apq) > skip
            if not active.any():
                continue
            p = p_all[active]
            q = q_all[active]
            apq = apq[active]
            app = a[p, p]
            aqq = a[q, q]
            tau = (aqq - app) / (2.0 * apq)
            root = np.sqrt(1.0 + tau * tau)
            t = np.where(tau >= 0.0, 1.0, -1.0) / (np.abs(tau) + root)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            col_p = a[:, p].copy()
            col_q = a[:, q].copy()
            a[:, p] = c * col_p - s * col_q
            a[:, q] = s * col_p + c * col_q
            row_p = a[p, :].copy()
            row_q = a[q, :].copy()
            a[p, :] = c[:, None] * row_p - s[:, None] * row_q
            a[q, :] = s[:, None] * row_p + c[:, None] * row_q
            a[p, p] = app - t * apq
            a[q, q] = aqq + t * apq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vec_p = v[:, p].copy()
            vec_q = v[:, q].copy()
            v[:, p] = c * vec_p - s * vec_q
            v[:, q] = s * vec_p + c * vec_q
        converged = float(np.sqrt(np.sum(np.tril(a, -1) ** 2) * 2.0)) < threshold
    if not converged:
        raise NumericalError(f"Jacobi iteration did not converge within {_MAX_SWEEPS} sweeps")

    values = a.diagonal().copy()
    order = np.argsort(-values, kind="stable")
    values = values[order]
    vectors = v[:, order]
    anchors = np.argmax(np.abs(vectors), axis=0)
    signs = np.where(vectors[anchors, np.arange(d)] < 0.0, -1.0, 1.0)
    vectors = vectors * signs
    return EigenDecomposition(values, vectors)


def hadamard(d: int) -> np.ndarray:
    """Orthonormal Sylvester Hadamard matrix, entries +-d**-0.5.

    Only powers of two are constructible; anything else raises
    UnsupportedDimensionError.
    """
    if d < 1 or (d & (d - 1)) != 0:
        raise UnsupportedDimensionError(f"Hadamard dimension must be a power of two, got {d}")
    h = np.ones((1, 1))
    while h.shape[0] < d:
        h = np.block([[h, h], [h, -h]])
    return h / np.sqrt(d)


def gaussian_sample(rng: Rng, mu: np.ndarray, sigma: np.ndarray, n: int) -> np.ndarray:
    """Draw n rows from N(mu, sigma) by eigendecomposition coloring."""
    if n < 1:
        raise ValidationError(f"sample count must be >= 1, got {n}")
    mu = np.asarray(mu, dtype=np.float64)
    if mu.ndim != 1:
        raise ValidationError(f"mu must be a vector, got shape {mu.shape}")
    sigma = check_symmetric(sigma, "sigma")
    if sigma.shape[0] != mu.shape[0]:
        raise ValidationError(
            f"mu has dimension {mu.shape[0]} but sigma is {sigma.shape[0]}x{sigma.shape[1]}"
        )
    eig = eig_symmetric(sigma)
    lam = eig.eigenvalues
    tol = 1e-10 * max(1.0, float(np.abs(lam).max(initial=0.0)))
    if lam.min(initial=0.0) < -tol:
        raise ValidationError("sigma has a significantly negative eigenvalue")
    lam = np.maximum(lam, 0.0)
    z = rng.normal((n, mu.shape[0]))
    return mu + (z * np.sqrt(lam)) @ eig.eigenvectors.T
