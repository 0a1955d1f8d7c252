"""Transform constructions: whitening, rotations, and fused weight pairs."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ostlab.errors import ValidationError
from ostlab.linalg import gaussian_sample, hadamard
from ostlab.qsur import fit_gaussian, gaussian_stats, max_qsur, qsur, transform_stats
from ostlab.quantizer import QuantSpec, fake_quantize
from ostlab.rng import Rng
from ostlab.transforms import (
    TransformPair,
    apply_pair,
    best_orthogonal,
    best_transform,
    orthogonality_residual,
    random_orthogonal,
    transform_rows,
    womi_init,
)


def aniso_stats():
    return gaussian_stats(np.zeros(2), np.diag([4.0, 1.0]), 0.99)


class TestBestTransform:
    def test_whitens_to_scaled_identity(self):
        rng = Rng(30)
        q = random_orthogonal(5, rng)
        sigma = q @ np.diag([9.0, 4.0, 1.0, 0.25, 0.01]) @ q.T
        stats = gaussian_stats(np.zeros(5), sigma, 0.99)
        t = best_transform(stats, c=3.0)
        after = transform_stats(stats, t)
        np.testing.assert_allclose(after.sigma, 9.0 * np.eye(5), atol=1e-10)

    def test_reaches_max_utilization(self):
        stats = aniso_stats()
        after = transform_stats(stats, best_transform(stats))
        np.testing.assert_allclose(qsur(after, "exact_box").qsur, max_qsur(2), rtol=1e-10)

    def test_transform_ordering(self):
        # Full transform beats rotation-only beats doing nothing.
        stats = aniso_stats()
        q_id = qsur(stats, "exact_box").qsur
        q_rot = qsur(transform_stats(stats, best_orthogonal(stats)), "exact_box").qsur
        q_best = qsur(transform_stats(stats, best_transform(stats)), "exact_box").qsur
        assert q_best > q_rot > q_id
        np.testing.assert_allclose(q_id, math.pi / 8.0, rtol=1e-12)
        np.testing.assert_allclose(q_rot, math.pi / 5.0, rtol=1e-10)
        np.testing.assert_allclose(q_best, math.pi / 4.0, rtol=1e-10)

    def test_rejects_bad_scale(self):
        with pytest.raises(ValidationError):
            best_transform(aniso_stats(), c=0.0)
        with pytest.raises(ValidationError):
            best_transform(aniso_stats(), c=math.inf)

    def test_rejects_singular_covariance(self):
        stats = fit_gaussian(np.ones((4, 2)) * [[1.0, 2.0]], 0.99)
        with pytest.raises(ValidationError):
            best_transform(stats)


class TestBestOrthogonal:
    def test_hand_case_2d(self):
        after = transform_stats(aniso_stats(), best_orthogonal(aniso_stats()))
        np.testing.assert_allclose(
            after.sigma, [[2.5, 1.5], [1.5, 2.5]], atol=1e-12
        )

    def test_is_orthogonal(self):
        for d in (2, 4, 8, 16):
            rng = Rng(31 + d)
            q = random_orthogonal(d, rng)
            lam = np.linspace(1.0, d, d)
            stats = gaussian_stats(np.zeros(d), q @ np.diag(lam) @ q.T, 0.99)
            assert orthogonality_residual(best_orthogonal(stats)) <= 1e-10

    def test_flattens_diagonal(self):
        rng = Rng(32)
        q = random_orthogonal(8, rng)
        lam = np.array([30.0, 9.0, 4.0, 2.0, 1.0, 0.5, 0.1, 0.02])
        stats = gaussian_stats(np.zeros(8), q @ np.diag(lam) @ q.T, 0.99)
        after = transform_stats(stats, best_orthogonal(stats))
        diag = np.diag(after.sigma)
        assert diag.max() - diag.min() <= 1e-10 * np.trace(after.sigma)
        np.testing.assert_allclose(diag, lam.sum() / 8.0, rtol=1e-10)


class TestWomiInit:
    def test_balances_sample_covariance_exactly(self):
        rng = Rng(33)
        w = rng.normal((200, 8)) * np.linspace(0.2, 5.0, 8)
        r = womi_init(w)
        assert orthogonality_residual(r) <= 1e-10
        t = w @ r
        centered = t - t.mean(axis=0)
        cov = centered.T @ centered / (t.shape[0] - 1)
        diag = np.diag(cov)
        assert diag.max() - diag.min() <= 1e-10 * diag.max()

    def test_gaussian_rows_hit_average_variance(self):
        x = gaussian_sample(Rng(34), np.zeros(2), np.diag([4.0, 1.0]), 10_000)
        t = x @ womi_init(x)
        var = t.var(axis=0, ddof=1)
        np.testing.assert_allclose(var, 2.5, rtol=0.03)
        assert abs(var[0] - var[1]) <= 1e-8 * var.max()

    def test_beats_covariance_blind_rotation_on_quant_error(self):
        spec = QuantSpec(bits=4, mode="symmetric", granularity="per_channel")
        for seed in range(8):
            rng = Rng(seed)
            w = rng.normal((128, 16))
            w[:, 3] *= 12.0
            blind = random_orthogonal(16, rng.split(99))
            err = {}
            for name, r in (("womi", womi_init(w)), ("blind", blind)):
                t = w @ r
                err[name] = float(np.mean((fake_quantize(t, spec) - t) ** 2))
            assert err["womi"] < err["blind"], f"seed {seed}: {err}"

    def test_needs_enough_rows(self):
        with pytest.raises(ValidationError):
            womi_init(np.ones((3, 8)))

    def test_rejects_non_finite(self):
        w = np.ones((16, 4))
        w[0, 0] = math.nan
        with pytest.raises(ValidationError):
            womi_init(w)


class TestApplyPair:
    def test_product_preserved(self):
        rng = Rng(35)
        for trial in range(10):
            d = (2, 4, 8)[trial % 3]
            w1 = rng.split(trial).normal((6, d))
            w2 = rng.split(50 + trial).normal((d, 5))
            pair = TransformPair(
                orthogonal=random_orthogonal(d, rng.split(100 + trial)),
                scale=np.exp(0.5 * rng.split(150 + trial).normal((d,))),
            )
            a, b = apply_pair(w1, w2, pair)
            np.testing.assert_allclose(a @ b, w1 @ w2, atol=1e-10 * np.abs(w1 @ w2).max())

    def test_identity_pair_is_noop(self):
        w1 = np.arange(8.0).reshape(2, 4)
        w2 = np.arange(12.0).reshape(4, 3)
        pair = TransformPair(orthogonal=np.eye(4), scale=np.ones(4))
        a, b = apply_pair(w1, w2, pair)
        np.testing.assert_array_equal(a, w1)
        np.testing.assert_array_equal(b, w2)

    def test_pure_scale_doubles_and_halves(self):
        w1 = np.array([[1.0, 2.0], [3.0, 4.0]])
        w2 = np.array([[5.0, 6.0], [7.0, 8.0]])
        pair = TransformPair(orthogonal=np.eye(2), scale=2.0 * np.ones(2))
        a, b = apply_pair(w1, w2, pair)
        np.testing.assert_array_equal(a, 2.0 * w1)
        np.testing.assert_array_equal(b, 0.5 * w2)

    def test_three_link_chain(self):
        rng = Rng(36)
        w1, w2, w3 = rng.normal((3, 4)), rng.normal((4, 4)), rng.normal((4, 2))
        p12 = TransformPair(random_orthogonal(4, rng.split(1)), np.full(4, 1.5))
        p23 = TransformPair(random_orthogonal(4, rng.split(2)), np.full(4, 0.25))
        a, b = apply_pair(w1, w2, p12)
        b, c = apply_pair(b, w3, p23)
        np.testing.assert_allclose(a @ b @ c, w1 @ w2 @ w3, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        pair = TransformPair(np.eye(3), np.ones(3))
        with pytest.raises(ValidationError):
            apply_pair(np.ones((2, 4)), np.ones((3, 2)), pair)
        with pytest.raises(ValidationError):
            apply_pair(np.ones((2, 3)), np.ones((4, 2)), pair)

    def test_pair_validation(self):
        with pytest.raises(ValidationError):
            TransformPair(np.eye(3), np.array([1.0, -1.0, 1.0]))
        with pytest.raises(ValidationError):
            TransformPair(np.ones((3, 3)), np.ones(3))
        with pytest.raises(ValidationError):
            TransformPair(np.eye(3), np.ones(2))


class TestRandomOrthogonal:
    def test_orthogonality(self):
        for d in (1, 2, 3, 8, 33):
            q = random_orthogonal(d, Rng(40 + d))
            assert orthogonality_residual(q) <= 1e-12

    def test_seeded_determinism(self):
        np.testing.assert_array_equal(
            random_orthogonal(6, Rng(41)), random_orthogonal(6, Rng(41))
        )
        assert np.abs(random_orthogonal(6, Rng(41)) - random_orthogonal(6, Rng(42))).max() > 0.1

    def test_first_column_isotropic(self):
        # Haar invariance: the first column is uniform on the sphere, so its
        # squared components each average 1/d.
        d, trials = 4, 2000
        acc = np.zeros(d)
        for t in range(trials):
            acc += random_orthogonal(d, Rng(50_000 + t))[:, 0] ** 2
        np.testing.assert_allclose(acc / trials, 1.0 / d, atol=0.02)

    def test_rejects_nonpositive_dim(self):
        with pytest.raises(ValidationError):
            random_orthogonal(0, Rng(0))


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**31))
def test_transform_rows_matches_column_convention(seed):
    rng = Rng(seed)
    x = rng.normal((5, 3))
    t = rng.split(1).normal((3, 3))
    np.testing.assert_allclose(transform_rows(x, t), (t @ x.T).T, atol=1e-14)


def test_hadamard_balances_anisotropic_pair():
    after = transform_stats(aniso_stats(), hadamard(2))
    np.testing.assert_allclose(np.diag(after.sigma), [2.5, 2.5], rtol=1e-12)
