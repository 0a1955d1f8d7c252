"""Toy transformer: function-preserving transforms, quantization hooks,
exact transform gradients."""
import copy

import numpy as np
import pytest

from ostlab.errors import ValidationError
from ostlab.losses import kl_top_with_grad
from ostlab.quantizer import rtn_config
from ostlab.rng import Rng
from ostlab.toy_model import (
    OstParams,
    ToyBlockConfig,
    backward_ost,
    block_weight_digest,
    collect_qsur,
    effective_grads_to_params,
    effective_tensors,
    fold_rmsnorm,
    forward,
    fuse,
    identity_ost,
    init_block,
    random_ost,
    rope_apply,
    rope_tables,
)
from ostlab.toy_model import _materialize

SMALL = ToyBlockConfig(
    d_model=8, n_heads=2, head_dim=4, ffn_dim=8, vocab=32, seq_len=8, n_blocks=2
)

TAP_NAMES_PER_BLOCK = (
    "attn_in", "wq", "wk", "wv", "k_cache", "v_cache", "o_in", "wo",
    "ffn_in", "w_up", "w_gate", "down_in", "w_down",
)


def tokens_for(config, seed=99, batch=2):
    return Rng(seed).integers(config.vocab, (batch, config.seq_len))


class TestConfig:
    def test_head_split_must_factor(self):
        with pytest.raises(ValidationError):
            ToyBlockConfig(d_model=64, n_heads=4, head_dim=8)

    def test_head_dim_must_be_even(self):
        with pytest.raises(ValidationError):
            ToyBlockConfig(d_model=6, n_heads=2, head_dim=3)

    def test_vocab_floor(self):
        with pytest.raises(ValidationError):
            ToyBlockConfig(vocab=1)

    def test_rope_base(self):
        with pytest.raises(ValidationError):
            ToyBlockConfig(rope_base=1.0)


class TestInit:
    def test_deterministic(self):
        a = init_block(SMALL, Rng(3), outliers=True)
        b = init_block(SMALL, Rng(3), outliers=True)
        assert block_weight_digest(a) == block_weight_digest(b)
        c = init_block(SMALL, Rng(4), outliers=True)
        assert block_weight_digest(a) != block_weight_digest(c)

    def test_outlier_channels_visible_in_stream(self):
        cfg = ToyBlockConfig()
        tokens = tokens_for(cfg)
        for seed in range(5):
            ratios = {}
            for flag in (True, False):
                block = init_block(cfg, Rng(seed), outliers=flag)
                tap = forward(block, tokens, want_taps=True).taps["block0.attn_in"]
                channel_max = np.abs(tap).max(axis=0)
                ratios[flag] = channel_max.max() / np.median(channel_max)
            assert ratios[True] > 5.0, f"seed {seed}: {ratios}"
            assert ratios[False] < 3.0, f"seed {seed}: {ratios}"


class TestFunctionPreservation:
    def test_identity_transforms_are_exact(self):
        block = init_block(SMALL, Rng(10))
        tokens = tokens_for(SMALL)
        fp = forward(block, tokens).logits
        routed = forward(block, tokens, ost=identity_ost(SMALL)).logits
        np.testing.assert_allclose(routed, fp, atol=1e-12)

    def test_random_transforms_preserve_logits(self):
        configs = (
            SMALL,
            ToyBlockConfig(),
            ToyBlockConfig(
                d_model=32, n_heads=2, head_dim=16, ffn_dim=64,
                vocab=64, seq_len=16, n_blocks=3,
            ),
        )
        for cfg in configs:
            for seed in range(3):
                block = init_block(cfg, Rng(seed), outliers=seed == 1)
                tokens = tokens_for(cfg, 100 + seed)
                fp = forward(block, tokens).logits
                ost = random_ost(cfg, Rng(200 + seed))
                routed = forward(block, tokens, ost=ost).logits
                np.testing.assert_allclose(
                    routed, fp, atol=1e-8 * max(1.0, np.abs(fp).max())
                )

    def test_qk_scale_alone_cancels(self):
        block = init_block(SMALL, Rng(11))
        tokens = tokens_for(SMALL)
        ost = identity_ost(SMALL)
        for bt in ost.blocks:
            bt.s_qk.log_value = Rng(12).normal(bt.s_qk.log_value.shape)
        fp = forward(block, tokens).logits
        np.testing.assert_allclose(forward(block, tokens, ost=ost).logits, fp, atol=1e-10)

    def test_online_hadamards_preserve_logits(self):
        block = init_block(SMALL, Rng(13))
        tokens = tokens_for(SMALL)
        fp = forward(block, tokens).logits
        ost = identity_ost(SMALL, kq_hadamard=True, ffn_hadamard=True)
        np.testing.assert_allclose(forward(block, tokens, ost=ost).logits, fp, atol=1e-10)

    def test_head_rotation_isolated_to_its_head(self):
        # Rotating head 0's value space must leave the other head's cached
        # values bit-identical.
        block = init_block(SMALL, Rng(14))
        tokens = tokens_for(SMALL)
        ost = identity_ost(SMALL)
        from ostlab.transforms import random_orthogonal

        ost.blocks[0].r_ov[0].value = random_orthogonal(SMALL.head_dim, Rng(15))
        base = forward(block, tokens, ost=identity_ost(SMALL), want_taps=True).taps
        moved = forward(block, tokens, ost=ost, want_taps=True).taps
        hd = SMALL.head_dim
        v = "block0.v_cache"
        assert np.abs(moved[v][:, :hd] - base[v][:, :hd]).max() > 1e-3
        np.testing.assert_array_equal(moved[v][:, hd:], base[v][:, hd:])


class TestFold:
    def test_same_function_and_unit_gammas(self):
        block = init_block(SMALL, Rng(16))
        tokens = tokens_for(SMALL)
        folded = fold_rmsnorm(block)
        np.testing.assert_allclose(
            forward(folded, tokens).logits, forward(block, tokens).logits, atol=1e-12
        )
        for bw in folded.blocks:
            np.testing.assert_array_equal(bw.g_attn, 1.0)
            np.testing.assert_array_equal(bw.g_ffn, 1.0)

    def test_idempotent(self):
        folded = fold_rmsnorm(init_block(SMALL, Rng(17)))
        assert block_weight_digest(fold_rmsnorm(folded)) == block_weight_digest(folded)

    def test_source_block_untouched(self):
        block = init_block(SMALL, Rng(18))
        before = block_weight_digest(block)
        fold_rmsnorm(block)
        assert block_weight_digest(block) == before


class TestFuse:
    def test_matches_routed_forward_exactly(self):
        block = fold_rmsnorm(init_block(SMALL, Rng(19)))
        ost = random_ost(SMALL, Rng(20))
        tokens = tokens_for(SMALL)
        fused = fuse(block, ost)
        np.testing.assert_array_equal(
            forward(fused, tokens).logits, forward(block, tokens, ost=ost).logits
        )

    def test_preserves_the_original_function(self):
        block = fold_rmsnorm(init_block(SMALL, Rng(21)))
        ost = random_ost(SMALL, Rng(22))
        tokens = tokens_for(SMALL)
        fp = forward(block, tokens).logits
        np.testing.assert_allclose(
            forward(fuse(block, ost), tokens).logits,
            fp,
            atol=1e-8 * max(1.0, np.abs(fp).max()),
        )

    def test_identity_fuse_reproduces_weights(self):
        block = fold_rmsnorm(init_block(SMALL, Rng(23)))
        fused = fuse(block, identity_ost(SMALL))
        assert block_weight_digest(fused) == block_weight_digest(block)

    def test_identity_refuse_idempotent(self):
        # Rotations only: learned scales would occupy the fused norm slots
        # and the second fuse requires those to be folded again.
        block = fold_rmsnorm(init_block(SMALL, Rng(24)))
        ost = random_ost(SMALL, Rng(25), kq_hadamard=False, ffn_hadamard=False, scale_spread=0.0)
        once = fuse(block, ost)
        twice = fuse(once, identity_ost(SMALL))
        assert block_weight_digest(twice) == block_weight_digest(once)

    def test_refusing_hadamard_stack_rejected(self):
        # The fused weights absorbed the online rotations' inverses; stacking
        # another transform set on top would silently drop them.
        block = fold_rmsnorm(init_block(SMALL, Rng(24)))
        once = fuse(block, identity_ost(SMALL, ffn_hadamard=True))
        with pytest.raises(ValidationError):
            fuse(once, identity_ost(SMALL))
        with pytest.raises(ValidationError):
            forward(once, tokens_for(SMALL), ost=identity_ost(SMALL))

    def test_requires_folded_norms(self):
        block = init_block(SMALL, Rng(26))
        with pytest.raises(ValidationError):
            fuse(block, identity_ost(SMALL))


class TestRope:
    def test_position_zero_is_identity(self):
        cos, sin = rope_tables(8, 6, 10000.0)
        x = Rng(27).normal((1, 2, 8, 6))
        y = rope_apply(x, cos, sin)
        np.testing.assert_array_equal(y[..., 0, :], x[..., 0, :])

    def test_preserves_pair_norms(self):
        cos, sin = rope_tables(8, 6, 10000.0)
        x = Rng(28).normal((1, 2, 8, 6))
        y = rope_apply(x, cos, sin)
        np.testing.assert_allclose(
            (y.reshape(1, 2, 8, 3, 2) ** 2).sum(-1),
            (x.reshape(1, 2, 8, 3, 2) ** 2).sum(-1),
            atol=1e-12,
        )

    def test_commutes_with_pair_constant_scaling(self):
        cos, sin = rope_tables(8, 6, 10000.0)
        x = Rng(29).normal((1, 2, 8, 6))
        s = np.repeat(np.array([2.0, 0.5, 3.0]), 2)
        np.testing.assert_allclose(
            rope_apply(x * s, cos, sin), rope_apply(x, cos, sin) * s, atol=1e-12
        )


class TestQuantizedForward:
    def test_16bit_is_pass_through(self):
        block = init_block(SMALL, Rng(30), outliers=True)
        tokens = tokens_for(SMALL)
        np.testing.assert_array_equal(
            forward(block, tokens, quant=rtn_config(16, 16, 16)).logits,
            forward(block, tokens).logits,
        )

    def test_weight_quantization_moves_logits(self):
        block = init_block(ToyBlockConfig(), Rng(42), outliers=True)
        tokens = tokens_for(ToyBlockConfig(), 42)
        fp = forward(block, tokens).logits
        q = forward(block, tokens, quant=rtn_config(4, 16, 16)).logits
        assert float(np.mean((q - fp) ** 2)) > 0.0

    def test_quantizing_more_tensors_hurts_more(self):
        cfg = ToyBlockConfig()
        full, weight_only = [], []
        for seed in range(10):
            block = init_block(cfg, Rng(seed), outliers=True)
            tokens = tokens_for(cfg, 1000 + seed)
            fp = forward(block, tokens).logits
            full.append(
                float(np.mean((forward(block, tokens, quant=rtn_config(4, 4, 4)).logits - fp) ** 2))
            )
            weight_only.append(
                float(np.mean((forward(block, tokens, quant=rtn_config(4, 16, 16)).logits - fp) ** 2))
            )
        assert np.mean(full) >= np.mean(weight_only)

    def test_forward_never_mutates_weights(self):
        block = init_block(SMALL, Rng(31), outliers=True)
        digest = block_weight_digest(block)
        tokens = tokens_for(SMALL)
        ost = random_ost(SMALL, Rng(32))
        res = forward(block, tokens, ost=ost, quant=rtn_config(4, 4, 4), want_cache=True, want_taps=True)
        backward_ost(block, ost, res.cache, np.ones_like(res.logits))
        collect_qsur(block, tokens, ost)
        assert block_weight_digest(block) == digest


class TestTaps:
    def test_completeness_and_shapes(self):
        block = init_block(SMALL, Rng(33))
        tokens = tokens_for(SMALL, batch=3)
        taps = forward(block, tokens, want_taps=True).taps
        rows = 3 * SMALL.seq_len
        expected = {"head.in", "head.w"}
        for bi in range(SMALL.n_blocks):
            expected.update(f"block{bi}.{n}" for n in TAP_NAMES_PER_BLOCK)
        assert set(taps) == expected
        for name, arr in taps.items():
            assert arr.ndim == 2, name
            if not name.endswith((".wq", ".wk", ".wv", ".wo", ".w_up", ".w_gate", ".w_down", ".w")):
                assert arr.shape[0] == rows, name
        assert taps["block0.attn_in"].shape == (rows, SMALL.d_model)
        assert taps["block0.k_cache"].shape == (rows, SMALL.d_model)
        assert taps["head.w"].shape == (SMALL.vocab, SMALL.d_model)

    def test_collect_qsur_pairs(self):
        block = init_block(SMALL, Rng(34), outliers=True)
        tokens = tokens_for(SMALL)
        reports = collect_qsur(block, tokens, random_ost(SMALL, Rng(35)), variant="exact_box")
        assert set(reports) == set(forward(block, tokens, want_taps=True).taps)
        for name, (before, after) in reports.items():
            assert before.variant == after.variant == "exact_box"
            assert 0.0 < before.qsur_normalized <= 1.0 + 1e-12, name
            assert 0.0 < after.qsur_normalized <= 1.0 + 1e-12, name

    def test_collect_qsur_without_transforms_reuses_reports(self):
        block = init_block(SMALL, Rng(36))
        reports = collect_qsur(block, tokens_for(SMALL), None)
        for before, after in reports.values():
            assert before is after


class TestTokens:
    def test_1d_tokens_promoted(self):
        block = init_block(SMALL, Rng(37))
        flat = forward(block, np.arange(SMALL.seq_len)).logits
        assert flat.shape == (1, SMALL.seq_len, SMALL.vocab)

    def test_validation(self):
        block = init_block(SMALL, Rng(38))
        with pytest.raises(ValidationError):
            forward(block, np.array([[0.5, 1.5]]))
        with pytest.raises(ValidationError):
            forward(block, np.array([[0, SMALL.vocab]]))
        with pytest.raises(ValidationError):
            forward(block, np.array([[-1, 0]]))
        with pytest.raises(ValidationError):
            forward(block, np.zeros((0, 4), dtype=np.int64))
        with pytest.raises(ValidationError):
            forward(block, np.zeros((1, 1, 4), dtype=np.int64))

    def test_transform_block_count_checked(self):
        block = init_block(SMALL, Rng(39))
        wrong = identity_ost(
            ToyBlockConfig(
                d_model=8, n_heads=2, head_dim=4, ffn_dim=8,
                vocab=32, seq_len=8, n_blocks=1,
            )
        )
        with pytest.raises(ValidationError):
            forward(block, tokens_for(SMALL), ost=wrong)


class TestEffectiveGrads:
    """FD checks of d(sum_T <C_T, T_eff>)/d(params), one parameter at a time."""

    def _setup(self):
        block = init_block(SMALL, Rng(101))
        ost = random_ost(SMALL, Rng(102))
        names = list(effective_tensors(block, ost).keys())
        crng = Rng(777)
        c = {
            n: crng.split(i).normal(effective_tensors(block, ost)[n].shape)
            for i, n in enumerate(names)
        }
        upstream = {"embedding": c["embedding"], "head": c["head"], "blocks": []}
        for bi in range(SMALL.n_blocks):
            upstream["blocks"].append(
                {
                    k: c[f"block{bi}.{k}"]
                    for k in (
                        "wq", "wk", "wv", "wo", "w_up",
                        "w_gate", "w_down", "g_attn", "g_ffn",
                    )
                }
            )

        def phi(o):
            tensors = effective_tensors(block, o)
            return sum(float(np.sum(c[n] * tensors[n])) for n in names)

        grads = effective_grads_to_params(block, ost, _materialize(block, ost), upstream)
        return block, ost, phi, grads

    @staticmethod
    def _fd(ost, phi, mutate, h=1e-6):
        plus = copy.deepcopy(ost)
        mutate(plus, +h)
        minus = copy.deepcopy(ost)
        mutate(minus, -h)
        return (phi(plus) - phi(minus)) / (2.0 * h)

    @staticmethod
    def _close(fd, analytic):
        scale = max(abs(fd), abs(analytic), 1e-8)
        assert abs(fd - analytic) / scale <= 1e-5, (fd, analytic)

    def test_residual_rotation(self):
        _, ost, phi, grads = self._setup()
        e = Rng(5000).normal((SMALL.d_model, SMALL.d_model))
        fd = self._fd(ost, phi, lambda o, s: setattr(o.r_res, "value", o.r_res.value + s * e))
        self._close(fd, float(np.sum(grads.r_res * e)))

    def test_norm_slot_scales(self):
        _, ost, phi, grads = self._setup()
        for bi in range(SMALL.n_blocks):
            for pname, garr in (
                ("s_attn", grads.s_attn[bi]),
                ("s_ffn", grads.s_ffn[bi]),
                ("s_qk", grads.s_qk[bi]),
            ):
                v = Rng(6000 + bi * 10 + len(pname)).normal(garr.shape)

                def mutate(o, s, bi=bi, pname=pname, v=v):
                    p = getattr(o.blocks[bi], pname)
                    p.log_value = np.log(p.value + s * v)

                fd = self._fd(ost, phi, mutate)
                self._close(fd, float(np.sum(garr * v)))

    def test_head_rotations_and_scales(self):
        _, ost, phi, grads = self._setup()
        hd = SMALL.head_dim
        for bi in range(SMALL.n_blocks):
            for h in range(SMALL.n_heads):
                e = Rng(7000 + bi * 10 + h).normal((hd, hd))

                def mut_r(o, s, bi=bi, h=h, e=e):
                    o.blocks[bi].r_ov[h].value = o.blocks[bi].r_ov[h].value + s * e

                self._close(
                    self._fd(ost, phi, mut_r), float(np.sum(grads.r_ov[bi][h] * e))
                )
                v = Rng(8000 + bi * 10 + h).normal((hd,))

                def mut_s(o, s, bi=bi, h=h, v=v):
                    p = o.blocks[bi].s_ov[h]
                    p.log_value = np.log(p.value + s * v)

                self._close(
                    self._fd(ost, phi, mut_s), float(np.sum(grads.s_ov[bi][h] * v))
                )


class TestEndToEndGrads:
    """backward_ost against FD of a top-k KL with a fixed, perturbed reference.

    The reference logits get additive noise so the loss is not sitting at
    its minimum (where every gradient would vanish and the comparison
    would be noise against noise).
    """

    def _setup(self):
        block = init_block(SMALL, Rng(101))
        ost = random_ost(SMALL, Rng(102))
        tokens = tokens_for(SMALL, 303)
        z_plain = forward(block, tokens).logits.reshape(-1, SMALL.vocab)
        z_ref = z_plain + 0.5 * Rng(404).normal(z_plain.shape)

        def loss_of(o):
            z = forward(block, tokens, ost=o).logits.reshape(-1, SMALL.vocab)
            return kl_top_with_grad(z_ref, z, SMALL.vocab).loss

        res = forward(block, tokens, ost=ost, want_cache=True)
        z_base = res.logits.reshape(-1, SMALL.vocab)
        dlog = kl_top_with_grad(z_ref, z_base, SMALL.vocab).grad
        grads = backward_ost(block, ost, res.cache, dlog.reshape(res.logits.shape))
        return ost, loss_of, grads

    def test_residual_rotation_direction(self):
        ost, loss_of, grads = self._setup()
        e = Rng(5001).normal((SMALL.d_model, SMALL.d_model))
        h = 1e-6
        plus = copy.deepcopy(ost)
        plus.r_res.value = plus.r_res.value + h * e
        minus = copy.deepcopy(ost)
        minus.r_res.value = minus.r_res.value - h * e
        fd = (loss_of(plus) - loss_of(minus)) / (2.0 * h)
        analytic = float(np.sum(grads.r_res * e))
        assert abs(fd - analytic) / max(abs(fd), abs(analytic)) <= 1e-5

    def test_head_rotation_direction(self):
        ost, loss_of, grads = self._setup()
        hd = SMALL.head_dim
        h = 1e-6
        for bi in range(SMALL.n_blocks):
            e = Rng(5100 + bi).normal((hd, hd))
            plus = copy.deepcopy(ost)
            plus.blocks[bi].r_ov[1].value = plus.blocks[bi].r_ov[1].value + h * e
            minus = copy.deepcopy(ost)
            minus.blocks[bi].r_ov[1].value = minus.blocks[bi].r_ov[1].value - h * e
            fd = (loss_of(plus) - loss_of(minus)) / (2.0 * h)
            analytic = float(np.sum(grads.r_ov[bi][1] * e))
            assert abs(fd - analytic) / max(abs(fd), abs(analytic)) <= 1e-5

    def test_scale_gradients_vanish_without_quantization(self):
        # Every scale is paired with its exact inverse, so the full-precision
        # loss is constant along scale directions.
        ost, _, grads = self._setup()
        anchor = float(np.linalg.norm(grads.r_res))
        assert anchor > 1e-3
        for bi in range(SMALL.n_blocks):
            for g in (grads.s_attn[bi], grads.s_ffn[bi], grads.s_qk[bi], *grads.s_ov[bi]):
                assert float(np.linalg.norm(g)) <= 1e-12 * anchor

    def test_scale_gradients_wake_up_under_quantization(self):
        block = init_block(SMALL, Rng(101), outliers=True)
        ost = random_ost(SMALL, Rng(102))
        tokens = tokens_for(SMALL, 303)
        z_ref = forward(block, tokens).logits.reshape(-1, SMALL.vocab)
        res = forward(block, tokens, ost=ost, quant=rtn_config(4, 4, 4), want_cache=True)
        z_q = res.logits.reshape(-1, SMALL.vocab)
        dlog = kl_top_with_grad(z_ref, z_q, SMALL.vocab).grad
        grads = backward_ost(block, ost, res.cache, dlog.reshape(res.logits.shape))
        assert float(np.linalg.norm(grads.s_attn[0])) > 1e-6
        for g in [grads.r_res] + grads.s_attn + grads.s_ffn + grads.s_qk:
            assert np.isfinite(g).all()

    def test_cache_must_carry_transforms(self):
        block = init_block(SMALL, Rng(105))
        tokens = tokens_for(SMALL)
        res = forward(block, tokens, want_cache=True)
        with pytest.raises(ValidationError):
            backward_ost(block, identity_ost(SMALL), res.cache, np.ones_like(res.logits))
