"""A small LLaMA-style transformer stack with learnable pre-quantization
transforms.

Architecture per block: RMSNorm -> multi-head attention with rotary
position embeddings -> RMSNorm -> SwiGLU feed-forward, with residual
connections around both halves and a linear output head after the last
block. Everything is float64 numpy; weights are stored output-major
(oc x ic), so a linear layer computes ``x @ W.T``.

The transform set attached to a stack (``OstParams``) consists of a
rotation of the residual stream shared by every block, per-block scale
vectors applied at the two RMSNorm outputs, a per-head rotation/scale
pair between the value and output projections, a pairwise-constant
query/key scale that commutes with the rotary embedding, and fixed
Hadamard rotations (applied online to post-ROPE queries/keys, and to the
FFN hidden activation with the inverse pre-fused into the down
projection). Because every transform is paired with its inverse, the
function computed by the network is unchanged until fake quantization is
switched on; quantization then sees the reshaped tensors.

``forward`` evaluates the (optionally quantized, optionally transformed)
stack; ``backward_ost`` computes exact gradients of a logits loss with
respect to the transform parameters only, treating quantization
round/clamp as straight-through. The block weights themselves are never
trained.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .linalg import hadamard
from .qsur import QsurReport, fit_gaussian, qsur
from .quantizer import QuantConfig, apply_params, compute_params
from .rng import Rng
from .stiefel import ScaleParam, StiefelParam
from .transforms import random_orthogonal

_OUTLIER_SCALE = 20.0


@dataclass(frozen=True)
class ToyBlockConfig:
    """Shape hyperparameters for the stack."""

    d_model: int = 64
    n_heads: int = 4
    head_dim: int = 16
    ffn_dim: int = 128
    vocab: int = 256
    seq_len: int = 32
    n_blocks: int = 2
    rope_base: float = 10000.0
    rms_eps: float = 1e-6

    def __post_init__(self):
        if self.d_model != self.n_heads * self.head_dim:
            raise ValidationError(
                f"d_model ({self.d_model}) must equal n_heads * head_dim "
                f"({self.n_heads} * {self.head_dim})"
            )
        if self.head_dim % 2 != 0:
            raise ValidationError("head_dim must be even for rotary embeddings")
        for name in ("d_model", "n_heads", "head_dim", "ffn_dim", "vocab", "seq_len", "n_blocks"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.vocab < 2:
            raise ValidationError("vocab must be >= 2")
        if not self.rope_base > 1.0:
            raise ValidationError("rope_base must exceed 1")


@dataclass
class BlockWeights:
    """One block's parameters, all output-major."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_gate: np.ndarray
    w_down: np.ndarray
    g_attn: np.ndarray
    g_ffn: np.ndarray

    def copy(self) -> "BlockWeights":
        return BlockWeights(*(getattr(self, f).copy() for f in _BLOCK_FIELDS))


_BLOCK_FIELDS = ("wq", "wk", "wv", "wo", "w_up", "w_gate", "w_down", "g_attn", "g_ffn")


@dataclass
class ToyBlock:
    """The full toy stack: embedding, n_blocks transformer blocks, head.

    ``kq_hadamard`` / ``ffn_hadamard`` record which online Hadamard
    rotations the forward pass must apply; they are set on fused stacks
    whose weights already absorbed the matching inverse.
    """

    config: ToyBlockConfig
    embedding: np.ndarray
    blocks: "list[BlockWeights]"
    head: np.ndarray
    kq_hadamard: bool = False
    ffn_hadamard: bool = False

    def copy(self) -> "ToyBlock":
        return ToyBlock(
            self.config,
            self.embedding.copy(),
            [b.copy() for b in self.blocks],
            self.head.copy(),
            self.kq_hadamard,
            self.ffn_hadamard,
        )


def init_block(config: ToyBlockConfig, rng: Rng, outliers: bool = False) -> ToyBlock:
    """Gaussian-initialized stack; optional heavy-tail channel injection.

    With ``outliers`` the init mimics the two structures that make trained
    transformers hard to quantize: a few residual-stream channels carry
    20x energy in the embedding (the residual path preserves them through
    every block), and every stream-reading projection shares a bounded
    lognormal per-column spread, so weight rows are anisotropic in a
    correlated pattern that a common rotation can flatten. Writer rows
    stay at unit scale: quantization error there is orthogonally
    invariant, so scaling them would only add noise no transform can
    remove.
    """
    d, f, v = config.d_model, config.ffn_dim, config.vocab
    embedding = rng.normal((v, d))
    blocks = []
    for _ in range(config.n_blocks):
        blocks.append(
            BlockWeights(
                wq=rng.normal((d, d)) / np.sqrt(d),
                wk=rng.normal((d, d)) / np.sqrt(d),
                wv=rng.normal((d, d)) / np.sqrt(d),
                wo=rng.normal((d, d)) / np.sqrt(d),
                w_up=rng.normal((f, d)) / np.sqrt(d),
                w_gate=rng.normal((f, d)) / np.sqrt(d),
                w_down=rng.normal((d, f)) / np.sqrt(f),
                g_attn=np.exp(0.05 * rng.normal((d,))),
                g_ffn=np.exp(0.05 * rng.normal((d,))),
            )
        )
    head = rng.normal((v, d)) / np.sqrt(d)
    block = ToyBlock(config, embedding, blocks, head)
    if outliers:
        count = max(1, d // 16)
        channels = np.argsort(rng.uniform((d,)))[:count]
        col_spread = np.exp(0.6 * np.clip(rng.normal((d,)), -1.5, 1.5))
        col_spread /= np.exp(np.mean(np.log(col_spread)))
        col_spread[channels] = 1.0
        block.embedding[:, channels] *= _OUTLIER_SCALE
        block.head *= col_spread[None, :]
        for bw in block.blocks:
            for w in (bw.wq, bw.wk, bw.wv, bw.w_up, bw.w_gate):
                w *= col_spread[None, :]
    return block


def fold_rmsnorm(block: ToyBlock) -> ToyBlock:
    """Fold RMSNorm weight vectors into the following projections.

    Returns a stack computing the same function whose norm weights are
    all ones, the starting point required by ``fuse``.
    """
    folded = block.copy()
    for bw in folded.blocks:
        bw.wq = bw.wq * bw.g_attn[None, :]
        bw.wk = bw.wk * bw.g_attn[None, :]
        bw.wv = bw.wv * bw.g_attn[None, :]
        bw.w_up = bw.w_up * bw.g_ffn[None, :]
        bw.w_gate = bw.w_gate * bw.g_ffn[None, :]
        bw.g_attn = np.ones_like(bw.g_attn)
        bw.g_ffn = np.ones_like(bw.g_ffn)
    return folded


# ---------------------------------------------------------------------------
# Transform parameters


@dataclass
class BlockTransforms:
    """Learnable transforms of one block."""

    s_attn: ScaleParam
    s_ffn: ScaleParam
    r_ov: "list[StiefelParam]"
    s_ov: "list[ScaleParam]"
    s_qk: ScaleParam  # head_dim/2 free values, broadcast over rotation pairs


@dataclass
class OstParams:
    """All transforms attached to a stack.

    The residual rotation is shared by every block; the Hadamard flags
    select the fixed online rotations.
    """

    r_res: StiefelParam
    blocks: "list[BlockTransforms]"
    kq_hadamard: bool = False
    ffn_hadamard: bool = False

    def stiefel_params(self) -> "list[StiefelParam]":
        out = [self.r_res]
        for bt in self.blocks:
            out.extend(bt.r_ov)
        return out

    def scale_params(self) -> "list[ScaleParam]":
        out = []
        for bt in self.blocks:
            out.extend([bt.s_attn, bt.s_ffn, bt.s_qk])
            out.extend(bt.s_ov)
        return out

    def max_orthogonality_residual(self) -> float:
        worst = 0.0
        for p in self.stiefel_params():
            res = np.abs(p.value.T @ p.value - np.eye(p.value.shape[0])).max()
            worst = max(worst, float(res))
        return worst


def _block_transforms_identity(config: ToyBlockConfig) -> BlockTransforms:
    d, h, hd = config.d_model, config.n_heads, config.head_dim
    return BlockTransforms(
        s_attn=ScaleParam.identity(d),
        s_ffn=ScaleParam.identity(d),
        r_ov=[StiefelParam(np.eye(hd)) for _ in range(h)],
        s_ov=[ScaleParam.identity(hd) for _ in range(h)],
        s_qk=ScaleParam.identity(hd // 2),
    )


def identity_ost(
    config: ToyBlockConfig, kq_hadamard: bool = False, ffn_hadamard: bool = False
) -> OstParams:
    """Identity transforms: the attached stack computes exactly what the
    plain stack computes, Hadamard flags aside."""
    return OstParams(
        r_res=StiefelParam(np.eye(config.d_model)),
        blocks=[_block_transforms_identity(config) for _ in range(config.n_blocks)],
        kq_hadamard=kq_hadamard,
        ffn_hadamard=ffn_hadamard,
    )


def random_ost(
    config: ToyBlockConfig,
    rng: Rng,
    kq_hadamard: bool = True,
    ffn_hadamard: bool = True,
    scale_spread: float = 0.3,
) -> OstParams:
    """Random valid transforms for invariance and gradient testing."""
    d, h, hd = config.d_model, config.n_heads, config.head_dim
    blocks = []
    for _ in range(config.n_blocks):
        blocks.append(
            BlockTransforms(
                s_attn=ScaleParam(scale_spread * rng.normal((d,))),
                s_ffn=ScaleParam(scale_spread * rng.normal((d,))),
                r_ov=[StiefelParam(random_orthogonal(hd, rng)) for _ in range(h)],
                s_ov=[ScaleParam(scale_spread * rng.normal((hd,))) for _ in range(h)],
                s_qk=ScaleParam(scale_spread * rng.normal((hd // 2,))),
            )
        )
    return OstParams(
        r_res=StiefelParam(random_orthogonal(d, rng)),
        blocks=blocks,
        kq_hadamard=kq_hadamard,
        ffn_hadamard=ffn_hadamard,
    )


def _realized_qk_scale(bt: BlockTransforms, config: ToyBlockConfig) -> np.ndarray:
    """Per-coordinate query scale: pair-constant within each rotation pair,
    tiled across heads."""
    per_head = np.repeat(bt.s_qk.value, 2)
    return np.tile(per_head, config.n_heads)


# ---------------------------------------------------------------------------
# Effective (transform-absorbed) weights


@dataclass
class _EffBlock:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_gate: np.ndarray
    w_down: np.ndarray
    g_attn: np.ndarray
    g_ffn: np.ndarray
    aux: dict = field(default_factory=dict)


@dataclass
class _EffModel:
    embedding: np.ndarray
    head: np.ndarray
    blocks: "list[_EffBlock]"
    kq_hadamard: bool
    ffn_hadamard: bool
    h_head: "np.ndarray | None"
    h_ffn: "np.ndarray | None"


def _materialize(block: ToyBlock, ost: "OstParams | None") -> _EffModel:
    cfg = block.config
    if ost is None:
        kq_flag, ffn_flag = block.kq_hadamard, block.ffn_hadamard
        eff_blocks = [
            _EffBlock(bw.wq, bw.wk, bw.wv, bw.wo, bw.w_up, bw.w_gate, bw.w_down, bw.g_attn, bw.g_ffn)
            for bw in block.blocks
        ]
        return _EffModel(
            block.embedding,
            block.head,
            eff_blocks,
            kq_flag,
            ffn_flag,
            hadamard(cfg.head_dim) if kq_flag else None,
            hadamard(cfg.ffn_dim) if ffn_flag else None,
        )

    if len(ost.blocks) != cfg.n_blocks:
        raise ValidationError(
            f"transform set covers {len(ost.blocks)} blocks, model has {cfg.n_blocks}"
        )
    if block.kq_hadamard or block.ffn_hadamard:
        # A fused stack's weights already absorbed the inverse of its online
        # rotations; composing further transforms on top would silently drop
        # them. Transforms are defined relative to a plain stack.
        raise ValidationError(
            "stack already applies online rotations; transforms compose only with a plain stack"
        )
    r = ost.r_res.value
    h_ffn = hadamard(cfg.ffn_dim) if ost.ffn_hadamard else None
    hd = cfg.head_dim
    eff_blocks = []
    for bw, bt in zip(block.blocks, ost.blocks):
        sa = bt.s_attn.value
        sf = bt.s_ffn.value
        sqk = _realized_qk_scale(bt, cfg)
        # Original norm weights fold into the consuming projections, which
        # frees the norm slot for the learned scale.
        wq_f = bw.wq * bw.g_attn[None, :]
        wk_f = bw.wk * bw.g_attn[None, :]
        wv_f = bw.wv * bw.g_attn[None, :]
        wup_f = bw.w_up * bw.g_ffn[None, :]
        wgate_f = bw.w_gate * bw.g_ffn[None, :]

        a_q = wq_f @ r
        a_k = wk_f @ r
        a_v = wv_f @ r
        a_up = wup_f @ r
        a_gate = wgate_f @ r

        wv_eff = a_v / sa[None, :]
        for h in range(cfg.n_heads):
            rows = slice(h * hd, (h + 1) * hd)
            left = bt.s_ov[h].value[:, None] * bt.r_ov[h].value.T
            wv_eff[rows] = left @ wv_eff[rows]

        wo_right = bw.wo.copy()
        for h in range(cfg.n_heads):
            cols = slice(h * hd, (h + 1) * hd)
            wo_right[:, cols] = wo_right[:, cols] @ (bt.r_ov[h].value / bt.s_ov[h].value[None, :])

        wdown_in = bw.w_down @ h_ffn if h_ffn is not None else bw.w_down

        eff_blocks.append(
            _EffBlock(
                wq=sqk[:, None] * a_q / sa[None, :],
                wk=(a_k / sa[None, :]) / sqk[:, None],
                wv=wv_eff,
                wo=r.T @ wo_right,
                w_up=a_up / sf[None, :],
                w_gate=a_gate / sf[None, :],
                w_down=r.T @ wdown_in,
                g_attn=sa,
                g_ffn=sf,
                aux={
                    "wq_f": wq_f,
                    "wk_f": wk_f,
                    "wv_f": wv_f,
                    "wup_f": wup_f,
                    "wgate_f": wgate_f,
                    "a_q": a_q,
                    "a_k": a_k,
                    "a_v": a_v,
                    "a_up": a_up,
                    "a_gate": a_gate,
                    "wo_right": wo_right,
                    "wdown_in": wdown_in,
                },
            )
        )
    return _EffModel(
        block.embedding @ r,
        block.head @ r,
        eff_blocks,
        ost.kq_hadamard,
        ost.ffn_hadamard,
        hadamard(hd) if ost.kq_hadamard else None,
        h_ffn,
    )


def fuse(block: ToyBlock, ost: OstParams) -> ToyBlock:
    """Bake the transforms into a new stack computing the same function.

    Requires the RMSNorm weights to be folded first (all ones); the
    learned scale vectors become the fused stack's norm weights, and the
    Hadamard flags carry over so the forward pass keeps applying the
    online rotations whose inverses now live inside the weights.
    """
    for i, bw in enumerate(block.blocks):
        for name in ("g_attn", "g_ffn"):
            if np.abs(getattr(bw, name) - 1.0).max() > 1e-12:
                raise ValidationError(
                    f"block {i} has unfolded RMSNorm weights ({name}); call fold_rmsnorm first"
                )
    eff = _materialize(block, ost)
    fused_blocks = [
        BlockWeights(
            wq=eb.wq.copy(),
            wk=eb.wk.copy(),
            wv=eb.wv.copy(),
            wo=eb.wo.copy(),
            w_up=eb.w_up.copy(),
            w_gate=eb.w_gate.copy(),
            w_down=eb.w_down.copy(),
            g_attn=eb.g_attn.copy(),
            g_ffn=eb.g_ffn.copy(),
        )
        for eb in eff.blocks
    ]
    return ToyBlock(
        block.config,
        eff.embedding.copy(),
        fused_blocks,
        eff.head.copy(),
        kq_hadamard=ost.kq_hadamard,
        ffn_hadamard=ost.ffn_hadamard,
    )


# ---------------------------------------------------------------------------
# Forward / backward


def rope_tables(seq_len: int, head_dim: int, base: float):
    """Cosine/sine tables for rotating adjacent coordinate pairs."""
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.arange(seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate pairs (x[2i], x[2i+1]) of the last axis by the position angle."""
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


def _rope_inverse(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    return rope_apply(x, cos, -sin)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _rms_forward(x: np.ndarray, eps: float):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv, inv


def _rms_backward(dy: np.ndarray, x: np.ndarray, inv: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    dot = np.sum(dy * x, axis=-1, keepdims=True)
    return inv * dy - (inv**3 / d) * dot * x


def _quant_tensor(x2d, spec):
    if spec is None:
        return x2d, None
    values, mask = apply_params(x2d, compute_params(x2d, spec))
    return values, mask


def _quant_rows(x, spec):
    """Per-token quantization of (..., D) by flattening leading axes."""
    if spec is None:
        return x, None
    flat = x.reshape(-1, x.shape[-1])
    values, mask = _quant_tensor(flat, spec)
    return values.reshape(x.shape), mask.reshape(x.shape)


def _quant_kv(x, spec, flat_tokens: bool):
    """Quantize a (B, H, T, hd) cache tensor per token."""
    if spec is None:
        return x, None
    b, h, t, hd = x.shape
    if flat_tokens:
        moved = x.transpose(0, 2, 1, 3).reshape(b * t, h * hd)
        values, mask = _quant_tensor(moved, spec)
        back = lambda m: m.reshape(b, t, h, hd).transpose(0, 2, 1, 3)
        return back(values), back(mask)
    values, mask = _quant_tensor(x.reshape(b * h * t, hd), spec)
    return values.reshape(x.shape), mask.reshape(x.shape)


def _kv_rows(x, flat_tokens: bool):
    """The cache tensor as the row matrix its quantizer groups over."""
    b, h, t, hd = x.shape
    if flat_tokens:
        return x.transpose(0, 2, 1, 3).reshape(b * t, h * hd)
    return x.reshape(b * h * t, hd)


@dataclass
class ForwardResult:
    logits: np.ndarray
    taps: "dict[str, np.ndarray] | None" = None
    cache: "dict | None" = None


def _check_tokens(tokens, vocab: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ValidationError(f"tokens must be 1-d or 2-d, got shape {tokens.shape}")
    if tokens.size == 0:
        raise ValidationError("tokens must be non-empty")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValidationError("tokens must be integers")
    if tokens.min() < 0 or tokens.max() >= vocab:
        raise ValidationError(f"token ids must lie in [0, {vocab})")
    return tokens


def forward(
    block: ToyBlock,
    tokens,
    ost: "OstParams | None" = None,
    quant: "QuantConfig | None" = None,
    want_taps: bool = False,
    want_cache: bool = False,
) -> ForwardResult:
    """Run the stack, optionally with transforms inlined and fake quantization.

    With ``ost`` the computation routes every tensor through its
    transform and compensates in the weights, exactly as ``fuse`` would
    bake it; with ``quant`` the standard taps (linear weights and inputs,
    K/V caches) pass through fake quantization.
    """
    cfg = block.config
    tokens = _check_tokens(tokens, cfg.vocab)
    bsz, t = tokens.shape
    eff = _materialize(block, ost)
    w_spec = quant.weight_spec if quant is not None else None
    a_spec = quant.act_spec if quant is not None else None
    kv_spec = quant.kv_spec if quant is not None else None
    kv_flat = quant.kv_flat_tokens if quant is not None else True

    cos, sin = rope_tables(t, cfg.head_dim, cfg.rope_base)
    taps: "dict[str, np.ndarray] | None" = {} if want_taps else None
    cache: "dict | None" = (
        {"eff": eff, "tokens": tokens, "blocks": [], "rope": (cos, sin), "kv_flat": kv_flat}
        if want_cache
        else None
    )

    x = eff.embedding[tokens]
    scale = 1.0 / np.sqrt(cfg.head_dim)

    def heads(z):
        return z.reshape(bsz, t, cfg.n_heads, cfg.head_dim).transpose(0, 2, 1, 3)

    def unheads(z):
        return z.transpose(0, 2, 1, 3).reshape(bsz, t, cfg.d_model)

    causal = np.triu(np.full((t, t), -np.inf), k=1)

    for bi, eb in enumerate(eff.blocks):
        a_hat, inv_a = _rms_forward(x, cfg.rms_eps)
        a = a_hat * eb.g_attn
        if taps is not None:
            taps[f"block{bi}.attn_in"] = a.reshape(-1, cfg.d_model)
        a_q, mask_a = _quant_rows(a, a_spec)

        wq_hat, mq = _quant_tensor(eb.wq, w_spec)
        wk_hat, mk = _quant_tensor(eb.wk, w_spec)
        wv_hat, mv = _quant_tensor(eb.wv, w_spec)
        if taps is not None:
            taps[f"block{bi}.wq"] = eb.wq
            taps[f"block{bi}.wk"] = eb.wk
            taps[f"block{bi}.wv"] = eb.wv

        q = heads(a_q @ wq_hat.T)
        k = heads(a_q @ wk_hat.T)
        v = heads(a_q @ wv_hat.T)
        q = rope_apply(q, cos, sin)
        k = rope_apply(k, cos, sin)
        if eff.h_head is not None:
            q = q @ eff.h_head
            k = k @ eff.h_head

        if taps is not None:
            taps[f"block{bi}.k_cache"] = _kv_rows(k, kv_flat)
            taps[f"block{bi}.v_cache"] = _kv_rows(v, kv_flat)
        k_q, mask_k = _quant_kv(k, kv_spec, kv_flat)
        v_q, mask_v = _quant_kv(v, kv_spec, kv_flat)

        scores = q @ k_q.transpose(0, 1, 3, 2) * scale + causal
        shifted = scores - scores.max(axis=-1, keepdims=True)
        expd = np.exp(shifted)
        p = expd / expd.sum(axis=-1, keepdims=True)
        ctx = unheads(p @ v_q)

        if taps is not None:
            taps[f"block{bi}.o_in"] = ctx.reshape(-1, cfg.d_model)
        ctx_q, mask_ctx = _quant_rows(ctx, a_spec)
        wo_hat, mo = _quant_tensor(eb.wo, w_spec)
        if taps is not None:
            taps[f"block{bi}.wo"] = eb.wo
        x2 = x + ctx_q @ wo_hat.T

        b_hat, inv_f = _rms_forward(x2, cfg.rms_eps)
        h2 = b_hat * eb.g_ffn
        if taps is not None:
            taps[f"block{bi}.ffn_in"] = h2.reshape(-1, cfg.d_model)
        h2_q, mask_f = _quant_rows(h2, a_spec)

        wup_hat, mup = _quant_tensor(eb.w_up, w_spec)
        wgate_hat, mgate = _quant_tensor(eb.w_gate, w_spec)
        if taps is not None:
            taps[f"block{bi}.w_up"] = eb.w_up
            taps[f"block{bi}.w_gate"] = eb.w_gate
        up = h2_q @ wup_hat.T
        gate = h2_q @ wgate_hat.T
        sig = _sigmoid(gate)
        act = gate * sig * up
        if eff.h_ffn is not None:
            act = act @ eff.h_ffn
        if taps is not None:
            taps[f"block{bi}.down_in"] = act.reshape(-1, cfg.ffn_dim)
        act_q, mask_act = _quant_rows(act, a_spec)
        wdown_hat, mdown = _quant_tensor(eb.w_down, w_spec)
        if taps is not None:
            taps[f"block{bi}.w_down"] = eb.w_down
        x3 = x2 + act_q @ wdown_hat.T

        if cache is not None:
            cache["blocks"].append(
                {
                    "x": x,
                    "inv_a": inv_a,
                    "a_hat": a_hat,
                    "a_q": a_q,
                    "mask_a": mask_a,
                    "w_hats": (wq_hat, wk_hat, wv_hat, wo_hat, wup_hat, wgate_hat, wdown_hat),
                    "w_masks": (mq, mk, mv, mo, mup, mgate, mdown),
                    "q": q,
                    "k_q": k_q,
                    "v_q": v_q,
                    "mask_k": mask_k,
                    "mask_v": mask_v,
                    "p": p,
                    "ctx_q": ctx_q,
                    "mask_ctx": mask_ctx,
                    "x2": x2,
                    "inv_f": inv_f,
                    "b_hat": b_hat,
                    "h2_q": h2_q,
                    "mask_f": mask_f,
                    "up": up,
                    "gate": gate,
                    "sig": sig,
                    "act_q": act_q,
                    "mask_act": mask_act,
                }
            )
        x = x3

    if taps is not None:
        taps["head.in"] = x.reshape(-1, cfg.d_model)
        taps["head.w"] = eff.head
    y_q, mask_y = _quant_rows(x, a_spec)
    head_hat, mask_head_w = _quant_tensor(eff.head, w_spec)
    logits = y_q @ head_hat.T
    if cache is not None:
        cache["y_q"] = y_q
        cache["mask_y"] = mask_y
        cache["head_hat"] = head_hat
        cache["mask_head_w"] = mask_head_w
    return ForwardResult(logits, taps, cache)


@dataclass
class OstGrads:
    """Euclidean gradients for every transform parameter."""

    r_res: np.ndarray
    s_attn: "list[np.ndarray]"
    s_ffn: "list[np.ndarray]"
    r_ov: "list[list[np.ndarray]]"
    s_ov: "list[list[np.ndarray]]"
    s_qk: "list[np.ndarray]"


def _ste(grad, mask):
    return grad if mask is None else grad * mask


def effective_tensors(block: ToyBlock, ost: "OstParams | None") -> "dict[str, np.ndarray]":
    """Every transform-absorbed tensor by name, as ``fuse`` would bake it."""
    eff = _materialize(block, ost)
    out = {"embedding": eff.embedding, "head": eff.head}
    for bi, eb in enumerate(eff.blocks):
        for name in ("wq", "wk", "wv", "wo", "w_up", "w_gate", "w_down", "g_attn", "g_ffn"):
            out[f"block{bi}.{name}"] = getattr(eb, name)
    return out


def effective_grads_to_params(
    block: ToyBlock, ost: OstParams, eff: _EffModel, upstream: dict
) -> OstGrads:
    """Chain gradients on the effective tensors into the transform parameters.

    ``upstream`` holds one gradient array per effective tensor:
    ``embedding``, ``head``, and per block ``wq``, ``wk``, ``wv``, ``wo``,
    ``w_up``, ``w_gate``, ``w_down``, ``g_attn``, ``g_ffn`` (the last two
    are the gradients on the learned norm-slot scales). Each effective
    tensor is an explicit product of the raw weights and the transform
    parameters, so this is plain product-rule bookkeeping.
    """
    cfg = block.config
    hd = cfg.head_dim
    r = ost.r_res.value
    d_r = block.head.T @ upstream["head"] + block.embedding.T @ upstream["embedding"]
    grads = OstGrads(d_r, [], [], [], [], [])

    for bi in range(cfg.n_blocks):
        ub = upstream["blocks"][bi]
        bt = ost.blocks[bi]
        aux = eff.blocks[bi].aux
        sa = bt.s_attn.value
        sf = bt.s_ffn.value
        sqk = _realized_qk_scale(bt, cfg)
        g_q, g_k, g_v = ub["wq"], ub["wk"], ub["wv"]
        g_o, g_up, g_gate, g_down = ub["wo"], ub["w_up"], ub["w_gate"], ub["w_down"]
        d_sa = ub["g_attn"].copy()
        d_sf = ub["g_ffn"].copy()

        # wq_eff = diag(sqk) (wq_f R) diag(1/sa)
        g_q_scaled = g_q * sqk[:, None]
        d_r += aux["wq_f"].T @ (g_q_scaled / sa[None, :])
        d_sa -= np.einsum("ij,ij->j", aux["a_q"], g_q_scaled) / sa**2
        d_sqk_full = np.einsum("ij,ij->i", aux["a_q"] / sa[None, :], g_q)

        # wk_eff = diag(1/sqk) (wk_f R) diag(1/sa)
        g_k_scaled = g_k / sqk[:, None]
        d_r += aux["wk_f"].T @ (g_k_scaled / sa[None, :])
        d_sa -= np.einsum("ij,ij->j", aux["a_k"], g_k_scaled) / sa**2
        d_sqk_full -= np.einsum("ij,ij->i", (aux["a_k"] / sa[None, :]) / sqk[:, None] ** 2, g_k)

        # wv_eff = blockdiag(diag(s_ov) R_ov^T) (wv_f R) diag(1/sa)
        m_v = aux["a_v"] / sa[None, :]
        g_v_tilde = np.empty_like(g_v)
        d_rov_list = []
        d_sov_list = []
        for h in range(cfg.n_heads):
            rows = slice(h * hd, (h + 1) * hd)
            rov = bt.r_ov[h].value
            sov = bt.s_ov[h].value
            d_left = g_v[rows] @ m_v[rows].T
            d_rov = d_left.T * sov[None, :]
            d_sov = np.einsum("ij,ji->i", d_left, rov)
            left_t = rov * sov[None, :]  # (diag(sov) R_ov^T)^T = R_ov diag(sov)
            g_v_tilde[rows] = left_t @ g_v[rows]
            d_rov_list.append(d_rov)
            d_sov_list.append(d_sov)
        d_r += aux["wv_f"].T @ (g_v_tilde / sa[None, :])
        d_sa -= np.einsum("ij,ij->j", aux["a_v"], g_v_tilde) / sa**2

        # wo_eff = R^T (wo blockdiag(R_ov diag(1/s_ov)))
        d_r += aux["wo_right"] @ g_o.T
        d_n = r @ g_o
        for h in range(cfg.n_heads):
            cols = slice(h * hd, (h + 1) * hd)
            rov = bt.r_ov[h].value
            sov = bt.s_ov[h].value
            d_b = block.blocks[bi].wo[:, cols].T @ d_n[:, cols]
            d_rov_list[h] += d_b / sov[None, :]
            d_sov_list[h] -= np.einsum("ij,ij->j", rov, d_b) / sov**2

        # w{up,gate}_eff = (w_f R) diag(1/sf)
        d_r += aux["wup_f"].T @ (g_up / sf[None, :])
        d_sf -= np.einsum("ij,ij->j", aux["a_up"], g_up) / sf**2
        d_r += aux["wgate_f"].T @ (g_gate / sf[None, :])
        d_sf -= np.einsum("ij,ij->j", aux["a_gate"], g_gate) / sf**2

        # wdown_eff = R^T (w_down H_ffn)
        d_r += aux["wdown_in"] @ g_down.T

        grads.s_attn.append(d_sa)
        grads.s_ffn.append(d_sf)
        grads.r_ov.append(d_rov_list)
        grads.s_ov.append(d_sov_list)
        grads.s_qk.append(d_sqk_full.reshape(cfg.n_heads, hd // 2, 2).sum(axis=(0, 2)))

    grads.r_res = d_r
    return grads


def backward_ost(
    block: ToyBlock, ost: OstParams, cache: dict, dlogits: np.ndarray
) -> OstGrads:
    """Exact loss gradients with respect to the transform parameters.

    ``cache`` must come from a ``forward(..., ost=ost, want_cache=True)``
    call. Quantization nodes use the straight-through convention:
    identity inside the clamp range, zero outside, grid parameters
    treated as constants.
    """
    cfg = block.config
    eff: _EffModel = cache["eff"]
    if not eff.blocks or "wq_f" not in eff.blocks[0].aux:
        raise ValidationError("cache was built without transforms; rerun forward with ost")
    cos, sin = cache["rope"]
    tokens = cache["tokens"]
    bsz, t = tokens.shape
    hd = cfg.head_dim
    scale = 1.0 / np.sqrt(hd)

    def heads(z):
        return z.reshape(bsz, t, cfg.n_heads, hd).transpose(0, 2, 1, 3)

    def unheads(z):
        return z.transpose(0, 2, 1, 3).reshape(bsz, t, cfg.d_model)

    upstream: dict = {"blocks": [None] * cfg.n_blocks}

    # Head
    dy_q = dlogits @ cache["head_hat"]
    d_head_hat = np.einsum("btv,btd->vd", dlogits, cache["y_q"])
    upstream["head"] = _ste(d_head_hat, cache["mask_head_w"])
    dx = _ste(dy_q, cache["mask_y"])

    for bi in reversed(range(cfg.n_blocks)):
        bc = cache["blocks"][bi]
        bt = ost.blocks[bi]
        sa = bt.s_attn.value
        sf = bt.s_ffn.value
        wq_hat, wk_hat, wv_hat, wo_hat, wup_hat, wgate_hat, wdown_hat = bc["w_hats"]
        mq, mk, mv, mo, mup, mgate, mdown = bc["w_masks"]

        # FFN half
        dx3 = dx
        ddn = dx3
        dact_q = ddn @ wdown_hat
        d_wdown_hat = np.einsum("btd,btf->df", ddn, bc["act_q"])
        dact = _ste(dact_q, bc["mask_act"])
        if eff.h_ffn is not None:
            dact = dact @ eff.h_ffn.T
        dsg = dact * bc["up"]
        dup = dact * (bc["gate"] * bc["sig"])
        dgate = dsg * (bc["sig"] * (1.0 + bc["gate"] * (1.0 - bc["sig"])))
        dh2_q = dup @ wup_hat + dgate @ wgate_hat
        d_wup_hat = np.einsum("btf,btd->fd", dup, bc["h2_q"])
        d_wgate_hat = np.einsum("btf,btd->fd", dgate, bc["h2_q"])
        dh2 = _ste(dh2_q, bc["mask_f"])
        db_hat = dh2 * sf
        d_sf = np.einsum("btd,btd->d", dh2, bc["b_hat"])
        dx2 = dx3 + _rms_backward(db_hat, bc["x2"], bc["inv_f"])

        # Attention half
        do = dx2
        dctx_q = do @ wo_hat
        d_wo_hat = np.einsum("btd,bte->de", do, bc["ctx_q"])
        dctx = heads(_ste(dctx_q, bc["mask_ctx"]))
        dp = dctx @ bc["v_q"].transpose(0, 1, 3, 2)
        dv_q = bc["p"].transpose(0, 1, 3, 2) @ dctx
        dv = _ste(dv_q, bc["mask_v"])
        dscores = bc["p"] * (dp - np.sum(dp * bc["p"], axis=-1, keepdims=True))
        dq = dscores @ bc["k_q"] * scale
        dk_q = dscores.transpose(0, 1, 3, 2) @ bc["q"] * scale
        dk = _ste(dk_q, bc["mask_k"])
        if eff.h_head is not None:
            dq = dq @ eff.h_head.T
            dk = dk @ eff.h_head.T
        dq = _rope_inverse(dq, cos, sin)
        dk = _rope_inverse(dk, cos, sin)
        dq_flat = unheads(dq)
        dk_flat = unheads(dk)
        dv_flat = unheads(dv)

        da_q = dq_flat @ wq_hat + dk_flat @ wk_hat + dv_flat @ wv_hat
        d_wq_hat = np.einsum("btd,bte->de", dq_flat, bc["a_q"])
        d_wk_hat = np.einsum("btd,bte->de", dk_flat, bc["a_q"])
        d_wv_hat = np.einsum("btd,bte->de", dv_flat, bc["a_q"])
        da = _ste(da_q, bc["mask_a"])
        da_hat = da * sa
        d_sa = np.einsum("btd,btd->d", da, bc["a_hat"])
        dx = dx2 + _rms_backward(da_hat, bc["x"], bc["inv_a"])

        upstream["blocks"][bi] = {
            "wq": _ste(d_wq_hat, mq),
            "wk": _ste(d_wk_hat, mk),
            "wv": _ste(d_wv_hat, mv),
            "wo": _ste(d_wo_hat, mo),
            "w_up": _ste(d_wup_hat, mup),
            "w_gate": _ste(d_wgate_hat, mgate),
            "w_down": _ste(d_wdown_hat, mdown),
            "g_attn": d_sa,
            "g_ffn": d_sf,
        }

    # Embedding gather
    d_emb_eff = np.zeros_like(eff.embedding)
    np.add.at(d_emb_eff, tokens.reshape(-1), dx.reshape(-1, cfg.d_model))
    upstream["embedding"] = d_emb_eff
    return effective_grads_to_params(block, ost, eff, upstream)


def collect_qsur(
    block: ToyBlock,
    tokens,
    ost: "OstParams | None",
    alpha: float = 0.99,
    variant: str = "paper_literal",
) -> "dict[str, tuple[QsurReport, QsurReport]]":
    """Utilization of every quantized tap, before and after transforms.

    Taps are collected from full-precision forwards (quantization error
    would otherwise contaminate the fitted moments); "before" uses the
    plain stack, "after" routes through ``ost``.
    """
    before = forward(block, tokens, ost=None, want_taps=True).taps
    after = forward(block, tokens, ost=ost, want_taps=True).taps if ost is not None else before
    out = {}
    for name in before:
        rep_b = qsur(fit_gaussian(before[name], alpha), variant)
        rep_a = rep_b if after is before else qsur(fit_gaussian(after[name], alpha), variant)
        out[name] = (rep_b, rep_a)
    return out


def block_weight_digest(block: ToyBlock) -> str:
    """SHA-256 over all weight bytes; detects any mutation of theta."""
    import hashlib

    h = hashlib.sha256()
    h.update(np.ascontiguousarray(block.embedding).tobytes())
    for bw in block.blocks:
        for f in _BLOCK_FIELDS:
            h.update(np.ascontiguousarray(getattr(bw, f)).tobytes())
    h.update(np.ascontiguousarray(block.head).tobytes())
    return h.hexdigest()
