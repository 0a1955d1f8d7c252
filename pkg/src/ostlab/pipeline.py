"""End-to-end runs: build a toy stack, learn transforms on calibration
data, and report quantization quality against a round-to-nearest
baseline.

Artifacts written per run:

* ``loss.csv``: one row per iteration (iteration, loss, lr,
  ortho_residual).
* ``report.json``: configuration echo plus final metrics, byte-stable
  across repeated runs with the same configuration.
* ``params/``: learned tensors in the OSTT format plus a manifest.

Wall-clock time is printed to stdout only, never serialized, so report
files from identical runs compare equal.
"""
from __future__ import annotations

import dataclasses
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericalError, TokenFileError, ValidationError
from .losses import LossConfig
from .quantizer import QuantConfig
from .rng import Rng
from .stiefel import (
    ScaleParam,
    StiefelParam,
    adam_step_scale,
    cosine_lr,
    riemann_adam_step,
)
from .tensorio import read_tensor, write_tensor
from .toy_model import (
    BlockTransforms,
    OstParams,
    ToyBlock,
    ToyBlockConfig,
    backward_ost,
    collect_qsur,
    fold_rmsnorm,
    forward,
    init_block,
)
from .transforms import womi_init

_LOSS_KINDS = ("kl_top", "full_kl", "cross_entropy")
_VARIANTS = ("paper_literal", "exact_box")


@dataclass
class RunConfig:
    """Everything a run needs; loadable from TOML or JSON."""

    seed: int = 0
    # model shape
    d_model: int = 64
    n_heads: int = 4
    head_dim: int = 16
    ffn_dim: int = 128
    vocab: int = 256
    seq_len: int = 32
    n_blocks: int = 2
    rope_base: float = 10000.0
    outliers: bool = True
    # quantization
    wbits: int = 4
    abits: int = 4
    kvbits: int = 4
    kv_flat_tokens: bool = True
    # transforms
    kq_hadamard: bool = True
    ffn_hadamard: bool = True
    # optimization
    iterations: int = 150
    batch_size: int = 8
    calib_samples: int = 1000
    lr_orth: float = 2e-2
    lr_scale: float = 3e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_kind: str = "kl_top"
    loss_k: int = 1000
    loss_renormalize: bool = False
    # data
    zipf_exponent: float = 1.2
    token_file: "str | None" = None
    # reporting
    alpha: float = 0.99
    qsur_variant: str = "paper_literal"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.calib_samples < self.batch_size:
            raise ValidationError("calib_samples must cover at least one batch")
        for name in ("lr_orth", "lr_scale", "zipf_exponent"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("alpha must lie in (0, 1)")
        if self.qsur_variant not in _VARIANTS:
            raise ValidationError(f"qsur_variant must be one of {_VARIANTS}")
        if self.loss_kind not in _LOSS_KINDS:
            raise ValidationError(f"loss_kind must be one of {_LOSS_KINDS}")
        if self.loss_k < 1:
            raise ValidationError("loss_k must be >= 1")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValidationError("betas must lie in [0, 1)")

    def model_config(self) -> ToyBlockConfig:
        return ToyBlockConfig(
            d_model=self.d_model,
            n_heads=self.n_heads,
            head_dim=self.head_dim,
            ffn_dim=self.ffn_dim,
            vocab=self.vocab,
            seq_len=self.seq_len,
            n_blocks=self.n_blocks,
            rope_base=self.rope_base,
        )

    def quant_config(self) -> QuantConfig:
        return QuantConfig(
            wbits=self.wbits,
            abits=self.abits,
            kvbits=self.kvbits,
            kv_flat_tokens=self.kv_flat_tokens,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            kind=self.loss_kind, k=self.loss_k, renormalize=self.loss_renormalize
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ValidationError("run configuration must be a table/object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown configuration keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        text = path.read_bytes()
        if path.suffix == ".json":
            data = json.loads(text)
        elif path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # python < 3.11
                import tomli as tomllib
            data = tomllib.loads(text.decode("utf-8"))
        else:
            raise ValidationError(f"unsupported config extension: {path.suffix!r}")
        return cls.from_dict(data)


# ---------------------------------------------------------------------------
# Calibration data


def zipf_tokens(rng: Rng, vocab: int, shape, exponent: float) -> np.ndarray:
    """Token ids with a Zipf-like marginal: P(i) proportional to (i+1)^-s."""
    weights = (np.arange(1, vocab + 1, dtype=np.float64)) ** (-exponent)
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    u = rng.uniform(shape)
    return np.searchsorted(cdf, u, side="left").astype(np.int64)


def load_token_file(path, vocab: int, seq_len: int) -> np.ndarray:
    """Whitespace-separated token ids, reshaped to full sequences.

    Raises ``TokenFileError`` carrying the 1-based line number of the
    first malformed or out-of-range entry.
    """
    ids: "list[int]" = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise TokenFileError(f"cannot read token file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        for field in stripped.split():
            try:
                value = int(field)
            except ValueError:
                raise TokenFileError(
                    f"{path}: not an integer token id: {field!r}", line_number=lineno
                ) from None
            if not 0 <= value < vocab:
                raise TokenFileError(
                    f"{path}: token id {value} outside [0, {vocab})", line_number=lineno
                )
            ids.append(value)
    n_seq = len(ids) // seq_len
    if n_seq < 1:
        raise TokenFileError(
            f"{path}: {len(ids)} token ids cannot fill one sequence of {seq_len}"
        )
    return np.asarray(ids[: n_seq * seq_len], dtype=np.int64).reshape(n_seq, seq_len)


def calibration_tokens(config: RunConfig, rng: Rng) -> np.ndarray:
    if config.token_file is not None:
        return load_token_file(config.token_file, config.vocab, config.seq_len)
    return zipf_tokens(
        rng, config.vocab, (config.calib_samples, config.seq_len), config.zipf_exponent
    )


def _batch(tokens: np.ndarray, iteration: int, batch_size: int) -> np.ndarray:
    """Sequential batches with wraparound over the calibration set."""
    start = (iteration * batch_size) % tokens.shape[0]
    idx = np.arange(start, start + batch_size) % tokens.shape[0]
    return tokens[idx]


# ---------------------------------------------------------------------------
# Transform initialization


def womi_ost(block: ToyBlock, config: RunConfig) -> OstParams:
    """Weight-informed starting point for the learned transforms.

    The residual rotation whitens-then-Hadamards the row space of every
    projection reading the stream; each head's value/output rotation does
    the same for the matrices flanking that head. Scales start at one.
    """
    cfg = block.config
    hd = cfg.head_dim
    rows = [block.head]
    for bw in block.blocks:
        rows.extend(
            [
                bw.wq * bw.g_attn[None, :],
                bw.wk * bw.g_attn[None, :],
                bw.wv * bw.g_attn[None, :],
                bw.w_up * bw.g_ffn[None, :],
                bw.w_gate * bw.g_ffn[None, :],
            ]
        )
    r_res = womi_init(np.vstack(rows))
    blocks = []
    for bw in block.blocks:
        r_ov = []
        for h in range(cfg.n_heads):
            sl = slice(h * hd, (h + 1) * hd)
            stacked = np.vstack([bw.wo[:, sl], bw.wv[sl, :].T])
            r_ov.append(StiefelParam(womi_init(stacked)))
        blocks.append(
            BlockTransforms(
                s_attn=ScaleParam.identity(cfg.d_model),
                s_ffn=ScaleParam.identity(cfg.d_model),
                r_ov=r_ov,
                s_ov=[ScaleParam.identity(hd) for _ in range(cfg.n_heads)],
                s_qk=ScaleParam.identity(hd // 2),
            )
        )
    return OstParams(
        r_res=StiefelParam(r_res),
        blocks=blocks,
        kq_hadamard=config.kq_hadamard,
        ffn_hadamard=config.ffn_hadamard,
    )


# ---------------------------------------------------------------------------
# Runs


@dataclass
class OptimizeResult:
    config: RunConfig
    block: ToyBlock
    ost: OstParams
    history: "list[tuple[int, float, float, float]]"
    mse_rtn: float
    mse_ost: float
    qsur_before: "dict[str, float]"
    qsur_after: "dict[str, float]"
    elapsed_seconds: float

    @property
    def initial_loss(self) -> float:
        return self.history[0][1]

    @property
    def final_loss(self) -> float:
        return self.history[-1][1]


def _flatten_logits(z: np.ndarray) -> np.ndarray:
    return z.reshape(-1, z.shape[-1])


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((a - b) ** 2))


def _apply_grads(ost: OstParams, grads, lr_o: float, lr_s: float, betas, eps: float):
    riemann_adam_step(ost.r_res, grads.r_res, lr_o, betas, eps)
    for bi, bt in enumerate(ost.blocks):
        adam_step_scale(bt.s_attn, grads.s_attn[bi], lr_s, betas, eps)
        adam_step_scale(bt.s_ffn, grads.s_ffn[bi], lr_s, betas, eps)
        adam_step_scale(bt.s_qk, grads.s_qk[bi], lr_s, betas, eps)
        for h, (r_ov, s_ov) in enumerate(zip(bt.r_ov, bt.s_ov)):
            riemann_adam_step(r_ov, grads.r_ov[bi][h], lr_o, betas, eps)
            adam_step_scale(s_ov, grads.s_ov[bi][h], lr_s, betas, eps)


def _qsur_summary(block, tokens, ost, config: RunConfig):
    reports = collect_qsur(
        block, tokens, ost, alpha=config.alpha, variant=config.qsur_variant
    )
    before = {}
    after = {}
    for name, (rep_b, rep_a) in sorted(reports.items()):
        before[name] = float(rep_b.qsur_normalized)
        after[name] = float(rep_a.qsur_normalized)
    return before, after


def optimize(config: RunConfig, progress=None) -> OptimizeResult:
    """Learn transforms that minimize the quantized-vs-reference loss.

    The stack's weights are untouched throughout; only the transform
    parameters move. Raises ``NumericalError`` if the loss or a gradient
    goes non-finite.
    """
    t0 = time.perf_counter()
    rng = Rng(config.seed)
    block = init_block(config.model_config(), rng.split(0), outliers=config.outliers)
    folded = fold_rmsnorm(block)
    tokens = calibration_tokens(config, rng.split(1))
    quant = config.quant_config()
    loss_cfg = config.loss_config()
    ost = womi_ost(folded, config)
    betas = (config.beta1, config.beta2)

    history = []
    for it in range(config.iterations):
        batch = _batch(tokens, it, config.batch_size)
        z_ref = _flatten_logits(forward(folded, batch).logits)
        res = forward(folded, batch, ost=ost, quant=quant, want_cache=True)
        loss, grad, _ = loss_cfg.evaluate(z_ref, _flatten_logits(res.logits))
        if not np.isfinite(loss):
            raise NumericalError(f"loss became non-finite at iteration {it}")
        grads = backward_ost(folded, ost, res.cache, grad.reshape(res.logits.shape))
        if not np.isfinite(grads.r_res).all():
            raise NumericalError(f"gradient became non-finite at iteration {it}")
        lr_o = cosine_lr(config.lr_orth, it, config.iterations)
        lr_s = cosine_lr(config.lr_scale, it, config.iterations)
        _apply_grads(ost, grads, lr_o, lr_s, betas, config.adam_eps)
        history.append((it, float(loss), lr_o, ost.max_orthogonality_residual()))
        if progress is not None:
            progress(it, float(loss))

    eval_tokens = tokens[: config.batch_size]
    z_fp = forward(folded, eval_tokens).logits
    z_rtn = forward(folded, eval_tokens, quant=quant).logits
    z_ost = forward(folded, eval_tokens, ost=ost, quant=quant).logits
    qsur_before, qsur_after = _qsur_summary(folded, eval_tokens, ost, config)
    return OptimizeResult(
        config=config,
        block=folded,
        ost=ost,
        history=history,
        mse_rtn=_mse(z_rtn, z_fp),
        mse_ost=_mse(z_ost, z_fp),
        qsur_before=qsur_before,
        qsur_after=qsur_after,
        elapsed_seconds=time.perf_counter() - t0,
    )


@dataclass
class BaselineResult:
    config: RunConfig
    mse_rtn: float
    qsur: "dict[str, float]"
    elapsed_seconds: float


def run_rtn_baseline(config: RunConfig) -> BaselineResult:
    """Round-to-nearest quantization of the untransformed stack."""
    t0 = time.perf_counter()
    rng = Rng(config.seed)
    block = init_block(config.model_config(), rng.split(0), outliers=config.outliers)
    folded = fold_rmsnorm(block)
    tokens = calibration_tokens(config, rng.split(1))
    eval_tokens = tokens[: config.batch_size]
    z_fp = forward(folded, eval_tokens).logits
    z_rtn = forward(folded, eval_tokens, quant=config.quant_config()).logits
    before, _ = _qsur_summary(folded, eval_tokens, None, config)
    return BaselineResult(
        config=config,
        mse_rtn=_mse(z_rtn, z_fp),
        qsur=before,
        elapsed_seconds=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# Artifacts


def save_params(ost: OstParams, directory) -> None:
    """Write every learned tensor as an OSTT file plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors: "dict[str, np.ndarray]" = {"r_res": ost.r_res.value}
    for bi, bt in enumerate(ost.blocks):
        tensors[f"block{bi}.s_attn"] = bt.s_attn.value
        tensors[f"block{bi}.s_ffn"] = bt.s_ffn.value
        tensors[f"block{bi}.s_qk"] = bt.s_qk.value
        for h in range(len(bt.r_ov)):
            tensors[f"block{bi}.head{h}.r_ov"] = bt.r_ov[h].value
            tensors[f"block{bi}.head{h}.s_ov"] = bt.s_ov[h].value
    files = {}
    for name in sorted(tensors):
        fname = name + ".ostt"
        write_tensor(directory / fname, tensors[name])
        files[name] = fname
    manifest = {
        "format": "ostt",
        "version": 1,
        "n_blocks": len(ost.blocks),
        "n_heads": len(ost.blocks[0].r_ov) if ost.blocks else 0,
        "kq_hadamard": ost.kq_hadamard,
        "ffn_hadamard": ost.ffn_hadamard,
        "tensors": files,
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_params(directory) -> OstParams:
    """Inverse of ``save_params``."""
    directory = Path(directory)
    with open(directory / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    files = manifest["tensors"]

    def tensor(name):
        return read_tensor(directory / files[name])

    blocks = []
    for bi in range(manifest["n_blocks"]):
        r_ov = []
        s_ov = []
        for h in range(manifest["n_heads"]):
            r_ov.append(StiefelParam(tensor(f"block{bi}.head{h}.r_ov")))
            s_ov.append(ScaleParam(np.log(tensor(f"block{bi}.head{h}.s_ov"))))
        blocks.append(
            BlockTransforms(
                s_attn=ScaleParam(np.log(tensor(f"block{bi}.s_attn"))),
                s_ffn=ScaleParam(np.log(tensor(f"block{bi}.s_ffn"))),
                r_ov=r_ov,
                s_ov=s_ov,
                s_qk=ScaleParam(np.log(tensor(f"block{bi}.s_qk"))),
            )
        )
    return OstParams(
        r_res=StiefelParam(tensor("r_res")),
        blocks=blocks,
        kq_hadamard=manifest["kq_hadamard"],
        ffn_hadamard=manifest["ffn_hadamard"],
    )


def write_loss_csv(history, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,loss,lr,ortho_residual\n")
        for it, loss, lr, residual in history:
            fh.write(f"{it},{loss!r},{lr!r},{residual!r}\n")


def _report_dict(result: OptimizeResult) -> dict:
    improvement = 0.0
    if result.mse_rtn > 0:
        improvement = 1.0 - result.mse_ost / result.mse_rtn
    before = result.qsur_before
    after = result.qsur_after
    return {
        "run": "optimize",
        "config": result.config.to_dict(),
        "iterations": len(result.history),
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "final_ortho_residual": result.history[-1][3],
        "mse_fp_vs_rtn": result.mse_rtn,
        "mse_fp_vs_transformed": result.mse_ost,
        "mse_improvement": improvement,
        "qsur_normalized": {
            name: {"before": before[name], "after": after[name]} for name in sorted(before)
        },
        "qsur_mean_before": float(np.mean(list(before.values()))),
        "qsur_mean_after": float(np.mean(list(after.values()))),
    }


def _baseline_dict(result: BaselineResult) -> dict:
    return {
        "run": "baseline",
        "config": result.config.to_dict(),
        "mse_fp_vs_rtn": result.mse_rtn,
        "qsur_normalized": {name: result.qsur[name] for name in sorted(result.qsur)},
        "qsur_mean": float(np.mean(list(result.qsur.values()))),
    }


def write_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_optimize(config: RunConfig, out_dir, stream=None) -> OptimizeResult:
    """Optimize and write loss.csv, report.json, and params/ to out_dir."""
    stream = stream if stream is not None else sys.stdout
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = optimize(config)
    write_loss_csv(result.history, out / "loss.csv")
    write_report(_report_dict(result), out / "report.json")
    save_params(result.ost, out / "params")
    print(
        f"optimize: loss {result.initial_loss:.6f} -> {result.final_loss:.6f}, "
        f"mse rtn {result.mse_rtn:.6e} -> transformed {result.mse_ost:.6e}",
        file=stream,
    )
    print(f"elapsed seconds: {result.elapsed_seconds:.2f}", file=stream)
    return result


def run_baseline(config: RunConfig, out_dir, stream=None) -> BaselineResult:
    """RTN baseline; writes report.json to out_dir."""
    stream = stream if stream is not None else sys.stdout
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run_rtn_baseline(config)
    write_report(_baseline_dict(result), out / "report.json")
    print(f"baseline: mse fp vs rtn {result.mse_rtn:.6e}", file=stream)
    print(f"elapsed seconds: {result.elapsed_seconds:.2f}", file=stream)
    return result


def demo_config(seed: int = 42) -> RunConfig:
    """A configuration small enough to finish in well under a minute."""
    return RunConfig(seed=seed, iterations=40, calib_samples=160, batch_size=8)


def run_demo(out_dir, seed: int = 42, stream=None) -> OptimizeResult:
    """Small end-to-end run; artifacts land under out_dir.

    Prints a summary table to the stream (stdout by default). Timings go
    only to the stream, never into the report files, so reruns with the
    same seed produce byte-identical artifacts.
    """
    stream = stream if stream is not None else sys.stdout
    config = demo_config(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = optimize(config)
    write_loss_csv(result.history, out / "loss.csv")
    report = _report_dict(result)
    write_report(report, out / "report.json")
    save_params(result.ost, out / "params")
    rows = [
        ("seed", str(seed)),
        ("iterations", str(report["iterations"])),
        ("initial loss", f"{report['initial_loss']:.6f}"),
        ("final loss", f"{report['final_loss']:.6f}"),
        ("mse fp vs rtn", f"{report['mse_fp_vs_rtn']:.6e}"),
        ("mse fp vs transformed", f"{report['mse_fp_vs_transformed']:.6e}"),
        ("mse improvement", f"{report['mse_improvement']:.4f}"),
        ("mean qsur before", f"{report['qsur_mean_before']:.4f}"),
        ("mean qsur after", f"{report['qsur_mean_after']:.4f}"),
        ("ortho residual", f"{report['final_ortho_residual']:.3e}"),
        ("artifacts", str(out)),
        ("elapsed seconds", f"{result.elapsed_seconds:.2f}"),
    ]
    width = max(len(name) for name, _ in rows)
    for name, value in rows:
        print(f"{name:<{width}}  {value}", file=stream)
    return result
