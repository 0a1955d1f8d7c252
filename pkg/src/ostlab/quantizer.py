"""Uniform affine fake quantization.

simulate_quantize follows the usual integer grid construction: a group
of values is mapped through ``clamp(round(x / s) + zp, qmin, qmax)`` and
immediately dequantized. Rounding is half-to-even throughout. Asymmetric
groups extend their range to include zero so the zero point always lands
inside the integer range and round-trip error stays bounded by s/2 even
for one-sided data; symmetric groups use the full-magnitude range with a
zero zero-point.

A group whose extended range is empty (an all-zero group) quantizes with
scale 1 and zero point 0, which reproduces the constant exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

PER_TENSOR = "per_tensor"
PER_CHANNEL = "per_channel"
PER_TOKEN = "per_token"

SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"

_GRANULARITIES = (PER_TENSOR, PER_CHANNEL, PER_TOKEN)
_MODES = (SYMMETRIC, ASYMMETRIC)


@dataclass(frozen=True)
class QuantSpec:
    """Bit width, symmetry mode, and grouping for one tensor role."""

    bits: int
    mode: str = SYMMETRIC
    granularity: str = PER_TENSOR
    axis: int = 0

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValidationError(f"bits must be in [2, 8], got {self.bits}")
        if self.mode not in _MODES:
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.granularity not in _GRANULARITIES:
            raise ValidationError(f"unknown granularity {self.granularity!r}")
        if self.granularity != PER_TENSOR and self.axis not in (0, 1):
            raise ValidationError(f"group axis must be 0 or 1, got {self.axis}")


@dataclass
class QuantParams:
    """Realized grid for one tensor: per-group scales and zero points."""

    scales: np.ndarray
    zero_points: np.ndarray
    qmin: int
    qmax: int
    granularity: str
    axis: int

    def __post_init__(self):
        if np.any(self.scales <= 0.0) or not np.isfinite(self.scales).all():
            raise ValidationError("scales must be positive and finite")
        if np.any(self.zero_points < self.qmin) or np.any(self.zero_points > self.qmax):
            raise ValidationError("zero points must lie inside [qmin, qmax]")


def _grouped_view(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Return x reshaped to (groups, elements_per_group)."""
    if x.size == 0:
        raise ValidationError("cannot quantize an empty tensor")
    if spec.granularity == PER_TENSOR:
        return x.reshape(1, -1)
    if x.ndim != 2:
        raise ValidationError(
            f"{spec.granularity} quantization expects a 2-d tensor, got {x.ndim}-d"
        )
    return x if spec.axis == 0 else x.T


def compute_params(x: np.ndarray, spec: QuantSpec) -> QuantParams:
    """Derive scales and zero points for ``x`` under ``spec``."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValidationError("tensor contains non-finite values")
    groups = _grouped_view(x, spec)

    if spec.mode == SYMMETRIC:
        qmax = 2 ** (spec.bits - 1) - 1
        qmin = -qmax
        mags = np.abs(groups).max(axis=1)
        scales = mags / qmax
        # Subnormal magnitudes can underflow the division to zero; such a
        # group rounds to zero on any positive grid, so use unit scale.
        scales = np.where(scales > 0.0, scales, 1.0)
        zps = np.zeros(groups.shape[0], dtype=np.int64)
    else:
        qmin = 0
        qmax = 2**spec.bits - 1
        lo = np.minimum(groups.min(axis=1), 0.0)
        hi = np.maximum(groups.max(axis=1), 0.0)
        scales = (hi - lo) / qmax
        # Covers empty spans and subnormal spans whose division underflowed.
        degenerate = scales == 0.0
        scales = np.where(degenerate, 1.0, scales)
        zps = np.where(degenerate, 0, np.rint(-lo / scales)).astype(np.int64)
        zps = np.clip(zps, qmin, qmax)
    return QuantParams(scales, zps, qmin, qmax, spec.granularity, spec.axis)


def apply_params(x: np.ndarray, params: QuantParams):
    """Quantize-dequantize ``x`` on an existing grid.

    Returns ``(values, in_range)`` where ``in_range`` marks elements whose
    integer image did not hit the clamp; the straight-through backward
    passes gradient only there.
    """
    x = np.asarray(x, dtype=np.float64)
    if params.granularity == PER_TENSOR:
        s = params.scales[0]
        zp = params.zero_points[0]
    elif params.axis == 0:
        s = params.scales[:, None]
        zp = params.zero_points[:, None]
    else:
        s = params.scales[None, :]
        zp = params.zero_points[None, :]
    q = np.rint(x / s) + zp
    clipped = np.clip(q, params.qmin, params.qmax)
    return (clipped - zp) * s, q == clipped


def fake_quantize(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """One-shot quantize-dequantize with dynamically computed parameters."""
    values, _ = apply_params(x, compute_params(x, spec))
    return values


def fake_quantize_ste(x: np.ndarray, spec: QuantSpec):
    """fake_quantize variant that also returns the straight-through mask."""
    return apply_params(x, compute_params(x, spec))


_PASS_THROUGH_BITS = 16


def _role_spec(bits: int, role: str) -> "QuantSpec | None":
    if bits == _PASS_THROUGH_BITS:
        return None
    if role == "weight":
        return QuantSpec(bits, SYMMETRIC, PER_CHANNEL, axis=0)
    return QuantSpec(bits, ASYMMETRIC, PER_TOKEN, axis=0)


@dataclass(frozen=True)
class QuantConfig:
    """Forward-pass quantization policy for the toy model.

    ``None`` spec fields mean full precision (bit width 16 requests
    pass-through). ``kv_flat_tokens`` keeps K/V grouped per token over
    the flattened head dimension; switching it off groups per head and
    token instead.
    """

    wbits: int
    abits: int
    kvbits: int
    kv_flat_tokens: bool = True
    weight_spec: "QuantSpec | None" = field(init=False, default=None)
    act_spec: "QuantSpec | None" = field(init=False, default=None)
    kv_spec: "QuantSpec | None" = field(init=False, default=None)

    def __post_init__(self):
        for name, bits in (("wbits", self.wbits), ("abits", self.abits), ("kvbits", self.kvbits)):
            if bits != _PASS_THROUGH_BITS and not 2 <= bits <= 8:
                raise ValidationError(f"{name} must be in [2, 8] or 16, got {bits}")
        object.__setattr__(self, "weight_spec", _role_spec(self.wbits, "weight"))
        object.__setattr__(self, "act_spec", _role_spec(self.abits, "activation"))
        object.__setattr__(self, "kv_spec", _role_spec(self.kvbits, "kv"))

    @property
    def is_pass_through(self) -> bool:
        return self.weight_spec is None and self.act_spec is None and self.kv_spec is None


def rtn_config(wbits: int, abits: int, kvbits: int, kv_flat_tokens: bool = True) -> QuantConfig:
    """Round-to-nearest policy: per-channel symmetric weights, per-token
    asymmetric activations and caches, no transforms of any kind."""
    return QuantConfig(wbits, abits, kvbits, kv_flat_tokens)
