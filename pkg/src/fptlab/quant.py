"""Simulated uniform affine quantization.

Conventions
-----------
* Integer range: symmetric grids use ``[-2^(b-1), 2^(b-1) - 1]`` with zero
  point 0 and ``scale = max|x| / (2^(b-1) - 1)``; asymmetric grids use
  ``[0, 2^b - 1]``.
* Rounding is round-half-to-even (``torch.round``).
* Gradients through rounding use the straight-through estimator; the clamp
  passes no gradient to inputs outside the grid.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .numerics import _as_tensor, get_dtype, lp_norm

logger = logging.getLogger(__name__)

__all__ = [
    "INF",
    "QuantGrid",
    "RangeSettingSpec",
    "QuantError",
    "qrange",
    "fake_quantize",
    "set_range_lp",
    "minmax_grid",
    "dynamic_grid",
    "quant_error",
    "LpRangeSetter",
]

INF = math.inf
GRANULARITIES = ("tensor", "channel", "token")


def qrange(bits: int, symmetric: bool) -> tuple[int, int]:
    if symmetric:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2**bits - 1


@dataclass(frozen=True)
class QuantGrid:
    """One uniform affine quantizer.

    ``scale`` and ``zero_point`` are tensors already shaped to broadcast
    against the quantized tensor (a 0-d tensor for per-tensor grids, shape
    ``(1, ..., C)`` for per-channel grids on the last axis). For dynamic grids
    they are placeholders; the real values are computed per token at call
    time. ``clip_min``/``clip_max`` record the calibrated clipping range.
    """

    bits: int
    scale: torch.Tensor
    zero_point: torch.Tensor
    symmetric: bool = False
    dynamic: bool = False
    granularity: str = "tensor"
    clip_min: float = -INF
    clip_max: float = INF
    fallback: bool = False

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise ValueError(f"bits must be in [2, 16], got {self.bits}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if not self.dynamic:
            if not bool((self.scale > 0).all()):
                raise ValueError("grid scale must be strictly positive")
            lo, hi = qrange(self.bits, self.symmetric)
            if self.symmetric and bool((self.zero_point != 0).any()):
                raise ValueError("symmetric grids have zero_point 0")
            zp = torch.round(self.zero_point.detach())
            if bool((zp < lo).any()) or bool((zp > hi).any()):
                raise ValueError("zero_point outside the representable integer range")

    @property
    def qmin(self) -> int:
        return qrange(self.bits, self.symmetric)[0]

    @property
    def qmax(self) -> int:
        return qrange(self.bits, self.symmetric)[1]

    def levels(self) -> torch.Tensor:
        """All representable values (per-tensor static grids only)."""
        q = torch.arange(self.qmin, self.qmax + 1, dtype=self.scale.dtype)
        return (q - torch.round(self.zero_point)) * self.scale

    @classmethod
    def dynamic_spec(cls, bits: int, symmetric: bool = False) -> "QuantGrid":
        one = torch.ones((), dtype=get_dtype())
        return cls(bits, one, torch.zeros_like(one), symmetric, dynamic=True, granularity="token")

    def detach(self) -> "QuantGrid":
        return replace(self, scale=self.scale.detach().clone(), zero_point=self.zero_point.detach().clone())

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "symmetric": self.symmetric,
            "dynamic": self.dynamic,
            "granularity": self.granularity,
            "shape": list(self.scale.shape),
            "scale": [float(v) for v in self.scale.detach().reshape(-1)],
            "zero_point": [float(v) for v in torch.round(self.zero_point.detach()).reshape(-1)],
            "clip_min": _finite_or_sentinel(self.clip_min),
            "clip_max": _finite_or_sentinel(self.clip_max),
            "fallback": self.fallback,
        }

    @classmethod
    def from_dict(cls, d: dict, dtype=None) -> "QuantGrid":
        dtype = dtype or get_dtype()
        shape = tuple(d["shape"])
        return cls(
            bits=d["bits"],
            scale=torch.tensor(d["scale"], dtype=dtype).reshape(shape),
            zero_point=torch.tensor(d["zero_point"], dtype=dtype).reshape(shape),
            symmetric=d["symmetric"],
            dynamic=d["dynamic"],
            granularity=d["granularity"],
            clip_min=_sentinel_to_float(d["clip_min"]),
            clip_max=_sentinel_to_float(d["clip_max"]),
            fallback=d.get("fallback", False),
        )


def _finite_or_sentinel(v: float):
    if math.isinf(v):
        return "Infinity" if v > 0 else "-Infinity"
    return float(v)


def _sentinel_to_float(v) -> float:
    return float(v) if not isinstance(v, str) else float(v.replace("Infinity", "inf"))


@dataclass(frozen=True)
class RangeSettingSpec:
    """L_p range search. ``p = INF`` is plain minmax."""

    p: float = 3.0
    n_candidates: int = 128
    calibration_batches: int = 64
    min_fraction: float = 0.1

    def __post_init__(self):
        if not (self.p >= 1 or math.isinf(self.p)):
            raise ValueError("p must be >= 1 or INF")
        if self.n_candidates < 2:
            raise ValueError("n_candidates must be >= 2")

    def fractions(self) -> np.ndarray:
        return np.linspace(self.min_fraction, 1.0, self.n_candidates)


@dataclass(frozen=True)
class QuantError:
    lp: float
    p: float
    sqnr: float
    extra: dict = field(default_factory=dict)


class _RoundSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return torch.round(x)

    @staticmethod
    def backward(ctx, grad):
        return grad


def round_ste(x: torch.Tensor) -> torch.Tensor:
    return _RoundSTE.apply(x)


def _quantize(x, scale, zero_point, qmin, qmax):
    scale = scale.clamp_min(1e-12)
    zp = round_ste(zero_point)
    q = torch.clamp(round_ste(x / scale) + zp, qmin, qmax)
    return (q - zp) * scale


def _lp_error(x, scale, zero_point, qmin, qmax, p):
    # sum over dim 0 of |x - Q(x)|^p, computed in place (range search only)
    q = x / scale
    q.round_().add_(zero_point).clamp_(qmin, qmax).sub_(zero_point).mul_(scale)
    err = q.sub_(x).abs_()
    if p == 2:
        return err.mul_(err).sum(0)
    if p == 3:
        return (err * err).mul_(err).sum(0)
    return err.pow_(p).sum(0)


def fake_quantize(x: torch.Tensor, grid: QuantGrid) -> torch.Tensor:
    """Quantize then dequantize ``x`` on ``grid``."""
    x = _as_tensor(x)
    if not bool(torch.isfinite(x).all()):
        raise ValueError("fake_quantize received non-finite input")
    if grid.dynamic:
        dyn = dynamic_grid(x, grid.bits, grid.symmetric)
        return _quantize(x, dyn.scale, dyn.zero_point, dyn.qmin, dyn.qmax)
    return _quantize(x, grid.scale.to(x.dtype), grid.zero_point.to(x.dtype), grid.qmin, grid.qmax)


def _grid_from_range(lo, hi, bits, symmetric):
    """Scale/zero point (tensors) for clip ranges ``lo <= 0 <= hi``."""
    qmin, qmax = qrange(bits, symmetric)
    if symmetric:
        absmax = torch.maximum(-lo, hi)
        scale = absmax / qmax
        zp = torch.zeros_like(scale)
    else:
        scale = (hi - lo) / (qmax - qmin)
        zp = torch.clamp(torch.round(-lo / torch.where(scale > 0, scale, torch.ones_like(scale))), qmin, qmax)
    return scale, zp


def _channel_view(x: torch.Tensor, granularity: str, axis: int) -> torch.Tensor:
    # (n_samples, n_groups) view; per-tensor grids have one group
    if granularity == "tensor":
        return x.reshape(-1, 1)
    if granularity == "channel":
        return x.movedim(axis, -1).reshape(-1, x.shape[axis])
    raise ValueError("static range setting supports 'tensor' or 'channel' granularity")


def _broadcast_shape(x: torch.Tensor, granularity: str, axis: int) -> tuple[int, ...]:
    if granularity == "tensor":
        return ()
    shape = [1] * x.dim()
    shape[axis] = x.shape[axis]
    return tuple(shape)


def minmax_grid(samples, bits: int, symmetric: bool, granularity: str = "tensor", axis: int = -1) -> QuantGrid:
    return set_range_lp(samples, RangeSettingSpec(p=INF), bits, symmetric, granularity, axis)


def set_range_lp(
    samples,
    spec: RangeSettingSpec,
    bits: int,
    symmetric: bool,
    granularity: str = "tensor",
    axis: int = -1,
) -> QuantGrid:
    """Pick the clipping range minimizing ``sum |x - Q(x)|^p``.

    Candidate ranges are ``spec.n_candidates`` evenly spaced fractions of the
    minmax range in ``[spec.min_fraction, 1]``; every candidate is evaluated
    exactly. The search is done independently per channel for per-channel
    grids. All-zero input yields a unit-scale grid with ``fallback=True``.
    """
    x = _as_tensor(samples).detach()
    if x.numel() == 0:
        raise ValueError("set_range_lp needs at least one sample")
    if not bool(torch.isfinite(x).all()):
        raise ValueError("set_range_lp received non-finite samples")
    view = _channel_view(x, granularity, axis)
    bshape = _broadcast_shape(x, granularity, axis)
    lo_full = view.min(0).values.clamp(max=0)
    hi_full = view.max(0).values.clamp(min=0)
    dead = (hi_full - lo_full) == 0
    if bool(dead.all()):
        logger.warning("set_range_lp: all-zero samples, falling back to a unit-scale grid")
        zp = torch.zeros(bshape, dtype=x.dtype)
        return QuantGrid(bits, torch.ones(bshape, dtype=x.dtype), zp, symmetric, False, granularity, 0.0, 0.0, True)
    qmin, qmax = qrange(bits, symmetric)

    def grid_for(frac):
        lo, hi = lo_full * frac, hi_full * frac
        scale, zp = _grid_from_range(lo, hi, bits, symmetric)
        scale = torch.where(dead, torch.ones_like(scale), scale)
        return lo, hi, scale, zp

    if math.isinf(spec.p):
        best = grid_for(1.0)
    else:
        best, best_loss = None, None
        for frac in spec.fractions():
            cand = grid_for(float(frac))
            loss = _lp_error(view, cand[2], cand[3], qmin, qmax, spec.p)
            if best is None:
                best, best_loss = list(cand), loss
                continue
            better = loss < best_loss
            best_loss = torch.where(better, loss, best_loss)
            for i in range(4):
                best[i] = torch.where(better, cand[i], best[i])
    lo, hi, scale, zp = best
    return QuantGrid(
        bits=bits,
        scale=scale.reshape(bshape),
        zero_point=zp.reshape(bshape),
        symmetric=symmetric,
        granularity=granularity,
        clip_min=float(lo.min()),
        clip_max=float(hi.max()),
    )


def dynamic_grid(x_token, bits: int, symmetric: bool) -> QuantGrid:
    """Per-token minmax grid over the last dimension (computed at run time)."""
    x = _as_tensor(x_token)
    lo = x.min(-1, keepdim=True).values.clamp(max=0)
    hi = x.max(-1, keepdim=True).values.clamp(min=0)
    scale, zp = _grid_from_range(lo, hi, bits, symmetric)
    scale = torch.where(scale > 0, scale, torch.ones_like(scale))
    return QuantGrid(
        bits, scale, zp, symmetric, dynamic=False, granularity="token",
        clip_min=float(lo.min()), clip_max=float(hi.max()),
    )


def quant_error(x, grid: QuantGrid, p: float = 2.0) -> QuantError:
    """L_p norm of the quantization residual plus SQNR in dB (``inf`` when lossless)."""
    x = _as_tensor(x).detach()
    err = x - fake_quantize(x, grid.detach() if not grid.dynamic else grid)
    lp = float(lp_norm(err, p))
    noise = float(err.pow(2).sum())
    signal = float(x.pow(2).sum())
    sqnr = INF if noise == 0.0 else 10.0 * math.log10(signal / noise) if signal > 0 else -INF
    return QuantError(lp=lp, p=p, sqnr=sqnr)


class LpRangeSetter(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` calibrates a grid, ``transform`` fake-quantizes.

    >>> import torch
    >>> rs = LpRangeSetter(bits=8, p=3.0).fit(torch.linspace(-1, 1, 101))
    >>> rs.grid_.bits
    8
    """

    def __init__(self, bits=4, p=3.0, n_candidates=128, symmetric=False, granularity="tensor", axis=-1):
        self.bits = bits
        self.p = p
        self.n_candidates = n_candidates
        self.symmetric = symmetric
        self.granularity = granularity
        self.axis = axis

    def fit(self, X, y=None):
        spec = RangeSettingSpec(p=self.p, n_candidates=self.n_candidates)
        self.grid_ = set_range_lp(X, spec, self.bits, self.symmetric, self.granularity, self.axis)
        return self

    def transform(self, X):
        check_is_fitted(self, "grid_")
        return fake_quantize(_as_tensor(X), self.grid_)

    def score(self, X, y=None):
        """Negative L_p quantization error (higher is better)."""
        check_is_fitted(self, "grid_")
        return -quant_error(X, self.grid_, self.p if not math.isinf(self.p) else 2.0).lp
