"""Dense linear algebra, structured transforms and parametrizations.

Matrices are ``torch.Tensor`` objects. Everything here is a pure function of
its inputs; randomness is always driven by an explicit integer seed through
numpy's PCG64 generator (``numpy.random.default_rng``), then converted to
torch, so results do not depend on torch's global RNG state.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

__all__ = [
    "get_dtype",
    "set_dtype",
    "precision",
    "rng",
    "matmul",
    "Rotation2",
    "SkewParam",
    "BlockHadamardPlan",
    "hadamard_apply",
    "hadamard_op_count",
    "cayley",
    "lp_norm",
    "finite_diff_grad",
    "random_orthogonal",
]

_DTYPES = {"float32": torch.float32, "float64": torch.float64}
_dtype = torch.float64


def get_dtype() -> torch.dtype:
    return _dtype


def set_dtype(name: str | torch.dtype) -> None:
    """Set the library-wide floating point precision (``float32``/``float64``)."""
    global _dtype
    if isinstance(name, torch.dtype):
        if name not in _DTYPES.values():
            raise ValueError(f"unsupported dtype {name}")
        _dtype = name
        return
    try:
        _dtype = _DTYPES[name]
    except KeyError:
        raise ValueError(f"unsupported precision {name!r}; use one of {sorted(_DTYPES)}") from None


@contextlib.contextmanager
def precision(name: str | torch.dtype) -> Iterator[None]:
    previous = _dtype
    set_dtype(name)
    try:
        yield
    finally:
        set_dtype(previous)


def rng(seed: int) -> np.random.Generator:
    """The one random generator used across the package (PCG64)."""
    return np.random.default_rng(seed)


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or _dtype)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product with a fixed, sequential accumulation order.

    ``c[i, j]`` is accumulated as ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``,
    each product rounded before the add, which makes the result independent of
    the BLAS backend. Leading batch dimensions of ``a`` are supported.
    """
    a = _as_tensor(a)
    b = _as_tensor(b)
    if b.dim() != 2 or a.dim() < 2:
        raise ValueError(f"matmul expects a (..., n, k) and b (k, m); got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: a has {a.shape[-1]} columns, b has {b.shape[0]} rows")
    out = a[..., :, 0:1] * b[0:1, :]
    for k in range(1, b.shape[0]):
        out = out + a[..., :, k : k + 1] * b[k : k + 1, :]
    return out


@dataclass(frozen=True)
class Rotation2:
    """Planar rotation acting on row vectors: ``[x, y] @ R`` turns by ``angle``."""

    angle: float

    def matrix(self, dtype=None) -> torch.Tensor:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return torch.tensor([[c, s], [-s, c]], dtype=dtype or _dtype)


@dataclass(frozen=True)
class SkewParam:
    """Strictly-lower-triangle entries (row-major) of a skew-symmetric matrix."""

    dim: int
    entries: torch.Tensor

    def __post_init__(self):
        expected = self.dim * (self.dim - 1) // 2
        if self.entries.shape != (expected,):
            raise ValueError(f"SkewParam of dim {self.dim} needs {expected} entries, got {tuple(self.entries.shape)}")

    @classmethod
    def zeros(cls, dim: int, dtype=None) -> "SkewParam":
        return cls(dim, torch.zeros(dim * (dim - 1) // 2, dtype=dtype or _dtype))

    def matrix(self) -> torch.Tensor:
        rows, cols = torch.tril_indices(self.dim, self.dim, offset=-1)
        a = torch.zeros(self.dim, self.dim, dtype=self.entries.dtype)
        a = a.index_put((rows, cols), self.entries)
        return a - a.T


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True)
class BlockHadamardPlan:
    """Block-diagonal Hadamard ``diag(H_b1, ..., H_bK)`` over ``dim`` channels."""

    dim: int
    blocks: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        bad = [b for b in self.blocks if not _is_pow2(b)]
        if bad:
            raise ValueError(f"block sizes must be powers of two, got {bad}")
        if sum(self.blocks) != self.dim:
            raise ValueError(f"blocks {self.blocks} sum to {sum(self.blocks)}, expected {self.dim}")

    @classmethod
    def for_dim(cls, dim: int) -> "BlockHadamardPlan":
        """Default decomposition.

        Powers of two use a single block; multiples of 256 use uniform
        256-wide blocks; anything else is split greedily, largest power of
        two first (``172 -> 128, 32, 8, 4``).
        """
        if dim < 1:
            raise ValueError("dim must be positive")
        if _is_pow2(dim):
            return cls(dim, (dim,))
        if dim % 256 == 0:
            return cls(dim, (256,) * (dim // 256))
        blocks, rest = [], dim
        while rest:
            b = 1 << (rest.bit_length() - 1)
            blocks.append(b)
            rest -= b
        return cls(dim, tuple(blocks))

    def matrix(self, dtype=None) -> torch.Tensor:
        """Dense realized matrix (Sylvester construction per block)."""
        dtype = dtype or _dtype
        out = torch.zeros(self.dim, self.dim, dtype=dtype)
        start = 0
        for b in self.blocks:
            h = torch.ones(1, 1, dtype=dtype)
            while h.shape[0] < b:
                h = torch.cat([torch.cat([h, h], 1), torch.cat([h, -h], 1)], 0)
            out[start : start + b, start : start + b] = h / math.sqrt(b)
            start += b
        return out


def _fwht(x: torch.Tensor) -> torch.Tensor:
    # in-register butterfly over the last dim (power of two), unnormalized
    n = x.shape[-1]
    lead = x.shape[:-1]
    h = 1
    while h < n:
        y = x.reshape(*lead, n // (2 * h), 2, h)
        a, b = y[..., 0, :], y[..., 1, :]
        x = torch.stack((a + b, a - b), dim=-2).reshape(*lead, n)
        h *= 2
    return x


def hadamard_apply(plan: BlockHadamardPlan, x: torch.Tensor) -> torch.Tensor:
    """Multiply every row of ``x`` (last dim) by the plan's block Hadamard."""
    x = _as_tensor(x)
    if x.shape[-1] != plan.dim:
        raise ValueError(f"last dim {x.shape[-1]} does not match plan dim {plan.dim}")
    parts, start = [], 0
    for b in plan.blocks:
        chunk = x[..., start : start + b]
        parts.append(chunk if b == 1 else _fwht(chunk) / math.sqrt(b))
        start += b
    return parts[0] if len(parts) == 1 else torch.cat(parts, dim=-1)


def hadamard_op_count(plan: BlockHadamardPlan) -> int:
    """Arithmetic operations per row performed by :func:`hadamard_apply`.

    Each butterfly stage of a size-``b`` block does ``b`` adds/subtracts, and
    the final normalization ``b`` multiplies (skipped for ``b == 1``).
    """
    ops = 0
    for b in plan.blocks:
        h = 1
        while h < b:
            ops += b
            h *= 2
        if b > 1:
            ops += b
    return ops


def cayley(param: SkewParam | torch.Tensor) -> torch.Tensor:
    """Orthogonal ``(I - A)(I + A)^-1`` for skew-symmetric ``A``."""
    a = param.matrix() if isinstance(param, SkewParam) else param
    eye = torch.eye(a.shape[-1], dtype=a.dtype)
    return torch.linalg.solve(eye + a, eye - a, left=False)


def lp_norm(m: torch.Tensor, p: float) -> torch.Tensor:
    """Entrywise ``(sum |m_ij|^p)^(1/p)``; ``p = inf`` gives the max-abs entry."""
    if p < 1:
        raise ValueError(f"lp_norm requires p >= 1, got {p}")
    m = _as_tensor(m)
    if math.isinf(p):
        return m.abs().max()
    # factor out the (detached) max so tiny or huge entries neither underflow nor overflow
    a = m.abs()
    top = a.max().detach()
    if top == 0 or not torch.isfinite(top):
        return a.pow(p).sum().pow(1.0 / p)
    return top * (a / top).pow(p).sum().pow(1.0 / p)


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a parameter vector."""
    if not h > 0:
        raise ValueError("step h must be positive")
    theta = np.array(theta, dtype=np.float64).reshape(-1)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        x = theta.copy()
        x[i] = theta[i] + h
        fp = float(f(x))
        x[i] = theta[i] - h
        fm = float(f(x))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value around coordinate {i}")
        grad[i] = (fp - fm) / (2 * h)
    return grad


def random_orthogonal(dim: int, seed: int, dtype=None) -> torch.Tensor:
    """Haar-distributed rotation (det +1) from a seeded Gaussian QR."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    g = rng(seed).standard_normal((dim, dim))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return torch.as_tensor(q, dtype=dtype or _dtype)


def block_diag(blocks: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.block_diag(*blocks)
