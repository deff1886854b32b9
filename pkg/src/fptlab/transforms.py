"""Function-preserving transforms and their merges into model weights.

Every merge is a pure function ``ModelParams -> ModelParams`` built from
differentiable torch operations, so the same code serves offline merging and
end-to-end training. Transforms are always realized in float64 and cast to
the model dtype at the end of each merge.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import torch

from .model import ModelParams, forward, random_tokens
from .numerics import BlockHadamardPlan, SkewParam, cayley, hadamard_apply, matmul, random_orthogonal, rng

__all__ = [
    "COND_LIMIT",
    "TRANSFORM_NAMES",
    "PreRopeTransform",
    "ValueTransform",
    "UpScaler",
    "ResidualRotation",
    "TransformSet",
    "merge_prerope",
    "merge_value_transform",
    "merge_up_scaler",
    "merge_rotation",
    "fold_norm_scales",
    "enable_residual_scaling",
    "attach_online_hadamard",
    "apply_transforms",
    "verify_preservation",
]

COND_LIMIT = 1e8
TRANSFORM_NAMES = ("prerope", "value", "upscaler", "rotation", "hadamard", "resscale")
_F64 = torch.float64


def _rot2(angle: torch.Tensor) -> torch.Tensor:
    c, s = torch.cos(angle), torch.sin(angle)
    return torch.stack((torch.stack((c, s), -1), torch.stack((-s, c), -1)), -2)


@dataclass(frozen=True)
class PreRopeTransform:
    """Per key/value head: one scale and one rotation angle per RoPE pair.

    ``scales`` and ``angles`` have shape ``(n_kv_heads, d_head // 2)``.
    Reflections are not allowed: only pure rotations commute with RoPE.
    """

    scales: torch.Tensor
    angles: torch.Tensor

    def __post_init__(self):
        if self.scales.shape != self.angles.shape or self.scales.dim() != 2:
            raise ValueError("scales and angles must both be (n_kv_heads, d_head // 2)")
        if bool((self.scales == 0).any()):
            raise ValueError("pre-RoPE scales must be nonzero")

    @classmethod
    def identity(cls, n_kv_heads: int, d_head: int) -> "PreRopeTransform":
        shape = (n_kv_heads, d_head // 2)
        return cls(torch.ones(shape, dtype=_F64), torch.zeros(shape, dtype=_F64))

    @classmethod
    def random(cls, n_kv_heads: int, d_head: int, seed: int) -> "PreRopeTransform":
        g = rng(seed)
        shape = (n_kv_heads, d_head // 2)
        scales = torch.as_tensor(g.uniform(0.5, 2.0, shape) * g.choice([-1.0, 1.0], shape), dtype=_F64)
        angles = torch.as_tensor(g.uniform(-math.pi, math.pi, shape), dtype=_F64)
        return cls(scales, angles)

    @property
    def n_heads(self) -> int:
        return self.scales.shape[0]

    @property
    def d_head(self) -> int:
        return 2 * self.scales.shape[1]

    def _blocks(self, inverse_scale: bool) -> torch.Tensor:
        s = self.scales.to(_F64)
        s = 1.0 / s if inverse_scale else s
        # (H, N, 2, 2): s_n * R_n, the scale is shared by both rows of a pair
        return s[..., None, None] * _rot2(self.angles.to(_F64))

    def key_matrix(self, h: int) -> torch.Tensor:
        """``T_k^(h) = diag(s) diag(R_n)`` (d_head x d_head)."""
        return torch.block_diag(*self._blocks(False)[h])

    def query_matrix(self, h: int) -> torch.Tensor:
        """``T̄_k^(h) = diag(1/s) diag(R_n)``."""
        return torch.block_diag(*self._blocks(True)[h])

    def key_full(self) -> torch.Tensor:
        return torch.block_diag(*self._blocks(False).reshape(-1, 2, 2))

    def query_full(self, group_size: int) -> torch.Tensor:
        """Query-side matrix with each head's block repeated ``group_size`` times."""
        blocks = self._blocks(True).repeat_interleave(group_size, dim=0)
        return torch.block_diag(*blocks.reshape(-1, 2, 2))


@dataclass(frozen=True)
class ValueTransform:
    """Invertible ``(d_head, d_head)`` matrix per key/value head, ``(H, d, d)``."""

    matrices: torch.Tensor

    def __post_init__(self):
        if self.matrices.dim() != 3 or self.matrices.shape[1] != self.matrices.shape[2]:
            raise ValueError("value transform must be (n_kv_heads, d_head, d_head)")

    @classmethod
    def identity(cls, n_kv_heads: int, d_head: int) -> "ValueTransform":
        return cls(torch.eye(d_head, dtype=_F64).repeat(n_kv_heads, 1, 1))

    @classmethod
    def random(cls, n_kv_heads: int, d_head: int, seed: int) -> "ValueTransform":
        g = rng(seed)
        m = torch.eye(d_head, dtype=_F64) + 0.3 * torch.as_tensor(g.standard_normal((n_kv_heads, d_head, d_head)))
        return cls(m)

    def check_conditioning(self) -> None:
        cond = torch.linalg.cond(self.matrices.detach().to(_F64))
        if not bool(torch.isfinite(cond).all()) or float(cond.max()) > COND_LIMIT:
            raise ValueError(f"value transform block is singular or ill-conditioned (cond={float(cond.max()):.3g})")

    def inverses(self) -> torch.Tensor:
        return torch.linalg.inv(self.matrices.to(_F64))


@dataclass(frozen=True)
class UpScaler:
    """Per-channel scale on the up projection output, inverse in the down projection."""

    s: torch.Tensor

    def __post_init__(self):
        if self.s.dim() != 1:
            raise ValueError("up scaler must be a vector of length d_ffn")
        if bool((self.s == 0).any()) or not bool(torch.isfinite(self.s).all()):
            raise ValueError("up scaler entries must be finite and nonzero")

    @classmethod
    def identity(cls, d_ffn: int) -> "UpScaler":
        return cls(torch.ones(d_ffn, dtype=_F64))


@dataclass(frozen=True)
class ResidualRotation:
    """Orthogonal residual rotation ``T_r = base @ cayley(skew)``.

    ``base`` is a fixed starting rotation (identity, Hadamard or random);
    ``skew`` holds the trainable Cayley coordinates.
    """

    base: torch.Tensor
    skew: SkewParam

    @classmethod
    def identity(cls, dim: int) -> "ResidualRotation":
        return cls(torch.eye(dim, dtype=_F64), SkewParam.zeros(dim, _F64))

    @classmethod
    def from_matrix(cls, m: torch.Tensor) -> "ResidualRotation":
        return cls(m.to(_F64), SkewParam.zeros(m.shape[0], _F64))

    @classmethod
    def random(cls, dim: int, seed: int) -> "ResidualRotation":
        return cls.from_matrix(random_orthogonal(dim, seed, _F64))

    @classmethod
    def hadamard(cls, dim: int) -> "ResidualRotation":
        return cls.from_matrix(BlockHadamardPlan.for_dim(dim).matrix(_F64))

    @property
    def dim(self) -> int:
        return self.base.shape[0]

    def matrix(self) -> torch.Tensor:
        if not bool(self.skew.entries.detach().any()) and not self.skew.entries.requires_grad:
            return self.base.to(_F64)
        return matmul(self.base.to(_F64), cayley(self.skew))


@dataclass(frozen=True)
class TransformSet:
    """Everything applied on top of a base model; ``None`` means "not used"."""

    prerope: tuple[PreRopeTransform, ...] | None = None
    value: tuple[ValueTransform, ...] | None = None
    upscaler: tuple[UpScaler, ...] | None = None
    rotation: ResidualRotation | None = None
    hadamard: BlockHadamardPlan | None = None
    residual_scaling: bool = False

    @classmethod
    def identity(cls, params: ModelParams, names: Iterable[str], rotation_init: str = "identity", seed: int = 0):
        """Identity-initialized transforms for the selected families.

        ``rotation_init`` picks the starting residual rotation: ``identity``,
        ``hadamard`` or ``random``.
        """
        names = set(names)
        unknown = names - set(TRANSFORM_NAMES)
        if unknown:
            raise ValueError(f"unknown transforms {sorted(unknown)}; choose from {TRANSFORM_NAMES}")
        c = params.config
        L = c.n_blocks
        rotation = None
        if "rotation" in names:
            rotation = {
                "identity": lambda: ResidualRotation.identity(c.d_model),
                "hadamard": lambda: ResidualRotation.hadamard(c.d_model),
                "random": lambda: ResidualRotation.random(c.d_model, seed),
            }[rotation_init]()
        return cls(
            prerope=tuple(PreRopeTransform.identity(c.n_kv_heads, c.d_head) for _ in range(L)) if "prerope" in names else None,
            value=tuple(ValueTransform.identity(c.n_kv_heads, c.d_head) for _ in range(L)) if "value" in names else None,
            upscaler=tuple(UpScaler.identity(c.d_ffn) for _ in range(L)) if "upscaler" in names else None,
            rotation=rotation,
            hadamard=BlockHadamardPlan.for_dim(c.d_ffn) if "hadamard" in names else None,
            residual_scaling="resscale" in names,
        )

    @property
    def names(self) -> tuple[str, ...]:
        present = {
            "prerope": self.prerope is not None,
            "value": self.value is not None,
            "upscaler": self.upscaler is not None,
            "rotation": self.rotation is not None,
            "hadamard": self.hadamard is not None,
            "resscale": self.residual_scaling,
        }
        return tuple(n for n in TRANSFORM_NAMES if present[n])


def _cast(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return t.to(like.dtype)


def merge_prerope(params: ModelParams, t: PreRopeTransform, layer: int | None = None) -> ModelParams:
    """``W_q <- W_q T̄_k`` (per query head, GQA-repeated) and ``W_k <- W_k T_k``.

    With ``layer=None`` the same transform is merged into every layer.
    """
    c = params.config
    if t.n_heads != c.n_kv_heads or t.d_head != c.d_head:
        raise ValueError(f"pre-RoPE transform has {t.n_heads} heads of dim {t.d_head}; model has {c.n_kv_heads} of dim {c.d_head}")
    tk = t.key_full()
    tq = t.query_full(c.group_size)
    for i in range(c.n_blocks) if layer is None else (layer,):
        b = params.blocks[i]
        params = params.replace_block(
            i,
            wq=_cast(matmul(b.wq.to(_F64), tq), b.wq),
            wk=_cast(matmul(b.wk.to(_F64), tk), b.wk),
        )
    return params


def merge_value_transform(params: ModelParams, t: ValueTransform, layer: int | None = None) -> ModelParams:
    """``W_v <- W_v diag(T_v)``, ``W_o <- diag(T_v^-1 repeated per group) W_o``."""
    c = params.config
    if t.matrices.shape != (c.n_kv_heads, c.d_head, c.d_head):
        raise ValueError("value transform does not match the model's head layout")
    t.check_conditioning()
    tv = torch.block_diag(*t.matrices.to(_F64))
    tinv = torch.block_diag(*t.inverses().repeat_interleave(c.group_size, dim=0))
    for i in range(c.n_blocks) if layer is None else (layer,):
        b = params.blocks[i]
        params = params.replace_block(
            i,
            wv=_cast(matmul(b.wv.to(_F64), tv), b.wv),
            wo=_cast(matmul(tinv, b.wo.to(_F64)), b.wo),
        )
    return params


def merge_up_scaler(params: ModelParams, t: UpScaler, layer: int | None = None) -> ModelParams:
    """``W_u <- W_u diag(s)``, ``W_d <- diag(s)^-1 W_d``."""
    c = params.config
    if t.s.shape != (c.d_ffn,):
        raise ValueError("up scaler length must equal d_ffn")
    s = t.s.to(_F64)
    for i in range(c.n_blocks) if layer is None else (layer,):
        b = params.blocks[i]
        params = params.replace_block(
            i,
            wu=_cast(b.wu.to(_F64) * s, b.wu),
            wd=_cast(b.wd.to(_F64) / s[:, None], b.wd),
        )
    return params


def fold_norm_scales(params: ModelParams) -> ModelParams:
    """Absorb every RMSNorm scale into the rows of the linear layers it feeds."""
    for i, b in enumerate(params.blocks):
        ga, gm = b.norm_attn[:, None], b.norm_mlp[:, None]
        params = params.replace_block(
            i,
            wq=b.wq * ga, wk=b.wk * ga, wv=b.wv * ga,
            wg=b.wg * gm, wu=b.wu * gm,
            norm_attn=torch.ones_like(b.norm_attn), norm_mlp=torch.ones_like(b.norm_mlp),
        )
    return replace(params, head=params.head * params.norm_final[:, None], norm_final=torch.ones_like(params.norm_final))


def merge_rotation(params: ModelParams, t: ResidualRotation) -> ModelParams:
    """Rotate the residual stream by ``T_r``.

    Input-side weights become ``T_r^T W``, output-side ``W T_r``; the
    embedding output is rotated and the head counter-rotated. Requires
    folded (all-ones) norm scales.
    """
    if not params.norms_folded():
        raise ValueError("merge_rotation needs folded norm scales (call fold_norm_scales first)")
    if t.dim != params.config.d_model:
        raise ValueError("rotation size must equal d_model")
    r = t.matrix()
    rt = r.T
    for i, b in enumerate(params.blocks):
        params = params.replace_block(
            i,
            wq=_cast(matmul(rt, b.wq.to(_F64)), b.wq),
            wk=_cast(matmul(rt, b.wk.to(_F64)), b.wk),
            wv=_cast(matmul(rt, b.wv.to(_F64)), b.wv),
            wg=_cast(matmul(rt, b.wg.to(_F64)), b.wg),
            wu=_cast(matmul(rt, b.wu.to(_F64)), b.wu),
            wo=_cast(matmul(b.wo.to(_F64), r), b.wo),
            wd=_cast(matmul(b.wd.to(_F64), r), b.wd),
        )
    return replace(
        params,
        embed=_cast(matmul(params.embed.to(_F64), r), params.embed),
        head=_cast(matmul(rt, params.head.to(_F64)), params.head),
    )


def enable_residual_scaling(params: ModelParams) -> ModelParams:
    """Switch the forward pass to carry a per-token normalized residual.

    The per-token scale is applied inside the blocks on the attention
    probabilities and on the gate-times-up product. Bias-free output and down
    projections (always the case for ``ModelParams``) make this exact.
    """
    return replace(params, mode=replace(params.mode, residual_scaling=True))


def attach_online_hadamard(params: ModelParams, plan: BlockHadamardPlan) -> ModelParams:
    """Apply ``plan`` online to the down-projection input; merge ``H^T`` into ``W_d``."""
    if plan.dim != params.config.d_ffn:
        raise ValueError(f"Hadamard plan dim {plan.dim} does not match d_ffn {params.config.d_ffn}")
    if params.mode.hadamard is not None:
        raise ValueError("an online Hadamard is already attached")
    for i, b in enumerate(params.blocks):
        # H^T W_d = (W_d^T H)^T, computed with the fast transform
        params = params.replace_block(i, wd=hadamard_apply(plan, b.wd.T).T.contiguous())
    return replace(params, mode=replace(params.mode, hadamard=plan))


def apply_transforms(params: ModelParams, tset: TransformSet) -> ModelParams:
    """Merge a whole :class:`TransformSet` in the canonical order.

    Rotation first (after folding norms), then per-layer pre-RoPE, value and
    up-scaler transforms, then the online Hadamard and residual scaling.
    """
    if tset.rotation is not None:
        params = merge_rotation(fold_norm_scales(params), tset.rotation)
    L = params.config.n_blocks
    for family, merge in (("prerope", merge_prerope), ("value", merge_value_transform), ("upscaler", merge_up_scaler)):
        ts: Sequence | None = getattr(tset, family)
        if ts is None:
            continue
        if len(ts) != L:
            raise ValueError(f"{family}: need one transform per layer ({L}), got {len(ts)}")
        for i, t in enumerate(ts):
            params = merge(params, t, layer=i)
    if tset.hadamard is not None:
        params = attach_online_hadamard(params, tset.hadamard)
    if tset.residual_scaling:
        params = enable_residual_scaling(params)
    return params


def verify_preservation(original: ModelParams, transformed: ModelParams, inputs) -> float:
    """Max over batches of ``||a - b||_inf / (1 + ||a||_inf)`` on the logits."""
    # the weight seed is provenance, not architecture
    if replace(original.config, seed=0) != replace(transformed.config, seed=0):
        raise ValueError("models have different configs")
    if isinstance(inputs, torch.Tensor) and inputs.dim() == 2:
        inputs = [inputs]
    worst = 0.0
    with torch.no_grad():
        for batch in inputs:
            a = forward(original, batch).logits.to(_F64)
            b = forward(transformed, batch).logits.to(_F64)
            dev = float((a - b).abs().max() / (1.0 + a.abs().max()))
            if not math.isfinite(dev):
                return math.inf
            worst = max(worst, dev)
    return worst


def preservation_batches(params: ModelParams, n_batches: int = 8, batch: int = 4, seq_len: int = 32, seed: int = 0):
    return [random_tokens(params.config, batch, seq_len, seed + i) for i in range(n_batches)]

