"""Toy pre-norm decoder transformer with named quantizer tap points.

Layout (per layer): RMSNorm -> attention (RoPE, grouped-query) -> residual add
-> RMSNorm -> SwiGLU MLP -> residual add; then final RMSNorm and a linear
head. Weights act on row vectors (``y = x @ W``, ``W`` is ``(d_in, d_out)``)
and no linear layer has a bias.

RoPE pairs interleaved dimensions ``(2n, 2n + 1)``. A row vector ``[a, b]``
in pair ``n`` at position ``i`` becomes ``[a, b] @ [[c, s], [-s, c]]`` with
``c, s = cos(i * theta_n), sin(i * theta_n)``, so a quarter turn sends
``[1, 0]`` to ``[0, 1]``.

Quantizer locations are addressed as ``(layer, alias)`` tuples; a bare alias
means "every layer".
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .numerics import BlockHadamardPlan, get_dtype, hadamard_apply, rng

__all__ = [
    "residual_outlier_specs",
    "ffn_outlier_specs",
    "standard_outlier_specs",
    "outlier_fixture",
    "ACTIVATION_ALIASES",
    "WEIGHT_ALIASES",
    "ALL_ALIASES",
    "ModelConfig",
    "OutlierSpec",
    "BlockParams",
    "ExecMode",
    "ModelParams",
    "ForwardResult",
    "init_model",
    "rms",
    "rms_norm",
    "rope_angles",
    "rope_embed",
    "attention_probs_values_bmm",
    "forward",
    "resolve_locations",
    "random_tokens",
    "kurtosis",
    "max_to_rms",
]

ACTIVATION_ALIASES = (
    "q", "k", "v", "o", "g", "u", "d", "gs", "mm",
    "na", "nm", "qe", "ke", "ap", "aw", "ao", "ra", "rm",
)
WEIGHT_ALIASES = ("Wq", "Wk", "Wv", "Wo", "Wg", "Wu", "Wd")
ALL_ALIASES = ACTIVATION_ALIASES + WEIGHT_ALIASES

# weight alias -> BlockParams attribute
_WEIGHT_FIELD = {"Wq": "wq", "Wk": "wk", "Wv": "wv", "Wo": "wo", "Wg": "wg", "Wu": "wu", "Wd": "wd"}

RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_blocks: int = 2
    n_q_heads: int = 8
    n_kv_heads: int = 4
    d_head: int = 8
    d_ffn: int = 172
    vocab: int = 257
    rope_base: float = 10000.0
    rope_thetas: tuple[float, ...] | None = None
    init_std: float = 0.125
    embed_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("d_model", "n_blocks", "n_q_heads", "n_kv_heads", "d_head", "d_ffn", "vocab"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_q_heads % self.n_kv_heads:
            raise ValueError("n_q_heads must be a multiple of n_kv_heads")
        if self.d_head % 2:
            raise ValueError("d_head must be even (RoPE works on pairs)")
        if self.d_model != self.n_q_heads * self.d_head:
            raise ValueError("d_model must equal n_q_heads * d_head")
        if self.rope_thetas is not None:
            object.__setattr__(self, "rope_thetas", tuple(float(t) for t in self.rope_thetas))
            if len(self.rope_thetas) != self.d_head // 2:
                raise ValueError("rope_thetas needs one frequency per rotation pair")

    @property
    def group_size(self) -> int:
        """Query heads per key/value head."""
        return self.n_q_heads // self.n_kv_heads

    @property
    def thetas(self) -> torch.Tensor:
        if self.rope_thetas is not None:
            return torch.tensor(self.rope_thetas, dtype=torch.float64)
        n = torch.arange(self.d_head // 2, dtype=torch.float64)
        return self.rope_base ** (-2.0 * n / self.d_head)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["rope_thetas"] is not None:
            d["rope_thetas"] = list(d["rope_thetas"])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class OutlierSpec:
    """Multiply selected channels of named tensors in every block by ``factor``.

    ``target`` is a weight alias (``"Wu"``: columns = output channels, or with
    ``axis="rows"`` input channels), ``"embed"`` (embedding columns), or a norm
    scale (``"norm_attn"``, ``"norm_mlp"``, ``"norm_final"``: entries).
    """

    channels: tuple[int, ...]
    factor: float
    target: str = "Wu"
    axis: str = "cols"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.target not in set(WEIGHT_ALIASES) | {"embed", "norm_attn", "norm_mlp", "norm_final"}:
            raise ValueError(f"unknown outlier target {self.target!r}")
        if self.axis not in ("cols", "rows"):
            raise ValueError("axis must be 'cols' or 'rows'")

    def to_dict(self) -> dict:
        return {"channels": list(self.channels), "factor": self.factor, "target": self.target, "axis": self.axis}


@dataclass(frozen=True)
class BlockParams:
    wq: torch.Tensor
    wk: torch.Tensor
    wv: torch.Tensor
    wo: torch.Tensor
    wg: torch.Tensor
    wu: torch.Tensor
    wd: torch.Tensor
    norm_attn: torch.Tensor
    norm_mlp: torch.Tensor

    def weight(self, alias: str) -> torch.Tensor:
        return getattr(self, _WEIGHT_FIELD[alias])


BLOCK_FIELDS = tuple(BlockParams.__dataclass_fields__)


@dataclass(frozen=True)
class ExecMode:
    """Non-mergeable parts of the forward pass."""

    residual_scaling: bool = False
    hadamard: BlockHadamardPlan | None = None

    def to_dict(self) -> dict:
        return {
            "residual_scaling": self.residual_scaling,
            "hadamard": None if self.hadamard is None else list(self.hadamard.blocks),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExecMode":
        blocks = d.get("hadamard")
        plan = None if blocks is None else BlockHadamardPlan(sum(blocks), tuple(blocks))
        return cls(bool(d.get("residual_scaling", False)), plan)


@dataclass(frozen=True)
class ModelParams:
    config: ModelConfig
    embed: torch.Tensor
    blocks: tuple[BlockParams, ...]
    norm_final: torch.Tensor
    head: torch.Tensor
    mode: ExecMode = field(default_factory=ExecMode)

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.dtype

    def named_tensors(self) -> list[tuple[str, torch.Tensor]]:
        """Tensors in canonical (serialization) order."""
        out = [("embed", self.embed)]
        for i, b in enumerate(self.blocks):
            out.extend((f"blocks.{i}.{name}", getattr(b, name)) for name in BLOCK_FIELDS)
        out += [("norm_final", self.norm_final), ("head", self.head)]
        return out

    @classmethod
    def from_named(cls, config: ModelConfig, tensors: Mapping[str, torch.Tensor], mode: ExecMode | None = None):
        blocks = tuple(
            BlockParams(**{name: tensors[f"blocks.{i}.{name}"] for name in BLOCK_FIELDS})
            for i in range(config.n_blocks)
        )
        return cls(config, tensors["embed"], blocks, tensors["norm_final"], tensors["head"], mode or ExecMode())

    def to(self, dtype: torch.dtype) -> "ModelParams":
        return ModelParams.from_named(self.config, {k: v.to(dtype) for k, v in self.named_tensors()}, self.mode)

    def replace_block(self, i: int, **changes) -> "ModelParams":
        blocks = list(self.blocks)
        blocks[i] = replace(blocks[i], **changes)
        return replace(self, blocks=tuple(blocks))

    def norms_folded(self) -> bool:
        norms = [self.norm_final] + [b.norm_attn for b in self.blocks] + [b.norm_mlp for b in self.blocks]
        return all(bool((n == 1).all()) for n in norms)

    def check(self) -> None:
        c = self.config
        hq, hk = c.n_q_heads * c.d_head, c.n_kv_heads * c.d_head
        want = {
            "wq": (c.d_model, hq), "wk": (c.d_model, hk), "wv": (c.d_model, hk), "wo": (hq, c.d_model),
            "wg": (c.d_model, c.d_ffn), "wu": (c.d_model, c.d_ffn), "wd": (c.d_ffn, c.d_model),
            "norm_attn": (c.d_model,), "norm_mlp": (c.d_model,),
        }
        if len(self.blocks) != c.n_blocks:
            raise ValueError(f"expected {c.n_blocks} blocks, got {len(self.blocks)}")
        for i, b in enumerate(self.blocks):
            for name, shape in want.items():
                if tuple(getattr(b, name).shape) != shape:
                    raise ValueError(f"blocks.{i}.{name} has shape {tuple(getattr(b, name).shape)}, expected {shape}")
        if tuple(self.embed.shape) != (c.vocab, c.d_model) or tuple(self.head.shape) != (c.d_model, c.vocab):
            raise ValueError("embedding/head shapes do not match the config")


def _apply_outlier(params: ModelParams, spec: OutlierSpec) -> ModelParams:
    idx = list(spec.channels)

    def scaled(t: torch.Tensor) -> torch.Tensor:
        t = t.clone()
        if t.dim() == 1:
            t[idx] = t[idx] * spec.factor
        elif spec.axis == "cols":
            t[:, idx] = t[:, idx] * spec.factor
        else:
            t[idx, :] = t[idx, :] * spec.factor
        return t

    if spec.target == "embed":
        return replace(params, embed=scaled(params.embed))
    if spec.target == "norm_final":
        return replace(params, norm_final=scaled(params.norm_final))
    name = spec.target if spec.target.startswith("norm") else _WEIGHT_FIELD[spec.target]
    for i, b in enumerate(params.blocks):
        params = params.replace_block(i, **{name: scaled(getattr(b, name))})
    return params


def residual_outlier_specs(channels, factor: float) -> list[OutlierSpec]:
    """Massive residual channels: embedding and down-projection columns times
    ``factor``, the matching norm-scale entries divided by it (so normalized
    activations stay moderate, as in trained LLMs)."""
    channels = tuple(channels)
    return [
        OutlierSpec(channels, factor, "embed"),
        OutlierSpec(channels, factor, "Wd"),
        OutlierSpec(channels, 1.0 / factor, "norm_attn"),
        OutlierSpec(channels, 1.0 / factor, "norm_mlp"),
    ]


def ffn_outlier_specs(channels, factor: float) -> list[OutlierSpec]:
    """Outlier channels in the gate-times-up product: up and gate columns times ``factor``."""
    channels = tuple(channels)
    return [OutlierSpec(channels, factor, "Wu"), OutlierSpec(channels, factor, "Wg")]


STANDARD_RESIDUAL_OUTLIERS = ((3,), 20.0)
STANDARD_FFN_OUTLIERS = ((5, 77), 6.0)


def standard_outlier_specs() -> list[OutlierSpec]:
    """The seeded outlier fixture used throughout the tests and examples."""
    return residual_outlier_specs(*STANDARD_RESIDUAL_OUTLIERS) + ffn_outlier_specs(*STANDARD_FFN_OUTLIERS)


def outlier_fixture(cfg: ModelConfig | None = None) -> ModelParams:
    return init_model(cfg or ModelConfig(), standard_outlier_specs())


def init_model(cfg: ModelConfig, outlier_spec: OutlierSpec | Iterable[OutlierSpec] | None = None) -> ModelParams:
    """Gaussian toy weights, deterministic in ``cfg.seed``.

    Linear weights are ``N(0, init_std^2)``, embeddings ``N(0, embed_std^2)``,
    norm scales are one. Outlier specs are applied afterwards, in order.
    """
    g = rng(cfg.seed)
    dtype = get_dtype()

    def normal(shape, std):
        return torch.as_tensor(g.standard_normal(shape) * std, dtype=dtype)

    hq, hk = cfg.n_q_heads * cfg.d_head, cfg.n_kv_heads * cfg.d_head
    embed = normal((cfg.vocab, cfg.d_model), cfg.embed_std)
    blocks = []
    for _ in range(cfg.n_blocks):
        blocks.append(
            BlockParams(
                wq=normal((cfg.d_model, hq), cfg.init_std),
                wk=normal((cfg.d_model, hk), cfg.init_std),
                wv=normal((cfg.d_model, hk), cfg.init_std),
                wo=normal((hq, cfg.d_model), cfg.init_std),
                wg=normal((cfg.d_model, cfg.d_ffn), cfg.init_std),
                wu=normal((cfg.d_model, cfg.d_ffn), cfg.init_std),
                wd=normal((cfg.d_ffn, cfg.d_model), cfg.init_std),
                norm_attn=torch.ones(cfg.d_model, dtype=dtype),
                norm_mlp=torch.ones(cfg.d_model, dtype=dtype),
            )
        )
    head = normal((cfg.d_model, cfg.vocab), cfg.init_std)
    params = ModelParams(cfg, embed, tuple(blocks), torch.ones(cfg.d_model, dtype=dtype), head)
    if outlier_spec is not None:
        specs = [outlier_spec] if isinstance(outlier_spec, OutlierSpec) else list(outlier_spec)
        for spec in specs:
            params = _apply_outlier(params, spec)
    return params


def rms(x: torch.Tensor) -> torch.Tensor:
    """Root mean square over the last dim, kept for broadcasting."""
    return x.pow(2).mean(-1, keepdim=True).sqrt()


def rms_norm(x: torch.Tensor, gamma: torch.Tensor | None = None, eps: float = RMS_EPS, scale=None) -> torch.Tensor:
    """``x / sqrt(mean(x^2) + eps) * gamma``.

    ``scale`` is the per-token factor ``S`` when ``x`` is a rescaled residual
    ``S * X``; the epsilon is then adjusted to ``eps * S^2`` so the output
    equals the norm of the unscaled ``X``.
    """
    eff = eps if scale is None else eps * scale.pow(2)
    out = x / (x.pow(2).mean(-1, keepdim=True) + eff).sqrt()
    return out if gamma is None else out * gamma


def rope_angles(n_positions: int, thetas: torch.Tensor, position_offset: int = 0) -> torch.Tensor:
    pos = torch.arange(position_offset, position_offset + n_positions, dtype=torch.float64)
    return pos[:, None] * thetas[None, :]


def rope_embed(x: torch.Tensor, position_offset: int, thetas) -> torch.Tensor:
    """Rotate each row (token) of ``x`` by its position's RoPE angles.

    ``x`` is ``(..., tokens, d_head)``; row ``i`` uses position
    ``position_offset + i``.
    """
    if x.shape[-1] % 2:
        raise ValueError("rope_embed needs an even head dimension")
    thetas = torch.as_tensor(thetas, dtype=torch.float64)
    if thetas.shape[-1] != x.shape[-1] // 2:
        raise ValueError("one theta per rotation pair is required")
    ang = rope_angles(x.shape[-2], thetas, position_offset)
    c, s = ang.cos().to(x.dtype), ang.sin().to(x.dtype)
    a, b = x[..., 0::2], x[..., 1::2]
    out = torch.stack((a * c - b * s, a * s + b * c), dim=-1)
    return out.reshape(x.shape)


def attention_probs_values_bmm(probs: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """``(B, heads, l1, l2) x (B, heads, l2, d) -> (B, heads, l1, d)``."""
    if probs.dim() != 4 or values.dim() != 4:
        raise ValueError("expected 4-d probs and values")
    if probs.shape[:2] != values.shape[:2] or probs.shape[-1] != values.shape[-2]:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)}, values {tuple(values.shape)}")
    return torch.matmul(probs, values)


@dataclass
class ForwardResult:
    logits: torch.Tensor
    tape: dict[tuple[int, str], torch.Tensor]
    residual_scales: list[torch.Tensor]


def resolve_locations(locations, n_blocks: int) -> set[tuple[int, str]]:
    """Expand aliases / ``(layer, alias)`` pairs into a set of pairs."""
    out = set()
    for loc in locations or ():
        if isinstance(loc, str):
            if loc not in ALL_ALIASES:
                raise ValueError(f"unknown quantizer location {loc!r}")
            out.update((i, loc) for i in range(n_blocks))
        else:
            layer, alias = loc
            if alias not in ALL_ALIASES or not 0 <= layer < n_blocks:
                raise ValueError(f"unknown quantizer location {loc!r}")
            out.add((int(layer), alias))
    return out


def _expand_quantizers(quantizers, n_blocks):
    out = {}
    for key, grid in (quantizers or {}).items():
        for loc in resolve_locations([key], n_blocks):
            out[loc] = grid
    return out


def forward(
    params: ModelParams,
    tokens,
    taps=(),
    quantizers: Mapping | None = None,
) -> ForwardResult:
    """Run the model on ``tokens`` (``(B, l)`` or ``(l,)`` ints).

    Tape entries hold the activation arriving at each requested location,
    before its quantizer. Execution mode (residual scaling, online Hadamard)
    comes from ``params.mode``.
    """
    from .quant import fake_quantize

    cfg = params.config
    tokens = torch.as_tensor(np.asarray(tokens) if not isinstance(tokens, torch.Tensor) else tokens)
    if tokens.dim() == 1:
        tokens = tokens[None]
    if tokens.dim() != 2:
        raise ValueError("tokens must be 1-d or 2-d")
    if tokens.numel() and (int(tokens.max()) >= cfg.vocab or int(tokens.min()) < 0):
        raise ValueError(f"token ids must lie in [0, {cfg.vocab})")
    tokens = tokens.long()
    taps = resolve_locations(taps, cfg.n_blocks)
    quant = _expand_quantizers(quantizers, cfg.n_blocks)
    mode = params.mode
    if mode.hadamard is not None and mode.hadamard.dim != cfg.d_ffn:
        raise ValueError("online Hadamard plan does not match d_ffn")
    tape: dict[tuple[int, str], torch.Tensor] = {}
    scales: list[torch.Tensor] = []

    def site(layer, alias, x):
        key = (layer, alias)
        if key in taps:
            tape[key] = x
        grid = quant.get(key)
        return x if grid is None else fake_quantize(x, grid)

    def weight(layer, alias):
        return site(layer, alias, params.blocks[layer].weight(alias))

    B, l = tokens.shape
    H, mH, dh, m = cfg.n_kv_heads, cfg.n_q_heads, cfg.d_head, cfg.group_size
    thetas = cfg.thetas
    causal = torch.ones(l, l, dtype=torch.bool).triu(1)

    resid = params.embed[tokens]
    s = None
    if mode.residual_scaling:
        r = rms(resid)
        resid, s = resid / r, 1.0 / r
        scales.append(s)

    def add_residual(resid, s, y):
        z = resid + y
        if s is None:
            return z, s
        r = rms(z)
        s = s / r
        scales.append(s)
        return z / r, s

    for i, blk in enumerate(params.blocks):
        # attention
        h = site(i, "na", rms_norm(resid, blk.norm_attn, scale=s))
        q = site(i, "q", h @ weight(i, "Wq"))
        k = site(i, "k", h @ weight(i, "Wk"))
        v = site(i, "v", h @ weight(i, "Wv"))
        q = q.reshape(B, l, mH, dh).transpose(1, 2)
        k = k.reshape(B, l, H, dh).transpose(1, 2)
        v = v.reshape(B, l, H, dh).transpose(1, 2)
        qe = site(i, "qe", rope_embed(q, 0, thetas))
        ke = site(i, "ke", rope_embed(k, 0, thetas))
        ke = ke.repeat_interleave(m, dim=1)
        v = v.repeat_interleave(m, dim=1)
        aw = site(i, "aw", qe @ ke.transpose(-1, -2) / math.sqrt(dh))
        ap = torch.softmax(aw.masked_fill(causal, -math.inf), dim=-1)
        if s is not None:
            ap = ap * s[:, None, :, :]
        ap = site(i, "ap", ap)
        ao = attention_probs_values_bmm(ap, v).transpose(1, 2).reshape(B, l, mH * dh)
        ao = site(i, "ao", ao)
        o = site(i, "o", ao @ weight(i, "Wo"))
        resid, s = add_residual(resid, s, o)
        resid = site(i, "ra", resid)
        # mlp
        h = site(i, "nm", rms_norm(resid, blk.norm_mlp, scale=s))
        g = site(i, "g", h @ weight(i, "Wg"))
        u = site(i, "u", h @ weight(i, "Wu"))
        gs = site(i, "gs", F.silu(g))
        mm = gs * u
        if s is not None:
            mm = mm * s
        if mode.hadamard is not None:
            mm = hadamard_apply(mode.hadamard, mm)
        mm = site(i, "mm", mm)
        d = site(i, "d", mm @ weight(i, "Wd"))
        resid, s = add_residual(resid, s, d)
        resid = site(i, "rm", resid)

    logits = rms_norm(resid, params.norm_final, scale=s) @ params.head
    return ForwardResult(logits, tape, scales)


def random_tokens(cfg: ModelConfig, n_seq: int, seq_len: int, seed: int) -> torch.Tensor:
    """Uniform random token ids, ``(n_seq, seq_len)``."""
    return torch.as_tensor(rng(seed).integers(0, cfg.vocab, size=(n_seq, seq_len)), dtype=torch.long)


def kurtosis(x: torch.Tensor) -> float:
    """Pearson kurtosis of all entries."""
    x = x.detach().reshape(-1).to(torch.float64)
    c = x - x.mean()
    return float(c.pow(4).mean() / c.pow(2).mean().pow(2))


def max_to_rms(x: torch.Tensor) -> float:
    x = x.detach()
    return float(x.abs().max() / x.pow(2).mean().sqrt())

