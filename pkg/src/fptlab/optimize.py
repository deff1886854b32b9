"""Local L_p and end-to-end student-teacher optimization of transforms and grids.

Gradients come from torch autograd by default (``grad="autograd"``) or from
central finite differences over the flattened parameter vector
(``grad="fd"``), which is only practical for small parameter sets.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .model import ModelParams, forward
from .numerics import SkewParam, finite_diff_grad, lp_norm, matmul
from .quant import QuantGrid, qrange
from .transforms import (
    PreRopeTransform,
    ResidualRotation,
    TransformSet,
    UpScaler,
    ValueTransform,
    apply_transforms,
    fold_norm_scales,
    merge_rotation,
)

logger = logging.getLogger(__name__)

__all__ = [
    "NumericalError",
    "OptimizeConfig",
    "TrainTrace",
    "lr_at",
    "local_objective_rotation",
    "local_objective_prerope",
    "local_objective_value",
    "local_objective_upscaler",
    "local_optimize",
    "local_optimize_transforms",
    "jsd_loss",
    "TransformLeaves",
    "GridLeaves",
    "Student",
    "e2e_train",
]

_F64 = torch.float64
LOCAL_ORDER = ("rotation", "prerope", "value", "upscaler")


class NumericalError(RuntimeError):
    """Optimization produced non-finite values or diverged."""


@dataclass(frozen=True)
class OptimizeConfig:
    p: float = 4.0
    steps: int = 200
    lr: float = 0.1
    lr_schedule: str = "constant"
    warmup: float = 0.1
    optimizer: str = "gd"
    grad: str = "autograd"
    fd_step: float = 1e-6
    max_retries: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if not 0 <= self.warmup < 1:
            raise ValueError("warmup fraction must lie in [0, 1)")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError("optimizer must be 'gd' or 'adam'")
        if self.grad not in ("autograd", "fd"):
            raise ValueError("grad must be 'autograd' or 'fd'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainTrace:
    values: list[float]
    params: object = None
    steps: int = 0
    initial: float = math.nan
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"initial": self.initial, "values": list(self.values), "steps": self.steps, **self.extra}


def lr_at(cfg: OptimizeConfig, step: int) -> float:
    """Learning rate for ``step`` (0-based): constant, or linear warmup then cosine decay."""
    if cfg.lr_schedule == "constant":
        return cfg.lr
    warm = int(round(cfg.warmup * cfg.steps))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    span = max(cfg.steps - warm, 1)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / span))


# ---------------------------------------------------------------------------
# local objectives


_INPUT_SIDE = ("wq", "wk", "wv", "wu", "wg")
_OUTPUT_SIDE = ("wo", "wd")


def local_objective_rotation(params: ModelParams, t: ResidualRotation | torch.Tensor, p: float = 4.0) -> torch.Tensor:
    """Sum over layers of ``||T_r^T W||_p`` (q, k, v, up, gate) and ``||W T_r||_p`` (out, down).

    ``params`` must have folded norm scales; ``t`` may be a rotation or a
    realized matrix.
    """
    r = t.matrix() if isinstance(t, ResidualRotation) else t
    total = torch.zeros((), dtype=_F64)
    for b in params.blocks:
        for name in _INPUT_SIDE:
            total = total + lp_norm(matmul(r.T, getattr(b, name).to(_F64)), p)
        for name in _OUTPUT_SIDE:
            total = total + lp_norm(matmul(getattr(b, name).to(_F64), r), p)
    return total


def local_objective_prerope(wq, wk, t: PreRopeTransform, p: float = 4.0, group_size: int = 1) -> torch.Tensor:
    """``||W_q T̄_k||_p + ||W_k T_k||_p`` for one layer (``T̄_k`` GQA-repeated)."""
    return lp_norm(matmul(wq.to(_F64), t.query_full(group_size)), p) + lp_norm(matmul(wk.to(_F64), t.key_full()), p)


def local_objective_value(wv, wo, t: ValueTransform, p: float = 4.0, group_size: int = 1) -> torch.Tensor:
    """``||W_v T_v||_p + ||T̄_v W_o||_p`` for one layer."""
    tv = torch.block_diag(*t.matrices.to(_F64))
    tinv = torch.block_diag(*t.inverses().repeat_interleave(group_size, dim=0))
    return lp_norm(matmul(wv.to(_F64), tv), p) + lp_norm(matmul(tinv, wo.to(_F64)), p)


def local_objective_upscaler(wu, wd, t: UpScaler, p: float = 4.0, hadamard=None) -> torch.Tensor:
    """``||W_u diag(s)||_p + ||H^T diag(s)^-1 W_d||_p`` (``H`` only if an online Hadamard is used)."""
    s = t.s.to(_F64)
    wd_eff = wd.to(_F64) / s[:, None]
    if hadamard is not None:
        from .numerics import hadamard_apply

        wd_eff = hadamard_apply(hadamard, wd_eff.T).T
    return lp_norm(wu.to(_F64) * s, p) + lp_norm(wd_eff, p)


def _grad(objective, x: torch.Tensor, cfg: OptimizeConfig) -> tuple[float, torch.Tensor]:
    if cfg.grad == "fd":
        f = float(objective(x.detach()))
        g = finite_diff_grad(lambda v: float(objective(torch.as_tensor(v, dtype=x.dtype).reshape(x.shape))),
                             x.detach().numpy().reshape(-1), cfg.fd_step)
        return f, torch.as_tensor(g, dtype=x.dtype).reshape(x.shape)
    xg = x.detach().clone().requires_grad_(True)
    val = objective(xg)
    (g,) = torch.autograd.grad(val, xg)
    return float(val.detach()), g


def local_optimize(objective: Callable[[torch.Tensor], torch.Tensor], x0: torch.Tensor, cfg: OptimizeConfig) -> TrainTrace:
    """Gradient descent on a flat parameter vector with a monotone acceptance rule.

    A step is accepted only if the objective is finite and not larger than
    the current value; otherwise the step size is halved and retried up to
    ``cfg.max_retries`` times, after which the step is skipped. The trace
    therefore never increases.
    """
    x = x0.detach().clone().to(_F64)
    f0 = float(objective(x))
    if not math.isfinite(f0):
        raise NumericalError("objective is not finite at the initial point")
    f = f0
    values = []
    for step in range(cfg.steps):
        _, g = _grad(objective, x, cfg)
        if not bool(torch.isfinite(g).all()):
            raise NumericalError(f"non-finite gradient at step {step}")
        lr = lr_at(cfg, step)
        for _ in range(cfg.max_retries):
            cand = x - lr * g
            fc = float(objective(cand))
            if math.isfinite(fc) and fc <= f:
                x, f = cand, fc
                break
            lr *= 0.5
        values.append(f)
    return TrainTrace(values=values, params=x, steps=cfg.steps, initial=f0)


# ---------------------------------------------------------------------------
# flat parametrizations of each transform family


def _pack_rotation(t: ResidualRotation):
    return t.skew.entries.detach().clone().to(_F64), lambda x: ResidualRotation(t.base, SkewParam(t.dim, x))


def _pack_prerope(ts: Sequence[PreRopeTransform]):
    signs = torch.stack([torch.sign(t.scales.detach()) for t in ts])
    logs = torch.stack([t.scales.detach().abs().log() for t in ts]).to(_F64)
    angles = torch.stack([t.angles.detach() for t in ts]).to(_F64)
    shape = logs.shape

    def unpack(x):
        x = x.reshape(2, *shape)
        return tuple(PreRopeTransform(signs[i] * x[0, i].exp(), x[1, i]) for i in range(shape[0]))

    return torch.stack([logs, angles]).reshape(-1), unpack


def _pack_value(ts: Sequence[ValueTransform]):
    m = torch.stack([t.matrices.detach() for t in ts]).to(_F64)
    shape = m.shape
    return m.reshape(-1).clone(), lambda x: tuple(ValueTransform(v) for v in x.reshape(shape))


def _pack_upscaler(ts: Sequence[UpScaler]):
    signs = torch.stack([torch.sign(t.s.detach()) for t in ts])
    logs = torch.stack([t.s.detach().abs().log() for t in ts]).to(_F64)
    shape = logs.shape
    return logs.reshape(-1).clone(), lambda x: tuple(UpScaler(signs[i] * v.exp()) for i, v in enumerate(x.reshape(shape)))


_PACKERS = {"rotation": _pack_rotation, "prerope": _pack_prerope, "value": _pack_value, "upscaler": _pack_upscaler}


def _family_objective(family: str, params: ModelParams, tset: TransformSet, p: float):
    """Objective over the family's transforms given ``params`` with earlier families merged."""
    c = params.config
    if family == "rotation":
        return lambda t: local_objective_rotation(params, t, p)
    if family == "prerope":
        return lambda ts: sum(
            local_objective_prerope(b.wq, b.wk, t, p, c.group_size) for b, t in zip(params.blocks, ts)
        )
    if family == "value":
        return lambda ts: sum(local_objective_value(b.wv, b.wo, t, p, c.group_size) for b, t in zip(params.blocks, ts))
    if family == "upscaler":
        return lambda ts: sum(
            local_objective_upscaler(b.wu, b.wd, t, p, tset.hadamard) for b, t in zip(params.blocks, ts)
        )
    raise ValueError(family)


def local_optimize_transforms(
    params: ModelParams, tset: TransformSet, cfg: OptimizeConfig, lrs: Mapping[str, float] | None = None
) -> tuple[TransformSet, dict[str, TrainTrace]]:
    """Optimize the mergeable transforms one family at a time.

    The residual rotation goes first (on norm-folded weights) and is merged;
    then pre-RoPE, value and up-scaler transforms, each seeing the weights
    with all previously optimized families merged. ``lrs`` overrides the
    step size per family.
    """
    traces: dict[str, TrainTrace] = {}
    work = fold_norm_scales(params) if tset.rotation is not None else params
    for family in LOCAL_ORDER:
        current = getattr(tset, family)
        if current is None:
            continue
        x0, unpack = _PACKERS[family](current)
        objective = _family_objective(family, work, tset, cfg.p)
        fam_cfg = replace(cfg, lr=(lrs or {}).get(family, cfg.lr))
        trace = local_optimize(lambda x: objective(unpack(x)), x0, fam_cfg)
        new = unpack(trace.params.detach())
        tset = replace(tset, **{family: new})
        traces[family] = trace
        if family == "rotation":
            work = merge_rotation(work, new)
        else:
            work = apply_transforms(work, TransformSet(**{family: new}))
    return tset, traces


# ---------------------------------------------------------------------------
# end-to-end training


def jsd_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """Mean Jensen-Shannon divergence (natural log) between row-wise softmaxes."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError("student and teacher logits differ in shape")
    p = torch.softmax(student_logits, dim=-1).clamp_min(1e-12)
    q = torch.softmax(teacher_logits, dim=-1).clamp_min(1e-12)
    m = 0.5 * (p + q)
    log_m = m.log()
    kl_pm = (p * (p.log() - log_m)).sum(-1)
    kl_qm = (q * (q.log() - log_m)).sum(-1)
    return (0.5 * kl_pm + 0.5 * kl_qm).mean()


class TransformLeaves:
    """Trainable float64 leaves for the families of a :class:`TransformSet`."""

    def __init__(self, tset: TransformSet, families: Sequence[str] | None = None):
        self.tset = tset
        self.families = [f for f in LOCAL_ORDER if getattr(tset, f) is not None and (families is None or f in families)]
        self.leaves: dict[str, torch.Tensor] = {}
        self._unpack = {}
        for f in self.families:
            x0, unpack = _PACKERS[f](getattr(tset, f))
            self.leaves[f] = x0.requires_grad_(True)
            self._unpack[f] = unpack

    def build(self) -> TransformSet:
        return replace(self.tset, **{f: self._unpack[f](self.leaves[f]) for f in self.families})

    def tensors(self) -> list[torch.Tensor]:
        return list(self.leaves.values())


class GridLeaves:
    """Trainable scale / zero-point leaves for static grids."""

    def __init__(self, grids: Mapping[tuple[int, str], QuantGrid], trainable: bool = True):
        self.grids = dict(grids)
        self.leaves: dict[tuple[int, str], tuple[torch.Tensor, torch.Tensor]] = {}
        if trainable:
            for key, g in sorted(self.grids.items()):
                if g.dynamic:
                    continue
                scale = g.scale.detach().clone().to(_F64).requires_grad_(True)
                zp = g.zero_point.detach().clone().to(_F64)
                if not g.symmetric:
                    zp.requires_grad_(True)
                self.leaves[key] = (scale, zp)

    def build(self) -> dict[tuple[int, str], QuantGrid]:
        out = dict(self.grids)
        for key, (scale, zp) in self.leaves.items():
            g = self.grids[key]
            lo, hi = qrange(g.bits, g.symmetric)
            out[key] = replace(g, scale=scale.abs().clamp_min(1e-12), zero_point=zp.clamp(lo, hi))
        return out

    def tensors(self) -> list[torch.Tensor]:
        return [t for pair in self.leaves.values() for t in pair if t.requires_grad]


@dataclass
class Student:
    """A transformed, fake-quantized copy of a base model."""

    base: ModelParams
    transforms: TransformSet
    grids: dict[tuple[int, str], QuantGrid]
    dtype: torch.dtype = torch.float32

    def params(self, tset: TransformSet | None = None) -> ModelParams:
        return apply_transforms(self.base, tset or self.transforms).to(self.dtype)

    def logits(self, tokens, tset: TransformSet | None = None, grids=None) -> torch.Tensor:
        return forward(self.params(tset), tokens, quantizers=self.grids if grids is None else grids).logits


def _adam_state(tensors):
    return [(torch.zeros_like(t), torch.zeros_like(t)) for t in tensors]


def e2e_train(
    teacher: ModelParams,
    student: Student,
    data: Sequence[torch.Tensor],
    cfg: OptimizeConfig,
    train_transforms: bool = True,
    train_grids: bool = True,
    divergence_factor: float = 10.0,
) -> tuple[Student, TrainTrace]:
    """Minimize the JSD between student and teacher over transform and grid parameters.

    ``data`` is a sequence of token batches, cycled for ``cfg.steps`` steps.
    Rounding uses the straight-through estimator under autograd; with
    ``cfg.grad == "fd"`` gradients are central differences over all
    trainable parameters. Raises :class:`NumericalError` on non-finite loss or
    when the loss exceeds ``divergence_factor`` times its initial value.
    """
    t_leaves = TransformLeaves(student.transforms, None if train_transforms else [])
    g_leaves = GridLeaves(student.grids, trainable=train_grids)
    params = t_leaves.tensors() + g_leaves.tensors()
    teacher_cache: dict[int, torch.Tensor] = {}

    def teacher_logits(i):
        if i not in teacher_cache:
            with torch.no_grad():
                teacher_cache[i] = forward(teacher.to(student.dtype), data[i]).logits
        return teacher_cache[i]

    started = False  # inputs are validated by the first forward pass

    def loss_fn(batch_idx):
        try:
            s_logits = student.logits(data[batch_idx], t_leaves.build(), g_leaves.build())
        except ValueError as exc:
            if started:
                raise NumericalError(f"e2e training left the valid parameter region: {exc}") from exc
            raise
        return jsd_loss(s_logits.to(_F64), teacher_logits(batch_idx).to(_F64))

    values: list[float] = []
    initial = math.nan
    adam = _adam_state(params)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    for step in range(cfg.steps):
        idx = step % len(data)
        if cfg.grad == "fd" and params:
            flat, shapes = _flatten(params)

            def f(v, idx=idx):
                with torch.no_grad():
                    _assign(params, v, shapes)
                    return float(loss_fn(idx))

            loss_val = f(flat)
            grads = _split(torch.as_tensor(finite_diff_grad(f, flat, cfg.fd_step)), shapes)
            _assign(params, flat, shapes)
        else:
            loss = loss_fn(idx)
            loss_val = float(loss.detach())
            grads = torch.autograd.grad(loss, params, allow_unused=True) if params else []
            grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
        if not math.isfinite(loss_val):
            raise NumericalError(f"e2e loss became non-finite at step {step}")
        if step == 0:
            initial = loss_val
            started = True
        elif loss_val > divergence_factor * initial and loss_val > 1e-6:
            raise NumericalError(
                f"e2e training diverged at step {step}: loss {loss_val:.4g} > {divergence_factor}x initial {initial:.4g}"
            )
        values.append(loss_val)
        lr = lr_at(cfg, step)
        with torch.no_grad():
            for k, (p, g) in enumerate(zip(params, grads)):
                if cfg.optimizer == "adam":
                    m, v = adam[k]
                    m.mul_(beta1).add_(g, alpha=1 - beta1)
                    v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
                    mhat = m / (1 - beta1 ** (step + 1))
                    vhat = v / (1 - beta2 ** (step + 1))
                    p.sub_(lr * mhat / (vhat.sqrt() + eps))
                else:
                    p.sub_(lr * g)
        if any(not bool(torch.isfinite(p).all()) for p in params):
            raise NumericalError(f"e2e parameters became non-finite after step {step}")
    trained = Student(
        base=student.base,
        transforms=_detach_tset(t_leaves.build()),
        grids={k: g.detach() for k, g in g_leaves.build().items()},
        dtype=student.dtype,
    )
    return trained, TrainTrace(values=values, params=trained, steps=cfg.steps, initial=initial)


def _flatten(tensors):
    shapes = [t.shape for t in tensors]
    flat = np.concatenate([t.detach().numpy().reshape(-1) for t in tensors]) if tensors else np.zeros(0)
    return flat, shapes


def _split(vec: torch.Tensor, shapes):
    out, i = [], 0
    for s in shapes:
        n = int(np.prod(s)) if len(s) else 1
        out.append(vec[i : i + n].reshape(s))
        i += n
    return out


def _assign(tensors, vec, shapes):
    with torch.no_grad():
        for t, part in zip(tensors, _split(torch.as_tensor(vec, dtype=_F64), shapes)):
            t.copy_(part)


def _detach_tset(tset: TransformSet) -> TransformSet:
    def d(x):
        return x.detach().clone()

    return replace(
        tset,
        prerope=None if tset.prerope is None else tuple(PreRopeTransform(d(t.scales), d(t.angles)) for t in tset.prerope),
        value=None if tset.value is None else tuple(ValueTransform(d(t.matrices)) for t in tset.value),
        upscaler=None if tset.upscaler is None else tuple(UpScaler(d(t.s)) for t in tset.upscaler),
        rotation=None
        if tset.rotation is None
        else ResidualRotation(tset.rotation.base, SkewParam(tset.rotation.dim, d(tset.rotation.skew.entries))),
    )
