"""Experiment runner: quantization settings, sensitivity sweeps and the fit pipeline.

The fit pipeline runs, in order: transform initialization, local L_p
optimization, range setting on calibration data (after the transforms are
merged), and end-to-end student-teacher training. Toy models have no
meaningful perplexity, so output JSD and logits MSE versus the full-precision
teacher stand in as the quality metric.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .model import (
    ACTIVATION_ALIASES,
    WEIGHT_ALIASES,
    ModelConfig,
    ModelParams,
    forward,
    init_model,
    random_tokens,
    standard_outlier_specs,
)
from .optimize import OptimizeConfig, Student, e2e_train, jsd_loss, local_optimize_transforms
from .quant import QuantGrid, RangeSettingSpec, quant_error, set_range_lp
from .transforms import TRANSFORM_NAMES, TransformSet, apply_transforms, verify_preservation
from .validation import check_bits, check_locations, check_tokens, check_transforms

logger = logging.getLogger(__name__)

__all__ = [
    "PRESETS",
    "KV_ALIASES",
    "StageError",
    "ExperimentConfig",
    "expand_setting",
    "build_grids",
    "evaluate",
    "sensitivity_sweep",
    "TransformQuantizer",
]

PRESETS: dict[str, tuple[str, ...]] = {
    "linears_kv": ("na", "nm", "ao", "mm", "ke", "v"),
    "plus_bmm": ("na", "nm", "ao", "mm", "ke", "v", "qe", "ap"),
    "all_except_residual": tuple(a for a in ACTIVATION_ALIASES if a not in ("ra", "rm")),
}
# cached keys/values take the KV bit width
KV_ALIASES = frozenset({"k", "ke", "v"})
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the error."""

    def __init__(self, stage: str, error: BaseException):
        super().__init__(f"stage '{stage}' failed: {error}")
        self.stage = stage
        self.error = error


def expand_setting(setting: str | Sequence[str], kv_key: str = "ke") -> tuple[str, ...]:
    """Activation aliases quantized by a preset name or an explicit alias list.

    ``kv_key`` chooses whether cached keys are quantized after RoPE (``ke``,
    the default) or before it (``k``).
    """
    if kv_key not in ("k", "ke"):
        raise ValueError("kv_key must be 'k' or 'ke'")
    if isinstance(setting, str):
        if setting not in PRESETS:
            raise ValueError(f"unknown quantization setting {setting!r}; choose from {sorted(PRESETS)}")
        aliases = PRESETS[setting]
        if setting == "linears_kv" or setting == "plus_bmm":
            aliases = tuple(kv_key if a == "ke" else a for a in aliases)
        return aliases
    aliases = tuple(setting)
    check_locations(aliases, allowed=ACTIVATION_ALIASES)
    return aliases


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that defines one fit / sweep run."""

    model: ModelConfig = field(default_factory=ModelConfig)
    setting: str | tuple[str, ...] = "linears_kv"
    kv_key: str = "ke"
    bits_w: int = 4
    bits_a: int = 4
    bits_kv: int = 4
    quantize_weights: bool = True
    transforms: tuple[str, ...] = ()
    rotation_init: str = "identity"
    local_steps: int = 200
    local_lr: float = 0.1
    e2e_steps: int = 256
    e2e_lr: float = 1.0
    e2e_optimizer: str = "gd"
    train_transforms: bool = True
    train_grids: bool = True
    range_p: float = 3.0
    n_calibration: int = 64
    seq_len: int = 64
    batch: int = 4
    n_eval: int = 16
    compute_dtype: str = "float32"
    fixture: str = "clean"
    seed: int = 0

    def __post_init__(self):
        if self.fixture not in ("clean", "standard"):
            raise ValueError("fixture must be 'clean' or 'standard'")
        if isinstance(self.setting, list):
            object.__setattr__(self, "setting", tuple(self.setting))
        object.__setattr__(self, "transforms", tuple(self.transforms))
        for b in (self.bits_w, self.bits_a, self.bits_kv):
            check_bits(b, allowed=(4, 8, 16))
        check_transforms(self.transforms)
        expand_setting(self.setting, self.kv_key)
        if self.compute_dtype not in _DTYPES:
            raise ValueError(f"compute_dtype must be one of {sorted(_DTYPES)}")
        if self.rotation_init not in ("identity", "hadamard", "random"):
            raise ValueError("rotation_init must be identity, hadamard or random")
        if self.e2e_optimizer not in ("gd", "adam"):
            raise ValueError("e2e_optimizer must be 'gd' or 'adam'")
        for name in ("local_lr", "e2e_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("local_steps", "e2e_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("n_calibration", "seq_len", "batch", "n_eval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def build_model(self) -> ModelParams:
        """The config's model, with the standard outliers injected if requested."""
        return init_model(self.model, standard_outlier_specs() if self.fixture == "standard" else None)

    @property
    def aliases(self) -> tuple[str, ...]:
        return expand_setting(self.setting, self.kv_key)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["setting"] = self.setting if isinstance(self.setting, str) else list(self.setting)
        d["transforms"] = list(self.transforms)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "model" in d:
            d["model"] = d["model"] if isinstance(d["model"], ModelConfig) else ModelConfig.from_dict(d["model"])
        if "setting" in d and not isinstance(d["setting"], str):
            d["setting"] = tuple(d["setting"])
        if "transforms" in d:
            d["transforms"] = tuple(d["transforms"])
        return cls(**d)


def _bits_for(alias: str, bits_a: int, bits_kv: int) -> int:
    return bits_kv if alias in KV_ALIASES else bits_a


def build_grids(
    params: ModelParams,
    calibration,
    act_aliases: Sequence[str],
    bits_a: int = 4,
    bits_kv: int = 4,
    bits_w: int | None = 4,
    weight_aliases: Sequence[str] = WEIGHT_ALIASES,
    p: float = 3.0,
) -> dict[tuple[int, str], QuantGrid]:
    """Static grids by L_p range setting on ``params`` (already transformed).

    Activations: per-tensor asymmetric grids from the calibration tape.
    Weights (``bits_w`` not None): per-output-channel symmetric grids.
    """
    spec = RangeSettingSpec(p=p)
    grids: dict[tuple[int, str], QuantGrid] = {}
    act_aliases = tuple(act_aliases)
    if act_aliases:
        with torch.no_grad():
            tape = forward(params, calibration, taps=act_aliases).tape
        for key in sorted(tape):
            grids[key] = set_range_lp(tape[key], spec, _bits_for(key[1], bits_a, bits_kv), symmetric=False)
    if bits_w is not None:
        for i, b in enumerate(params.blocks):
            for alias in weight_aliases:
                w = b.weight(alias).detach()
                grids[(i, alias)] = set_range_lp(w, spec, bits_w, symmetric=True, granularity="channel", axis=-1)
    return grids


def evaluate(teacher: ModelParams, student_params: ModelParams, grids, tokens) -> dict[str, float]:
    """JSD and logits MSE of the quantized student versus the teacher."""
    with torch.no_grad():
        ref = forward(teacher, tokens).logits.to(torch.float64)
        out = forward(student_params, tokens, quantizers=grids).logits.to(torch.float64)
    if not bool(torch.isfinite(out).all()):
        return {"jsd": math.inf, "mse": math.inf}
    return {"jsd": float(jsd_loss(out, ref)), "mse": float((out - ref).pow(2).mean())}


def sensitivity_sweep(
    params: ModelParams,
    bits: int = 4,
    locations: Sequence[str] = ACTIVATION_ALIASES,
    seed: int = 0,
    n_calibration: int = 64,
    n_eval: int = 16,
    seq_len: int = 64,
    p: float = 3.0,
) -> list[dict]:
    """Quantize one location (all layers) at a time; record output deviation.

    Activation aliases get per-tensor asymmetric grids, weight aliases
    per-channel symmetric grids, both by L_p range setting.
    """
    check_locations(locations)
    cfg = params.config
    calib = random_tokens(cfg, n_calibration, seq_len, seed)
    ev = random_tokens(cfg, n_eval, seq_len, seed + 1)
    acts = [a for a in locations if a in ACTIVATION_ALIASES]
    weights = [a for a in locations if a in WEIGHT_ALIASES]
    grids = build_grids(params, calib, acts, bits, bits, bits if weights else None, weights, p)
    rows = []
    for alias in locations:
        sub = {k: g for k, g in grids.items() if k[1] == alias}
        m = evaluate(params, params, sub, ev)
        rows.append({"location": alias, "jsd": m["jsd"], "mse": m["mse"]})
    order = sorted(range(len(rows)), key=lambda i: (-rows[i]["jsd"], rows[i]["location"]))
    for rank, i in enumerate(order, 1):
        rows[i]["rank"] = rank
    return rows


def _tokens(X, cfg: ModelConfig) -> torch.Tensor:
    return check_tokens(X, cfg.vocab)


class TransformQuantizer(BaseEstimator):
    """Fit function-preserving transforms and quantization grids to a model.

    ``model`` is the full-precision teacher; ``X`` passed to :meth:`fit` is a
    ``(n_seq, seq_len)`` array of token ids used for calibration (the first
    ``n_calibration`` rows) and as the end-to-end training stream.
    """

    def __init__(
        self,
        model: ModelParams | None = None,
        setting="linears_kv",
        kv_key: str = "ke",
        bits_w: int = 4,
        bits_a: int = 4,
        bits_kv: int = 4,
        quantize_weights: bool = True,
        transforms=(),
        rotation_init: str = "identity",
        local_steps: int = 200,
        local_lr: float = 0.1,
        e2e_steps: int = 256,
        e2e_lr: float = 1.0,
        e2e_optimizer: str = "gd",
        train_transforms: bool = True,
        train_grids: bool = True,
        batch: int = 4,
        n_calibration: int = 64,
        range_p: float = 3.0,
        compute_dtype: str = "float32",
        seed: int = 0,
    ):
        self.model = model
        self.setting = setting
        self.kv_key = kv_key
        self.bits_w = bits_w
        self.bits_a = bits_a
        self.bits_kv = bits_kv
        self.quantize_weights = quantize_weights
        self.transforms = transforms
        self.rotation_init = rotation_init
        self.local_steps = local_steps
        self.local_lr = local_lr
        self.e2e_steps = e2e_steps
        self.e2e_lr = e2e_lr
        self.e2e_optimizer = e2e_optimizer
        self.train_transforms = train_transforms
        self.train_grids = train_grids
        self.batch = batch
        self.n_calibration = n_calibration
        self.range_p = range_p
        self.compute_dtype = compute_dtype
        self.seed = seed

    @classmethod
    def from_config(cls, model: ModelParams, cfg: ExperimentConfig) -> "TransformQuantizer":
        names = [k for k in cls._get_param_names() if k != "model"]
        return cls(model=model, **{k: getattr(cfg, k) for k in names})

    # -- helpers ---------------------------------------------------------

    def _validate(self):
        if self.model is None:
            raise ValueError("TransformQuantizer needs a model")
        self.model.check()
        for b in (self.bits_w, self.bits_a, self.bits_kv):
            check_bits(b, allowed=(4, 8, 16))
        check_transforms(self.transforms)
        if self.compute_dtype not in _DTYPES:
            raise ValueError(f"compute_dtype must be one of {sorted(_DTYPES)}")
        return expand_setting(self.setting if isinstance(self.setting, str) else tuple(self.setting), self.kv_key)

    def _stage(self, name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (StageError, KeyboardInterrupt):
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
            raise StageError(name, exc) from exc

    # -- sklearn API -----------------------------------------------------

    def fit(self, X, y=None):
        aliases = self._validate()
        teacher = self.model.to(torch.float64)
        cfg = teacher.config
        tokens = _tokens(X, cfg)
        dtype = _DTYPES[self.compute_dtype]
        self.aliases_ = aliases
        self.traces_ = {}

        tset = self._stage(
            "init", TransformSet.identity, teacher, self.transforms, rotation_init=self.rotation_init, seed=self.seed
        )
        if self.local_steps > 0 and any(getattr(tset, f) is not None for f in ("rotation", "prerope", "value", "upscaler")):
            local_cfg = OptimizeConfig(p=4.0, steps=self.local_steps, lr=self.local_lr, seed=self.seed)
            tset, local_traces = self._stage("local", local_optimize_transforms, teacher, tset, local_cfg)
            self.traces_.update({f"local.{k}": v for k, v in local_traces.items()})
        merged = self._stage("merge", apply_transforms, teacher, tset)
        self.preservation_ = self._stage(
            "preservation", verify_preservation, teacher, merged, [tokens[i : i + self.batch] for i in range(0, min(len(tokens), 8 * self.batch), self.batch)]
        )
        calib = tokens[: self.n_calibration]
        grids = self._stage(
            "range",
            build_grids,
            merged.to(dtype),
            calib,
            aliases,
            self.bits_a,
            self.bits_kv,
            self.bits_w if self.quantize_weights else None,
            WEIGHT_ALIASES,
            self.range_p,
        )
        self.student_init_ = Student(teacher, tset, grids, dtype)
        student = self.student_init_
        if self.e2e_steps > 0 and (self.train_grids or (self.train_transforms and tset.names)):
            e2e_cfg = OptimizeConfig(
                steps=self.e2e_steps,
                lr=self.e2e_lr,
                lr_schedule="cosine",
                warmup=0.1,
                optimizer=self.e2e_optimizer,
                seed=self.seed,
            )
            batches = [tokens[i : i + self.batch] for i in range(0, len(tokens) - self.batch + 1, self.batch)]
            student, trace = self._stage(
                "e2e", e2e_train, teacher, student, batches, e2e_cfg, self.train_transforms, self.train_grids
            )
            self.traces_["e2e"] = trace
        self.student_ = student
        self.transforms_ = student.transforms
        self.grids_ = student.grids
        self.teacher_ = teacher
        return self

    def _check_fitted(self):
        if not hasattr(self, "student_"):
            raise RuntimeError("TransformQuantizer is not fitted yet; call fit first")

    def transform(self, X) -> torch.Tensor:
        """Quantized student logits, ``(n_seq, seq_len, vocab)``."""
        self._check_fitted()
        tokens = _tokens(X, self.model.config)
        with torch.no_grad():
            return self.student_.logits(tokens)

    def predict_proba(self, X) -> np.ndarray:
        return torch.softmax(self.transform(X).to(torch.float64), -1).numpy()

    def predict(self, X) -> np.ndarray:
        """Most likely next token at every position."""
        return self.transform(X).argmax(-1).numpy()

    def evaluate(self, X, initial: bool = False) -> dict[str, float]:
        """JSD / MSE versus the teacher (``initial=True``: before end-to-end training)."""
        self._check_fitted()
        st = self.student_init_ if initial else self.student_
        return evaluate(self.teacher_, st.params(), st.grids, _tokens(X, self.model.config))

    def score(self, X, y=None) -> float:
        """Negative JSD to the teacher (higher is better)."""
        return -self.evaluate(X)["jsd"]

    def quant_errors(self, X) -> dict[str, dict[str, float]]:
        """Per-location L2 / L3 error and SQNR of the fitted activation grids on ``X``."""
        self._check_fitted()
        tokens = _tokens(X, self.model.config)
        params = self.student_.params()
        acts = sorted(k for k in self.grids_ if k[1] in ACTIVATION_ALIASES)
        with torch.no_grad():
            tape = forward(params, tokens, taps=acts, quantizers=self.grids_).tape
        out = {}
        for key in acts:
            g = self.grids_[key]
            e2, e3 = quant_error(tape[key], g, 2.0), quant_error(tape[key], g, 3.0)
            out[f"{key[0]}.{key[1]}"] = {"l2": e2.lp, "l3": e3.lp, "sqnr": e2.sqnr}
        for i, b in enumerate(params.blocks):
            for alias in WEIGHT_ALIASES:
                if (i, alias) in self.grids_:
                    w = b.weight(alias).detach()
                    g = self.grids_[(i, alias)]
                    e2, e3 = quant_error(w, g, 2.0), quant_error(w, g, 3.0)
                    out[f"{i}.{alias}"] = {"l2": e2.lp, "l3": e3.lp, "sqnr": e2.sqnr}
        return out
