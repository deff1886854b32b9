"""Manifest + raw binary serialization for models, transform sets and grids.

A saved object is two files: ``<stem>.json`` (manifest: kind, metadata and a
tensor table with dtype, shape and byte offset) and ``<stem>.bin`` (all
tensors concatenated, little-endian, C order). Loading is bit-exact.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .model import ExecMode, ModelConfig, ModelParams
from .numerics import BlockHadamardPlan, SkewParam
from .quant import QuantGrid
from .transforms import PreRopeTransform, ResidualRotation, TransformSet, UpScaler, ValueTransform

__all__ = [
    "FORMAT",
    "FORMAT_VERSION",
    "dumps_json",
    "save_tensors",
    "load_tensors",
    "save_model",
    "load_model",
    "save_transforms",
    "load_transforms",
    "save_grids",
    "load_grids",
]

FORMAT = "fptlab-tensors"
FORMAT_VERSION = 1
_NP_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8"}


def _sanitize(obj):
    if isinstance(obj, float):
        if math.isnan(obj):
            return "NaN"
        if math.isinf(obj):
            return "Infinity" if obj > 0 else "-Infinity"
        return obj
    if isinstance(obj, Mapping):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    return obj


def _float(v) -> float:
    return {"Infinity": math.inf, "-Infinity": -math.inf, "NaN": math.nan}.get(v, v) if isinstance(v, str) else float(v)


def dumps_json(obj) -> str:
    """Deterministic JSON: sorted keys, fixed indent, non-finite floats as strings."""
    return json.dumps(_sanitize(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".bin") else p
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_tensors(path, kind: str, meta: Mapping, tensors: list[tuple[str, torch.Tensor]]) -> Path:
    """Write a manifest and its binary; returns the manifest path."""
    manifest_path, bin_path = _paths(path)
    table, chunks, offset = [], [], 0
    for name, t in tensors:
        t = t.detach().cpu().contiguous()
        dname = str(t.dtype).replace("torch.", "")
        if dname not in _NP_DTYPES:
            raise ValueError(f"cannot serialize tensor {name!r} of dtype {t.dtype}")
        raw = t.numpy().astype(_NP_DTYPES[dname], copy=False).tobytes(order="C")
        table.append({"name": name, "dtype": dname, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "kind": kind,
        "meta": dict(meta),
        "binary": bin_path.name,
        "tensors": table,
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(dumps_json(manifest))
    return manifest_path


def load_tensors(path, kind: str | None = None) -> tuple[dict, dict[str, torch.Tensor]]:
    manifest_path, _ = _paths(path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT or manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"{manifest_path} is not a {FORMAT} v{FORMAT_VERSION} manifest")
    if kind is not None and manifest.get("kind") != kind:
        raise ValueError(f"{manifest_path} holds a {manifest.get('kind')!r}, expected {kind!r}")
    blob = (manifest_path.parent / manifest["binary"]).read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(blob):
            raise ValueError(f"binary file is truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(blob[start : start + n], dtype=_NP_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return manifest["meta"], tensors


# -- models ---------------------------------------------------------------


def save_model(params: ModelParams, path, extra: Mapping | None = None) -> Path:
    meta = {"config": params.config.to_dict(), "mode": params.mode.to_dict(), "extra": dict(extra or {})}
    return save_tensors(path, "model", meta, params.named_tensors())


def load_model(path) -> ModelParams:
    meta, tensors = load_tensors(path, "model")
    cfg = ModelConfig.from_dict(meta["config"])
    params = ModelParams.from_named(cfg, tensors, ExecMode.from_dict(meta["mode"]))
    params.check()
    return params


# -- transform sets -------------------------------------------------------


def save_transforms(tset: TransformSet, path) -> Path:
    entries, tensors = [], []
    for family, fields in (("prerope", ("scales", "angles")), ("value", ("matrices",)), ("upscaler", ("s",))):
        ts = getattr(tset, family)
        if ts is None:
            continue
        entries.append({"type": family, "layers": len(ts)})
        for i, t in enumerate(ts):
            tensors.extend((f"{family}.{i}.{f}", getattr(t, f)) for f in fields)
    if tset.rotation is not None:
        entries.append({"type": "rotation", "dim": tset.rotation.dim})
        tensors += [("rotation.base", tset.rotation.base), ("rotation.skew", tset.rotation.skew.entries)]
    if tset.hadamard is not None:
        entries.append({"type": "hadamard", "dim": tset.hadamard.dim, "blocks": list(tset.hadamard.blocks)})
    if tset.residual_scaling:
        entries.append({"type": "resscale"})
    return save_tensors(path, "transforms", {"transforms": entries}, tensors)


def load_transforms(path) -> TransformSet:
    meta, t = load_tensors(path, "transforms")
    kw = {}
    for e in meta["transforms"]:
        kind = e["type"]
        if kind == "prerope":
            kw["prerope"] = tuple(PreRopeTransform(t[f"prerope.{i}.scales"], t[f"prerope.{i}.angles"]) for i in range(e["layers"]))
        elif kind == "value":
            kw["value"] = tuple(ValueTransform(t[f"value.{i}.matrices"]) for i in range(e["layers"]))
        elif kind == "upscaler":
            kw["upscaler"] = tuple(UpScaler(t[f"upscaler.{i}.s"]) for i in range(e["layers"]))
        elif kind == "rotation":
            kw["rotation"] = ResidualRotation(t["rotation.base"], SkewParam(e["dim"], t["rotation.skew"]))
        elif kind == "hadamard":
            kw["hadamard"] = BlockHadamardPlan(e["dim"], tuple(e["blocks"]))
        elif kind == "resscale":
            kw["residual_scaling"] = True
        else:
            raise ValueError(f"unknown transform type tag {kind!r}")
    return TransformSet(**kw)


# -- quantization grids ---------------------------------------------------


def save_grids(grids: Mapping[tuple[int, str], QuantGrid], path) -> Path:
    entries, tensors = [], []
    for (layer, alias), g in sorted(grids.items()):
        entries.append({
            "layer": layer, "alias": alias, "bits": g.bits, "symmetric": g.symmetric, "dynamic": g.dynamic,
            "granularity": g.granularity, "clip_min": g.clip_min, "clip_max": g.clip_max, "fallback": g.fallback,
        })
        tensors += [(f"grid.{layer}.{alias}.scale", g.scale), (f"grid.{layer}.{alias}.zero_point", g.zero_point)]
    return save_tensors(path, "grids", {"grids": entries}, tensors)


def load_grids(path) -> dict[tuple[int, str], QuantGrid]:
    meta, t = load_tensors(path, "grids")
    out = {}
    for e in meta["grids"]:
        layer, alias = e.pop("layer"), e.pop("alias")
        e["clip_min"], e["clip_max"] = _float(e["clip_min"]), _float(e["clip_max"])
        out[(layer, alias)] = QuantGrid(
            scale=t[f"grid.{layer}.{alias}.scale"], zero_point=t[f"grid.{layer}.{alias}.zero_point"], **e
        )
    return out
