"""Input validation helpers shared by the estimators and the CLI."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import torch

from .model import ALL_ALIASES
from .transforms import TRANSFORM_NAMES

__all__ = ["check_tokens", "check_bits", "check_locations", "check_transforms", "parse_list"]


def check_tokens(X, vocab: int) -> torch.Tensor:
    """Coerce ``X`` to a ``(n_seq, seq_len)`` long tensor of ids in ``[0, vocab)``."""
    if isinstance(X, torch.Tensor):
        arr = X.detach().cpu().numpy()
    else:
        arr = np.asarray(X)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"tokens must be a non-empty (n_seq, seq_len) array, got shape {arr.shape}")
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or not np.all(arr == np.round(arr)):
            raise ValueError("token ids must be integers")
    elif arr.dtype.kind not in "iu":
        raise ValueError(f"token ids must be integers, got dtype {arr.dtype}")
    if arr.min() < 0 or arr.max() >= vocab:
        raise ValueError(f"token ids must lie in [0, {vocab}), got range [{arr.min()}, {arr.max()}]")
    return torch.as_tensor(arr.astype(np.int64))


def check_bits(bits: int, allowed: Sequence[int] = tuple(range(2, 17))) -> int:
    if isinstance(bits, bool) or int(bits) != bits or int(bits) not in allowed:
        raise ValueError(f"bit width must be one of {list(allowed)}, got {bits!r}")
    return int(bits)


def check_locations(locations: Iterable[str], allowed: Sequence[str] = ALL_ALIASES) -> tuple[str, ...]:
    locations = tuple(locations)
    bad = [loc for loc in locations if loc not in allowed]
    if bad:
        raise ValueError(f"unknown quantizer location(s) {bad}; valid: {list(allowed)}")
    if len(set(locations)) != len(locations):
        raise ValueError("duplicate quantizer locations")
    return locations


def check_transforms(names: Iterable[str]) -> tuple[str, ...]:
    names = tuple(names)
    bad = [n for n in names if n not in TRANSFORM_NAMES]
    if bad:
        raise ValueError(f"unknown transform(s) {bad}; valid: {list(TRANSFORM_NAMES)}")
    return names


def parse_list(text: str | None) -> tuple[str, ...]:
    """Split a comma list, dropping blanks (``"a, b,"`` -> ``("a", "b")``)."""
    if not text:
        return ()
    return tuple(p.strip() for p in text.split(",") if p.strip())
