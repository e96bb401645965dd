"""Gather kept tokens from a feature map and scatter them back.

A feature map is a (C, H_t, W_t) array. Gathering collects the kept
tokens in row-major coordinate order into an (n, C) matrix; scattering
writes them back over a base map, leaving discarded positions bit-equal
to the base.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass
class TokenSet:
    """Kept tokens in row-major order with their grid coordinates."""

    tokens: np.ndarray      # (n, C)
    coords: np.ndarray      # (n, 2) int64, rows then cols
    grid_shape: tuple[int, int]

    def __len__(self) -> int:
        return self.tokens.shape[0]


def gather_tokens(x: np.ndarray, keep: np.ndarray) -> TokenSet:
    """Collect tokens where keep is True, scanning rows left to right."""
    if x.ndim != 3:
        raise ShapeError(f"feature map must be (C, H, W), got shape {x.shape}")
    if keep.shape != x.shape[1:]:
        raise ShapeError(f"keep mask {keep.shape} does not match grid {x.shape[1:]}")
    coords = np.argwhere(keep)
    tokens = x[:, coords[:, 0], coords[:, 1]].T.copy()
    return TokenSet(tokens=tokens, coords=coords.astype(np.int64), grid_shape=keep.shape)


def scatter_tokens(ts: TokenSet, base: np.ndarray) -> np.ndarray:
    """Write tokens into a copy of base at their coordinates."""
    if base.ndim != 3 or base.shape[1:] != ts.grid_shape:
        raise ShapeError(f"base {base.shape} does not match token grid {ts.grid_shape}")
    if ts.tokens.shape[1] != base.shape[0]:
        raise ShapeError(f"token width {ts.tokens.shape[1]} does not match channels {base.shape[0]}")
    if len(ts) and (
        ts.coords.min() < 0
        or ts.coords[:, 0].max() >= base.shape[1]
        or ts.coords[:, 1].max() >= base.shape[2]
    ):
        raise ShapeError("token coordinates fall outside the base grid")
    out = base.copy()
    out[:, ts.coords[:, 0], ts.coords[:, 1]] = ts.tokens.T
    return out


def kept_ratio(keep: np.ndarray) -> float:
    """Fraction of tokens kept, in [0, 1]."""
    return float(np.count_nonzero(keep)) / keep.size
