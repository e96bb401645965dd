"""Serialization orders for kept tokens.

All orders are permutations of TokenSet indices (which are row-major by
construction), so applying one to the token matrix produces the scan
sequence and its inverse restores row-major order.

The importance-prioritized local (IPL) order serializes high-activity
windows first: the token grid is tiled into k x k windows, windows are
visited by descending window maximum of the full score map (ties by
ascending window index), tokens within a window stay row-major, and
discarded tokens are deleted from the sequence without disturbing the
relative order of the rest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .sparsify import TokenSet
from .stca import max_pool2d


@dataclass(frozen=True)
class IplConfig:
    k: int = 2

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("IPL window size must be at least 1")


def bidi_orders(ts: TokenSet) -> tuple[np.ndarray, np.ndarray]:
    """Row-major forward order and its exact reverse."""
    fwd = np.arange(len(ts), dtype=np.int64)
    return fwd, fwd[::-1].copy()


def cross_orders(ts: TokenSet) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Row-major and column-major orders, each with its reverse."""
    rf, rb = bidi_orders(ts)
    cf = np.lexsort((ts.coords[:, 0], ts.coords[:, 1])).astype(np.int64)
    return rf, rb, cf, cf[::-1].copy()


def ipl_order(ts: TokenSet, scores: np.ndarray, cfg: IplConfig = IplConfig()) -> np.ndarray:
    """Importance-prioritized local order over the kept tokens."""
    h, w = ts.grid_shape
    if scores.shape != (h, w):
        raise ShapeError(f"score map {scores.shape} does not match grid {(h, w)}")
    k = cfg.k
    if h % k or w % k:
        raise ShapeError(f"window size {k} does not divide grid {h}x{w}")
    maxima = max_pool2d(scores, k).ravel()
    # Stable sort on negated maxima: descending scores, ties by window index.
    window_order = np.argsort(-maxima, kind="stable")
    flat = np.arange(h * w, dtype=np.int64).reshape(h, w)
    windows = flat.reshape(h // k, k, w // k, k).transpose(0, 2, 1, 3).reshape(-1, k * k)
    sequence = windows[window_order].ravel()
    lookup = np.full(h * w, -1, dtype=np.int64)
    lookup[ts.coords[:, 0] * w + ts.coords[:, 1]] = np.arange(len(ts))
    hits = lookup[sequence]
    return hits[hits >= 0]


def invert(p: np.ndarray) -> np.ndarray:
    """Inverse permutation: invert(p)[p[i]] == i."""
    inv = np.empty_like(p)
    inv[p] = np.arange(p.size, dtype=p.dtype)
    return inv
