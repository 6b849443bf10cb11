"""RoI pooling, batch pooling, channel concatenation and top-k RoI sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxes import Box
from .tensor import DimensionError, Tensor, _result

# Number of RoIs that collapsed below one map cell and were clamped.
degenerate_roi_count = 0


def _map_extent(lo: np.ndarray, hi: np.ndarray, scale: float, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Map-cell span ``[floor(lo*scale), ceil(hi*scale))`` clipped to the map, at least one cell wide."""
    global degenerate_roi_count
    start = np.clip(np.floor(lo * scale), 0, size).astype(np.int64)
    end = np.clip(np.ceil(hi * scale), 0, size).astype(np.int64)
    bad = end - start < 1
    if bad.any():
        degenerate_roi_count += int(bad.sum())
        start = np.where(bad, np.minimum(start, size - 1), start)
        end = np.where(bad, start + 1, end)
    return start, end


def _bin_bounds(start: np.ndarray, end: np.ndarray, bins: int) -> np.ndarray:
    """[R, bins, 2] sub-window bounds: floor of the proportional start, ceil of the proportional end."""
    extent = (end - start)[:, None]
    i = np.arange(bins)[None, :]
    lo = start[:, None] + (i * extent) // bins
    hi = start[:, None] - ((-(i + 1) * extent) // bins)
    return np.stack([lo, hi], axis=-1)


def _range_max(fm: np.ndarray, row_ranges, col_ranges):
    """Max and first row-major argmax of each rectangle ``rows[p] x cols[q]`` of a [C,H,W] map.

    Returns ``(vals, arg_h, arg_w)`` each shaped [len(rows), len(cols), C].
    """
    c = fm.shape[0]
    fh = fm.transpose(1, 2, 0)  # H, W, C
    col_val = np.empty((len(col_ranges), fm.shape[1], c), dtype=fm.dtype)
    col_arg = np.empty(col_val.shape, dtype=np.int64)
    for q, (a, b) in enumerate(col_ranges):
        part = fh[:, a:b, :]
        col_arg[q] = part.argmax(axis=1) + a  # argmax keeps the first (leftmost) on ties
        col_val[q] = part.max(axis=1)
    vals = np.empty((len(row_ranges), len(col_ranges), c), dtype=fm.dtype)
    arg_h = np.empty(vals.shape, dtype=np.int64)
    for p, (a, b) in enumerate(row_ranges):
        part = col_val[:, a:b, :]
        arg_h[p] = part.argmax(axis=1) + a  # first (topmost) row on ties
        vals[p] = part.max(axis=1)
    arg_w = col_arg[np.arange(len(col_ranges))[None, :, None], arg_h, np.arange(c)[None, None, :]]
    return vals, arg_h, arg_w


def _range_ids(bounds: np.ndarray, size: int) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Distinct ``(lo, hi)`` ranges of an [R, bins, 2] array and each bin's index into them."""
    code = bounds[..., 0] * (size + 1) + bounds[..., 1]
    uniq, inverse = np.unique(code, return_inverse=True)
    return [(int(u) // (size + 1), int(u) % (size + 1)) for u in uniq], inverse.reshape(code.shape)


def roi_pool_many(feature_map: Tensor, rois: Sequence[Box], out_h: int, out_w: int,
                  scale: float = 1.0) -> Tensor:
    """Max-pool each RoI of one [C,H,W] map into a fixed out_h x out_w grid.

    Box coordinates are multiplied by ``scale`` to land on the map. Each RoI is
    split into sub-windows with floor/ceil proportional boundaries and a cell
    holds the max of its sub-window. Returns [R,C,out_h,out_w]. The gradient of
    a cell goes to the first row-major argmax of its sub-window.
    """
    fm = feature_map.data
    if fm.ndim != 3:
        raise DimensionError(f"roi_pool: feature map must be [C,H,W], got {fm.shape}")
    if not rois:
        raise DimensionError("roi_pool: no RoIs given")
    c, h, w = fm.shape
    coords = np.array([(r.x0, r.y0, r.x1, r.y1) for r in rois], dtype=np.float64)
    ys, ye = _map_extent(coords[:, 1], coords[:, 3], scale, h)
    xs, xe = _map_extent(coords[:, 0], coords[:, 2], scale, w)
    row_bounds = _bin_bounds(ys, ye, out_h)
    col_bounds = _bin_bounds(xs, xe, out_w)
    row_ranges, rows = _range_ids(row_bounds, h)
    col_ranges, cols = _range_ids(col_bounds, w)
    vals, arg_h, arg_w = _range_max(fm, row_ranges, col_ranges)
    ri, ci = rows[:, :, None], cols[:, None, :]
    out = vals[ri, ci].transpose(0, 3, 1, 2)  # R, C, oh, ow

    def backward(g):
        src = arg_h[ri, ci] * w + arg_w[ri, ci]  # R, oh, ow, C
        flat = (np.arange(c) * (h * w) + src).reshape(-1)
        d = np.bincount(flat, weights=g.transpose(0, 2, 3, 1).reshape(-1), minlength=c * h * w)
        return (d.reshape(c, h, w).astype(fm.dtype, copy=False),)

    return _result(out, (feature_map,), backward)


def roi_pool(feature_map: Tensor, roi: Box, out_h: int, out_w: int, scale: float = 1.0) -> Tensor:
    """Single-RoI form of :func:`roi_pool_many`; returns [C,out_h,out_w]."""
    return take(roi_pool_many(feature_map, [roi], out_h, out_w, scale), 0)


def take(x: Tensor, index: int) -> Tensor:
    """Row ``index`` of a batched tensor."""

    def backward(g):
        d = np.zeros_like(x.data)
        d[index] = g
        return (d,)

    return _result(x.data[index], (x,), backward)


def stack(maps: Sequence[Tensor]) -> Tensor:
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise DimensionError(f"stack: maps disagree in shape: {sorted(shapes)}")
    return _result(np.stack([m.data for m in maps]), tuple(maps), lambda g: tuple(g))


@dataclass
class RoiBatch:
    """N per-RoI feature maps with their classification scores and source boxes."""

    maps: list[Tensor]
    scores: list[float]
    source_boxes: list[Box]

    def __post_init__(self):
        n = len(self.maps)
        if n < 1:
            raise ValueError("RoiBatch must hold at least one map")
        if len(self.scores) != n or len(self.source_boxes) != n:
            raise ValueError(f"RoiBatch lists disagree: {n} maps, {len(self.scores)} scores, "
                             f"{len(self.source_boxes)} boxes")
        shapes = {m.shape for m in self.maps}
        if len(shapes) != 1:
            raise DimensionError(f"RoiBatch maps disagree in shape: {sorted(shapes)}")

    def __len__(self):
        return len(self.maps)


def batch_pool(batch: RoiBatch | Sequence[Tensor]) -> Tensor:
    """Elementwise max over the N maps of a batch: one [C,h,w] map out.

    The backward pass is a stop-gradient: every input map receives exactly zero.
    """
    maps = batch.maps if isinstance(batch, RoiBatch) else list(batch)
    if not maps:
        raise ValueError("batch_pool: empty batch")
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise DimensionError(f"batch_pool: maps disagree in shape: {sorted(shapes)}")
    out = np.max(np.stack([m.data for m in maps]), axis=0)
    return _result(out, tuple(maps), lambda g: tuple(np.zeros_like(m.data) for m in maps))


def channel_concat(maps: Sequence[Tensor]) -> Tensor:
    """Stack [C_i,h,w] maps along channels, in argument order."""
    if not maps:
        raise ValueError("channel_concat: nothing to concatenate")
    spatial = {m.shape[-2:] for m in maps}
    ranks = {m.ndim for m in maps}
    if len(spatial) != 1 or len(ranks) != 1:
        raise DimensionError(f"channel_concat: spatial dims disagree: {[m.shape for m in maps]}")
    axis = -3
    bounds = np.cumsum([m.shape[axis] for m in maps])[:-1]
    out = np.concatenate([m.data for m in maps], axis=axis)
    return _result(out, tuple(maps), lambda g: tuple(np.split(g, bounds, axis=axis)))


def sample_order(scores: Sequence[float], k: int) -> np.ndarray:
    """Indices of the ``min(k, N)`` highest scores, descending, ties to the lower index."""
    if k < 1:
        raise ValueError(f"top-k needs k >= 1, got {k}")
    s = np.asarray(scores, dtype=float)
    return np.argsort(-s, kind="stable")[:k]


def roi_sampler(batch: RoiBatch, k: int) -> RoiBatch:
    order = sample_order(batch.scores, k)
    return RoiBatch([batch.maps[i] for i in order],
                    [batch.scores[i] for i in order],
                    [batch.source_boxes[i] for i in order])
