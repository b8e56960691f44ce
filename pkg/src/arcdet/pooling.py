"""Mixture RoI pooling: tiling with rounding compensation, position-
sensitive average pooling over RoI/local/global regions, and the exact
adjoint used by training.

Cells are integer pixel ranges.  A box is snapped outward to whole map
pixels, each axis is split into floor-sized cells with the last cell
absorbing the remainder, and cells of boxes smaller than the grid are
widened to one pixel (overlapping in that degenerate case only).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import CenterBox, CornerBox, enlarge
from .psmap import ARConfig, MapKey, PSMapSet


class DegenerateRoIError(ValueError):
    """The RoI does not intersect the map lattice."""


@dataclass
class CellGrid:
    """Integer cell bounds of one tiled box: (h, w, 4) as x0,y0,x1,y1."""

    bounds: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.bounds.shape[0], self.bounds.shape[1]

    def cell(self, j: int, k: int) -> CornerBox:
        x0, y0, x1, y1 = (float(v) for v in self.bounds[j, k])
        return CornerBox(x0, y0, x1 - x0, y1 - y0)

    def describe(self) -> str:
        h, w = self.shape
        lines = [f"grid {h}x{w}"]
        for j in range(h):
            cells = []
            for k in range(w):
                x0, y0, x1, y1 = self.bounds[j, k]
                cells.append(f"[{x0},{y0})-[{x1},{y1})")
            lines.append(" ".join(cells))
        return "\n".join(lines)


@dataclass
class PooledFeature:
    """Per-RoI pooled feature: role blocks stacked as (roles*K, h, w)."""

    values: np.ndarray
    component: int
    source_roi: CenterBox
    grids: dict[str, CellGrid]


def _clip_box(
    x: float, y: float, wd: float, ht: float, width: int, height: int
) -> CornerBox:
    """Clip a map-unit box to the lattice, keeping at least one map cell."""
    x0 = min(max(x, 0.0), float(width))
    y0 = min(max(y, 0.0), float(height))
    x1 = min(max(x + wd, 0.0), float(width))
    y1 = min(max(y + ht, 0.0), float(height))
    if x1 - x0 < 1.0:
        x0 = max(0.0, min(x0, width - 1.0))
        x1 = x0 + 1.0
    if y1 - y0 < 1.0:
        y0 = max(0.0, min(y0, height - 1.0))
        y1 = y0 + 1.0
    return CornerBox(x0, y0, x1 - x0, y1 - y0)


def to_map_coords(b: CenterBox, stride: int, width: int, height: int) -> CornerBox:
    """Corner-form RoI in map units: divide by stride, clip, floor size at 1."""
    x = (b.x - b.wd / 2.0) / stride
    y = (b.y - b.ht / 2.0) / stride
    wd = b.wd / stride
    ht = b.ht / stride
    if x >= width or x + wd <= 0 or y >= height or y + ht <= 0:
        raise DegenerateRoIError(
            f"RoI {b} lies entirely outside the {width}x{height} map"
        )
    return _clip_box(x, y, wd, ht, width, height)


def _split_axis(origin: int, extent: int, n: int, out: np.ndarray) -> None:
    # floor-sized cells, the last absorbs the remainder; degenerate cells
    # (extent < n) are widened to one pixel inside the parent
    base = extent // n
    for idx in range(n):
        lo = origin + idx * base
        hi = origin + (idx + 1) * base if idx < n - 1 else origin + extent
        lo = min(lo, origin + extent - 1)
        hi = min(max(hi, lo + 1), origin + extent)
        out[idx, 0] = lo
        out[idx, 1] = hi


def tile(b: CornerBox, h: int, w: int) -> CellGrid:
    """Split a map-unit box into an h x w grid of integer pixel cells."""
    if h < 1 or w < 1:
        raise ValueError(f"grid must be at least 1x1, got {h}x{w}")
    x0 = int(np.floor(b.x))
    y0 = int(np.floor(b.y))
    x1 = max(int(np.ceil(b.x + b.wd)), x0 + 1)
    y1 = max(int(np.ceil(b.y + b.ht)), y0 + 1)
    cols = np.empty((w, 2), dtype=np.int64)
    rows = np.empty((h, 2), dtype=np.int64)
    _split_axis(x0, x1 - x0, w, cols)
    _split_axis(y0, y1 - y0, h, rows)
    bounds = np.empty((h, w, 4), dtype=np.int64)
    for j in range(h):
        for k in range(w):
            bounds[j, k, 0] = cols[k, 0]
            bounds[j, k, 1] = rows[j, 0]
            bounds[j, k, 2] = cols[k, 1]
            bounds[j, k, 3] = rows[j, 1]
    return CellGrid(bounds)


@njit(cache=True)
def _pool_cells(src, bounds, k, out):
    h = bounds.shape[0]
    w = bounds.shape[1]
    for j in range(h):
        for kk in range(w):
            x0 = bounds[j, kk, 0]
            y0 = bounds[j, kk, 1]
            x1 = bounds[j, kk, 2]
            y1 = bounds[j, kk, 3]
            area = (x1 - x0) * (y1 - y0)
            base = (j * w + kk) * k
            for q in range(k):
                acc = 0.0
                for yy in range(y0, y1):
                    for xx in range(x0, x1):
                        acc += src[base + q, yy, xx]
                out[q, j, kk] = acc / area


@njit(cache=True)
def _pool_cells_backward(grad_src, bounds, k, upstream, block):
    h = bounds.shape[0]
    w = bounds.shape[1]
    for j in range(h):
        for kk in range(w):
            x0 = bounds[j, kk, 0]
            y0 = bounds[j, kk, 1]
            x1 = bounds[j, kk, 2]
            y1 = bounds[j, kk, 3]
            area = (x1 - x0) * (y1 - y0)
            base = (j * w + kk) * k
            for q in range(k):
                g = upstream[block + q, j, kk] / area
                for yy in range(y0, y1):
                    for xx in range(x0, x1):
                        grad_src[base + q, yy, xx] += g


def _role_boxes(
    cfg: ARConfig, b: CenterBox, width: int, height: int
) -> dict[str, CornerBox]:
    roi = to_map_coords(b, cfg.stride, width, height)
    boxes = {"roi": roi}
    if "local" in cfg.roles:
        grown = enlarge(roi, cfg.ctx_scale)
        boxes["local"] = _clip_box(grown.x, grown.y, grown.wd, grown.ht, width, height)
    if "global" in cfg.roles:
        boxes["global"] = CornerBox(0.0, 0.0, float(width), float(height))
    return boxes


def pool_roi(
    maps: PSMapSet, cfg: ARConfig, b: CenterBox, component: int
) -> PooledFeature:
    """Average-pool each cell of each role's box from that role's map."""
    if not 0 <= component < cfg.n_components:
        raise ValueError(f"component {component} out of range")
    h, w = cfg.tilings[component]
    k = cfg.cell_channels
    width, height = maps.width, maps.height
    boxes = _role_boxes(cfg, b, width, height)
    values = np.empty(
        (len(cfg.roles) * k, h, w), dtype=maps.get(cfg, component, "roi").dtype
    )
    grids: dict[str, CellGrid] = {}
    for r, role in enumerate(cfg.roles):
        grid = tile(boxes[role], h, w)
        grids[role] = grid
        src = maps.get(cfg, component, role)
        _pool_cells(src, grid.bounds, k, values[r * k : (r + 1) * k])
    return PooledFeature(values, component, b, grids)


def pool_backward(
    feature: PooledFeature,
    upstream: np.ndarray,
    cfg: ARConfig,
    grad_maps: dict[MapKey, np.ndarray],
) -> None:
    """Accumulate the adjoint of pool_roi into per-map gradient buffers.

    Every pixel of cell (j,k) in role r receives upstream[r*K+q, j, k]
    divided by the cell area.  Accumulation order is fixed (roles, then
    cells, then pixels), so repeated runs are bit-identical.
    """
    if upstream.shape != feature.values.shape:
        raise ValueError(
            f"upstream shape {upstream.shape} != pooled shape {feature.values.shape}"
        )
    k = cfg.cell_channels
    for r, role in enumerate(cfg.roles):
        key = cfg.map_key(feature.component, role)
        _pool_cells_backward(
            grad_maps[key], feature.grids[role].bounds, k, upstream, r * k
        )
