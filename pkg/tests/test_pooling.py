"""RoI tiling and position-sensitive average pooling."""

from __future__ import annotations

import numpy as np
import pytest

from arcdet.geometry import CenterBox, CornerBox
from arcdet.pooling import (
    DegenerateRoIError,
    PooledFeature,
    pool_backward,
    pool_roi,
    tile,
    to_map_coords,
)
from arcdet.psmap import ARConfig, PSMapSet
from oracles import max_rel_err, num_grad, oracle_pool_roi


def make_cfg(**kw) -> ARConfig:
    base = dict(
        tilings=((2, 2),),
        cell_channels=2,
        num_classes=2,
        ctx_scale=1.5,
        stride=4,
        context="local_global",
    )
    base.update(kw)
    return ARConfig(**base)


def make_maps(cfg: ARConfig, height, width, rng, dtype=np.float64) -> PSMapSet:
    maps = {}
    for key in cfg.map_keys:
        n = cfg.map_channels(key[0])
        maps[key] = rng.normal(size=(n, height, width)).astype(dtype)
    return PSMapSet(maps)


class TestToMapCoords:
    def test_stride_one_is_clipped_identity(self):
        out = to_map_coords(CenterBox(4, 4, 4, 4), 1, 16, 16)
        assert (out.x, out.y, out.wd, out.ht) == (2, 2, 4, 4)

    def test_division_example(self):
        out = to_map_coords(CenterBox(32, 32, 64, 32), 16, 8, 8)
        assert (out.x, out.y, out.wd, out.ht) == (0, 1, 4, 2)

    def test_clipping(self):
        out = to_map_coords(CenterBox(0, 0, 8, 8), 1, 16, 16)
        assert (out.x, out.y) == (0, 0)
        assert (out.wd, out.ht) == (4, 4)

    def test_far_outside_raises(self):
        with pytest.raises(DegenerateRoIError):
            to_map_coords(CenterBox(1000, 1000, 4, 4), 1, 16, 16)

    def test_sliver_gets_minimum_size(self):
        out = to_map_coords(CenterBox(0.1, 8, 0.1, 4), 1, 16, 16)
        assert out.wd >= 1.0
        assert 0 <= out.x and out.x + out.wd <= 16


class TestTile:
    def test_remainder_compensation(self):
        grid = tile(CornerBox(0, 0, 10, 7), 3, 4)
        widths = [grid.cell(0, k).wd for k in range(4)]
        heights = [grid.cell(j, 0).ht for j in range(3)]
        assert widths == [2, 2, 2, 4]
        assert heights == [2, 2, 3]

    def test_exact_division(self):
        grid = tile(CornerBox(0, 0, 8, 8), 4, 4)
        for j in range(4):
            for k in range(4):
                c = grid.cell(j, k)
                assert (c.wd, c.ht) == (2, 2)
                assert (c.x, c.y) == (2 * k, 2 * j)

    def test_partition_property(self):
        rng = np.random.default_rng(20240814)
        for _ in range(100):
            w_cells = int(rng.integers(1, 8))
            h_cells = int(rng.integers(1, 8))
            wd = int(rng.integers(w_cells, 30))
            ht = int(rng.integers(h_cells, 30))
            x = int(rng.integers(0, 10))
            y = int(rng.integers(0, 10))
            grid = tile(CornerBox(x, y, wd, ht), h_cells, w_cells)
            cover = np.zeros((ht, wd), dtype=int)
            for j in range(h_cells):
                for k in range(w_cells):
                    x0, y0, x1, y1 = grid.bounds[j, k]
                    cover[y0 - y : y1 - y, x0 - x : x1 - x] += 1
            assert np.all(cover == 1)

    def test_degenerate_box_cells_clamped_inside(self):
        grid = tile(CornerBox(3, 3, 2, 1), 3, 4)
        for j in range(3):
            for k in range(4):
                x0, y0, x1, y1 = grid.bounds[j, k]
                assert x1 - x0 >= 1 and y1 - y0 >= 1
                assert 3 <= x0 < x1 <= 5
                assert 3 <= y0 < y1 <= 4

    def test_fractional_box_snaps_outward(self):
        grid = tile(CornerBox(1.4, 2.6, 3.2, 1.9), 1, 1)
        x0, y0, x1, y1 = grid.bounds[0, 0]
        assert (x0, y0, x1, y1) == (1, 2, 5, 5)


class TestPoolRoi:
    def test_constant_map_pools_constant(self):
        cfg = make_cfg()
        maps = {
            key: np.full((cfg.map_channels(0), 8, 8), 3.25) for key in cfg.map_keys
        }
        feat = pool_roi(PSMapSet(maps), cfg, CenterBox(16, 16, 16, 16), 0)
        assert feat.values.shape == (6, 2, 2)
        assert np.all(feat.values == 3.25)

    def test_matches_scalar_oracle_on_handmade_map(self):
        cfg = make_cfg(context="none", stride=1)
        # distinct ramps per channel on a 4x6 map
        n = cfg.map_channels(0)
        base = np.arange(4 * 6, dtype=np.float64).reshape(4, 6)
        maps = {(0, "roi"): np.stack([base * (c + 1) for c in range(n)])}
        box = CenterBox(3, 2, 6, 4)
        feat = pool_roi(PSMapSet(maps), cfg, box, 0)
        want = oracle_pool_roi(
            {"roi": maps[(0, "roi")]}, box, (2, 2), cfg.cell_channels, 1, cfg.ctx_scale
        )
        np.testing.assert_array_equal(feat.values, want)

    def test_matches_oracle_on_random_triples(self):
        rng = np.random.default_rng(20240815)
        for trial in range(40):
            h = int(rng.integers(1, 6))
            w = int(rng.integers(1, 6))
            k = int(rng.integers(1, 4))
            stride = int(rng.choice([1, 2, 4, 8]))
            cfg = make_cfg(tilings=((h, w),), cell_channels=k, stride=stride)
            height = int(rng.integers(6, 20))
            width = int(rng.integers(6, 20))
            maps = make_maps(cfg, height, width, rng)
            span_x = width * stride
            span_y = height * stride
            box = CenterBox(
                float(rng.uniform(0, span_x)),
                float(rng.uniform(0, span_y)),
                float(rng.uniform(1, span_x)),
                float(rng.uniform(1, span_y)),
            )
            feat = pool_roi(maps, cfg, box, 0)
            want = oracle_pool_roi(
                {role: maps.maps[cfg.map_key(0, role)] for role in cfg.roles},
                box,
                (h, w),
                k,
                stride,
                cfg.ctx_scale,
            )
            np.testing.assert_array_equal(feat.values, want)

    def test_unit_context_with_shared_maps_duplicates_roi_block(self):
        cfg = make_cfg(ctx_scale=1.0, share_maps=True)
        rng = np.random.default_rng(5)
        maps = make_maps(cfg, 8, 8, rng)
        feat = pool_roi(maps, cfg, CenterBox(12, 14, 10, 9), 0)
        k = cfg.cell_channels
        np.testing.assert_array_equal(feat.values[:k], feat.values[k : 2 * k])

    def test_float32_stays_close_to_float64(self):
        cfg = make_cfg(tilings=((3, 4),))
        rng = np.random.default_rng(6)
        maps64 = make_maps(cfg, 10, 12, rng)
        maps32 = PSMapSet({k: v.astype(np.float32) for k, v in maps64.maps.items()})
        box = CenterBox(20, 18, 30, 22)
        f64 = pool_roi(maps64, cfg, box, 0)
        f32 = pool_roi(maps32, cfg, box, 0)
        assert f32.values.dtype == np.float32
        np.testing.assert_allclose(f32.values, f64.values, rtol=1e-5, atol=1e-5)

    def test_degenerate_roi_propagates(self):
        cfg = make_cfg()
        maps = make_maps(cfg, 8, 8, np.random.default_rng(0))
        with pytest.raises(DegenerateRoIError):
            pool_roi(PSMapSet(maps.maps), cfg, CenterBox(900, 900, 4, 4), 0)


class TestPoolBackward:
    def run_backward(self, cfg, maps, box, upstream):
        feat = pool_roi(maps, cfg, box, 0)
        grads = {key: np.zeros_like(arr) for key, arr in maps.maps.items()}
        pool_backward(feat, upstream, cfg, grads)
        return feat, grads

    def test_zero_upstream_gives_zero(self):
        cfg = make_cfg()
        maps = make_maps(cfg, 8, 8, np.random.default_rng(1))
        _, grads = self.run_backward(
            cfg, maps, CenterBox(16, 16, 12, 10), np.zeros((6, 2, 2))
        )
        assert not any(g.any() for g in grads.values())

    def test_cell_sum_equals_upstream(self):
        cfg = make_cfg()
        rng = np.random.default_rng(2)
        maps = make_maps(cfg, 8, 8, rng)
        upstream = rng.normal(size=(6, 2, 2))
        feat, grads = self.run_backward(cfg, maps, CenterBox(16, 16, 12, 10), upstream)
        k = cfg.cell_channels
        for r, role in enumerate(cfg.roles):
            grid = feat.grids[role]
            key = cfg.map_key(0, role)
            for j in range(2):
                for kk in range(2):
                    x0, y0, x1, y1 = grid.bounds[j, kk]
                    for q in range(k):
                        ch = (j * 2 + kk) * k + q
                        got = grads[key][ch, y0:y1, x0:x1].sum()
                        assert got == pytest.approx(upstream[r * k + q, j, kk])

    def test_matches_finite_differences(self):
        cfg = make_cfg(tilings=((2, 3),))
        rng = np.random.default_rng(3)
        maps = make_maps(cfg, 6, 7, rng)
        box = CenterBox(12, 10, 16, 12)
        upstream = rng.normal(size=(6, 2, 3))
        feat, grads = self.run_backward(cfg, maps, box, upstream)
        key = cfg.map_key(0, "local")

        def loss(arr):
            patched = dict(maps.maps)
            patched[key] = arr
            f = pool_roi(PSMapSet(patched), cfg, box, 0)
            return float(np.sum(f.values * upstream))

        want = num_grad(loss, maps.maps[key].copy())
        assert max_rel_err(grads[key], want) < 1e-4

    def test_adjoint_identity(self):
        cfg = make_cfg(tilings=((3, 2),))
        rng = np.random.default_rng(4)
        maps = make_maps(cfg, 9, 9, rng)
        box = CenterBox(18, 12, 20, 16)
        upstream = rng.normal(size=(6, 3, 2))
        feat, grads = self.run_backward(cfg, maps, box, upstream)
        lhs = float(np.sum(feat.values * upstream))
        rhs = sum(float(np.sum(maps.maps[k] * grads[k])) for k in grads)
        assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))

    def test_accumulates_across_rois(self):
        cfg = make_cfg()
        rng = np.random.default_rng(7)
        maps = make_maps(cfg, 8, 8, rng)
        boxes = [CenterBox(10, 10, 8, 8), CenterBox(20, 20, 10, 6)]
        upstream = [rng.normal(size=(6, 2, 2)) for _ in boxes]
        grads_both = {key: np.zeros_like(v) for key, v in maps.maps.items()}
        singles = []
        for b, u in zip(boxes, upstream):
            feat = pool_roi(maps, cfg, b, 0)
            pool_backward(feat, u, cfg, grads_both)
            alone = {key: np.zeros_like(v) for key, v in maps.maps.items()}
            pool_backward(feat, u, cfg, alone)
            singles.append(alone)
        for key in grads_both:
            np.testing.assert_allclose(
                grads_both[key], singles[0][key] + singles[1][key], rtol=1e-12
            )

    def test_transposed_tiling_pools_transposed(self):
        # axis-swapped maps with the transposed grid give transposed features
        cfg_a = make_cfg(tilings=((2, 3),), context="none", stride=1)
        cfg_b = make_cfg(tilings=((3, 2),), context="none", stride=1)
        rng = np.random.default_rng(8)
        height, width = 7, 9
        n = cfg_a.map_channels(0)
        src = rng.normal(size=(n, height, width))
        # channel ch of the swapped map must serve the transposed cell:
        # (j,k) slot q -> (k,j) slot q under the w x h grid
        k_ch = cfg_a.cell_channels
        swapped = np.empty((n, width, height))
        for j in range(2):
            for kk in range(3):
                for q in range(k_ch):
                    ch_a = (j * 3 + kk) * k_ch + q
                    ch_b = (kk * 2 + j) * k_ch + q
                    swapped[ch_b] = src[ch_a].T
        box = CenterBox(4.5, 3.5, 7, 5)
        tbox = CenterBox(3.5, 4.5, 5, 7)
        fa = pool_roi(PSMapSet({(0, "roi"): src}), cfg_a, box, 0)
        fb = pool_roi(PSMapSet({(0, "roi"): swapped}), cfg_b, tbox, 0)
        # same pixels averaged in transposed order: equal up to roundoff
        np.testing.assert_allclose(
            fb.values, np.transpose(fa.values, (0, 2, 1)), rtol=1e-12, atol=1e-14
        )

    def test_shape_mismatch_rejected(self):
        cfg = make_cfg()
        maps = make_maps(cfg, 8, 8, np.random.default_rng(0))
        feat = pool_roi(maps, cfg, CenterBox(16, 16, 12, 10), 0)
        grads = {key: np.zeros_like(v) for key, v in maps.maps.items()}
        with pytest.raises(ValueError):
            pool_backward(feat, np.zeros((5, 2, 2)), cfg, grads)
