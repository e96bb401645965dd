"""FLOP accounting: runtime meters, analytic closed forms, reports.

Convention under test: one multiply-accumulate is 2 FLOPs, elementwise
ops are 1 per element.  Token-wise blocks (names suffixed .ss2d / .mlp)
must scale exactly linearly with the kept ratio in the analytic model
and match the meters within 2% when measured.
"""

import json

import numpy as np
import pytest

from sparsescan.backbone import BackboneConfig, init_backbone_params
from sparsescan.errors import ConfigError
from sparsescan.event_io import build_voxel_grid, generate_synthetic_scene, scene_preset
from sparsescan.flops import (
    NULL_METER,
    FlopsMeter,
    count_analytic,
    is_token_wise,
    measure,
)
from sparsescan.stca import run_stca

SMALL = BackboneConfig(height=32, width=32, patch=4, bins=2,
                       channels=(8, 12, 16, 24), n_state=4,
                       inner_expand=2, ipl_k=(2, 2, 2, 1))


def small_case(seed=0, p_keep=0.5):
    rng = np.random.default_rng(seed)
    g = SMALL.grid(0)
    voxels = rng.standard_normal((2 * SMALL.bins, SMALL.height, SMALL.width))
    scores = rng.uniform(0, 1, size=g)
    keep = rng.random(g) < p_keep
    keep.flat[0] = True
    return voxels, keep, scores


class TestMeter:
    def test_mac_counts_double(self):
        m = FlopsMeter()
        m.macs("blk", 10)
        assert m.flops["blk"] == 20

    def test_elem_counts_single(self):
        m = FlopsMeter()
        m.elem("blk", 10)
        assert m.flops["blk"] == 10

    def test_total_sums_blocks(self):
        m = FlopsMeter()
        m.macs("a", 3)
        m.elem("b", 4)
        assert m.total() == 10

    def test_null_meter_is_silent(self):
        before = NULL_METER.total()
        NULL_METER.macs("x", 100)
        NULL_METER.elem("x", 100)
        assert NULL_METER.total() == before == 0

    def test_token_wise_suffix_rule(self):
        assert is_token_wise("stage1.ss2d")
        assert is_token_wise("stage2.mlp")
        assert not is_token_wise("stage3.gci")
        assert not is_token_wise("stage1.lstm")
        assert not is_token_wise("embed")


class TestAnalytic:
    def test_ratio_one_reduction_zero(self):
        r = count_analytic(SMALL, [1.0, 1.0, 1.0, 1.0])
        assert r.sparse_total == r.dense_total
        assert r.reduction == 0.0

    def test_token_wise_blocks_scale_linearly(self):
        r = count_analytic(SMALL, [0.5, 0.5, 0.5, 0.5])
        for name, cost in r.blocks.items():
            if is_token_wise(name):
                assert cost.sparse == pytest.approx(0.5 * cost.dense)
            else:
                assert cost.sparse == cost.dense

    def test_monotone_in_ratio(self):
        lo = count_analytic(SMALL, [0.2, 0.5, 0.5, 0.5]).sparse_total
        hi = count_analytic(SMALL, [0.4, 0.5, 0.5, 0.5]).sparse_total
        assert lo <= hi

    def test_timesteps_multiplier(self):
        one = count_analytic(SMALL, [0.5] * 4, timesteps=1)
        three = count_analytic(SMALL, [0.5] * 4, timesteps=3)
        assert three.dense_total == 3 * one.dense_total
        assert three.sparse_total == 3 * one.sparse_total

    def test_bad_ratio_rejected(self):
        with pytest.raises(ConfigError):
            count_analytic(SMALL, [1.5, 0.5, 0.5, 0.5])
        with pytest.raises(ConfigError):
            count_analytic(SMALL, [0.5, 0.5])


class TestMeasured:
    def test_dense_run_matches_analytic(self):
        voxels, _, scores = small_case(seed=1)
        keep = np.ones(SMALL.grid(0), dtype=bool)
        params = init_backbone_params(SMALL, seed=1)
        measured = measure(SMALL, params, [voxels], scores, keep)
        analytic = count_analytic(SMALL, [1.0] * 4)
        for name, cost in measured.blocks.items():
            ref = analytic.blocks[name].dense
            assert cost.dense == pytest.approx(ref, rel=0.02), name

    def test_token_wise_ratio_equals_kept_ratio(self):
        voxels, keep, scores = small_case(seed=2, p_keep=0.4)
        params = init_backbone_params(SMALL, seed=2)
        r = measure(SMALL, params, [voxels], scores, keep)
        for name, cost in r.blocks.items():
            if is_token_wise(name) and cost.dense:
                stage = int(name[5]) - 1
                assert cost.sparse / cost.dense == pytest.approx(
                    r.kept_ratios[stage], abs=1e-12), name

    def test_empty_keep_zeroes_token_wise_blocks(self):
        voxels, _, scores = small_case(seed=3)
        keep = np.zeros(SMALL.grid(0), dtype=bool)
        params = init_backbone_params(SMALL, seed=3)
        r = measure(SMALL, params, [voxels], scores, keep)
        for name, cost in r.blocks.items():
            if is_token_wise(name):
                assert cost.sparse == 0, name

    def test_reduction_on_sparse_scene(self):
        """Desk config on a ~30% spatial-ratio scene lands in [0.20, 0.35]."""
        cfg = BackboneConfig()
        stream, _ = generate_synthetic_scene(scene_preset("sparse30"), seed=4)
        voxels = build_voxel_grid(stream, cfg.bins)
        res = run_stca(stream, patch=cfg.patch)
        params = init_backbone_params(cfg, seed=4)
        r = measure(cfg, params, [voxels.values], res.scores, res.keep)
        assert 0.20 <= r.reduction <= 0.35


class TestReport:
    def test_to_dict_shape(self):
        r = count_analytic(SMALL, [0.5] * 4)
        d = r.to_dict()
        assert set(d) == {"blocks", "kept_ratios", "totals", "reduction"}
        blk = d["blocks"]["stage1.ss2d"]
        assert set(blk) == {"dense", "sparse", "ratio", "token_wise"}
        assert d["totals"]["dense"] == r.dense_total

    def test_save_json(self, tmp_path):
        r = count_analytic(SMALL, [0.5] * 4)
        p = tmp_path / "report.json"
        r.save_json(p)
        loaded = json.loads(p.read_text())
        assert loaded["reduction"] == pytest.approx(r.reduction)

    def test_table_mentions_every_block(self):
        r = count_analytic(SMALL, [0.5] * 4)
        text = r.table()
        for name in r.blocks:
            assert name in text
