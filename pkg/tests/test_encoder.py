import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convllava import ops
from convllava.checks import equivariance_check
from convllava.encoder import (PRESETS, EncoderConfig, FreezeSpec, build_encoder, convnext_block, count_params,
                               encode, encode_features, freeze_mask, param_shapes, token_grid)
from convllava.tensor import Tensor, grad, no_grad
from convllava.trainer import OptimizerState, adamw_step

TINY = PRESETS["tiny"]
TOY5 = PRESETS["toy5"]


@pytest.fixture(scope="module")
def convnext_l():
    return build_encoder(PRESETS["convnext-l"], seed=0)


class TestConfig:
    def test_downsample_factor(self):
        assert PRESETS["convnext-l"].downsample_factor == 32
        assert PRESETS["convnext-l-5"].downsample_factor == 64
        assert TOY5.downsample_factor == 64

    def test_default_depths(self):
        cfg = EncoderConfig()
        assert sum(cfg.depths) == 36
        assert cfg.total_blocks == 36
        assert PRESETS["convnext-l-5"].stage_channels[-1] == 3072
        assert PRESETS["convnext-l-5"].stage_depths[-1] == 6

    @pytest.mark.parametrize("kw", [dict(depths=(1, 1), channels=(4,)), dict(depths=(0,), channels=(4,)),
                                    dict(depths=(1,) * 6, channels=(4,) * 6)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            EncoderConfig(**kw)


class TestBuild:
    def test_hand_count_single_stage(self):
        cfg = EncoderConfig(depths=(1,), channels=(8,), stem_patch=4)
        stem = 3 * 8 * 4 * 4 + 8 + 2 * 8
        block = (8 * 7 * 7 + 8) + 2 * 8 + (8 * 32 + 32) + (32 * 8 + 8) + 8
        final_norm = 2 * 8
        assert stem + block + final_norm == 1400
        assert count_params(cfg) == 1400
        assert build_encoder(cfg).param_count() == 1400

    def test_convnext_l_count(self):
        n = count_params(PRESETS["convnext-l"])
        assert abs(n - 200_000_000) / 200_000_000 < 0.05

    def test_deterministic(self):
        a, b = build_encoder(TINY, seed=5), build_encoder(TINY, seed=5)
        for k in a.params:
            assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
        c = build_encoder(TINY, seed=6)
        assert any(a.params[k].data.tobytes() != c.params[k].data.tobytes() for k in a.params)

    def test_init_statistics(self):
        state = build_encoder(EncoderConfig(depths=(2,), channels=(64,)), seed=0)
        w = state.params["stages.0.blocks.0.pwconv1.weight"].data
        assert np.abs(w).max() <= 0.04 + 1e-7
        assert abs(w.std() - 0.0176) < 0.002  # std of N(0, 0.02) truncated at two sigma
        np.testing.assert_array_equal(state.params["stages.0.blocks.0.pwconv1.bias"].data, 0.0)
        np.testing.assert_array_equal(state.params["stages.0.blocks.1.gamma"].data, np.float32(1e-6))

    def test_names_unique_and_shapes_match(self):
        state = build_encoder(TOY5)
        shapes = param_shapes(TOY5)
        assert list(state.params) == list(shapes)
        for k, p in state.params.items():
            assert p.shape == shapes[k]


class TestEncode:
    @pytest.mark.parametrize("cfg,res,n", [("toy5", 1536, 576), ("toy5", 1024, 256), ("tiny", 64, 16)])
    def test_token_counts(self, cfg, res, n):
        state = build_encoder(PRESETS[cfg])
        with no_grad():
            out = encode(state, np.zeros((1, 3, res, res), dtype=np.float32))
        assert out.count == n and out.tokens.shape == (1, n, PRESETS[cfg].out_channels)

    def test_four_stage_768(self):
        cfg = EncoderConfig(depths=(1, 1, 1, 1), channels=(4, 8, 8, 8))
        with no_grad():
            out = encode(build_encoder(cfg), np.zeros((1, 3, 768, 768), dtype=np.float32))
        assert (out.grid_h, out.grid_w, out.count) == (24, 24, 576)

    def test_row_major_flatten(self):
        state = build_encoder(TINY, seed=1)
        x = np.random.default_rng(0).normal(size=(1, 3, 48, 80)).astype(np.float32)
        with no_grad():
            feats = encode_features(state, Tensor(x)).data
            toks = encode(state, x)
        assert (toks.grid_h, toks.grid_w) == (3, 5)
        np.testing.assert_array_equal(toks.tokens.data[0, 1 * 5 + 3], feats[0, :, 1, 3])

    def test_too_small(self):
        with pytest.raises(ValueError, match="minimum size 64x64"):
            encode(build_encoder(TOY5), np.zeros((1, 3, 63, 128), dtype=np.float32))

    def test_zeroed_branch_is_identity(self, rng):
        cfg = EncoderConfig(depths=(1, 1, 1, 1), channels=(4, 8, 8, 8))
        state = build_encoder(cfg)
        p = state.params
        p["stages.1.blocks.0.pwconv2.weight"].data[:] = 0
        p["stages.1.blocks.0.gamma"].data[:] = 0
        x = Tensor(rng.normal(size=(2, 8, 5, 5)).astype(np.float32))
        with no_grad():
            y = convnext_block(x, p, "stages.1.blocks.0", cfg)
        np.testing.assert_array_equal(y.data, x.data)

    @settings(max_examples=15, deadline=None)
    @given(gh=st.integers(1, 6), gw=st.integers(1, 6))
    def test_token_count_law(self, gh, gw):
        state = build_encoder(TINY)
        with no_grad():
            out = encode(state, np.zeros((1, 3, 16 * gh, 16 * gw), dtype=np.float32))
        assert out.count == gh * gw == out.tokens.shape[1]
        assert token_grid(TINY, 16 * gh, 16 * gw) == (gh, gw)

    def test_aspect_ratio(self):
        with no_grad():
            out = encode(build_encoder(TINY), np.zeros((1, 3, 32, 96), dtype=np.float32))
        assert (out.grid_h, out.grid_w) == (2, 6)

    def test_doubling_side_quadruples_tokens(self):
        state = build_encoder(TINY)
        with no_grad():
            a = encode(state, np.zeros((1, 3, 48, 32), dtype=np.float32)).count
            b = encode(state, np.zeros((1, 3, 96, 64), dtype=np.float32)).count
        assert b == 4 * a


class TestEquivariance:
    def test_toy5_shift_one_cell(self):
        rep = equivariance_check(TOY5, shift=64, seed=0)
        assert rep.compared_cells > 0
        assert rep.max_abs_diff < 1e-5

    def test_tiny_shift_two_cells(self):
        cfg = dataclasses.replace(TINY, dtype="float64")
        rep = equivariance_check(cfg, shift=32, seed=1)
        assert rep.compared_cells > 0 and rep.max_abs_diff < 1e-5

    def test_full_strength_blocks(self):
        # layer-scale 1 makes every block matter, so border cells really do differ
        cfg = dataclasses.replace(TOY5, layer_scale_init=1.0)
        rep = equivariance_check(cfg, shift=64, seed=2)
        assert rep.compared_cells > 0 and rep.max_abs_diff < 1e-5
        state = build_encoder(cfg, seed=2)
        canvas = np.random.default_rng(2).normal(size=(1, 3, 128, 20 * 64)).astype(np.float32)
        with no_grad():
            a = encode_features(state, Tensor(canvas[..., :19 * 64])).data
            b = encode_features(state, Tensor(canvas[..., 64:])).data
        assert np.abs(a[..., 1] - b[..., 0]).max() > 1e-3  # border cell sees the crop edge

    def test_shift_must_be_multiple(self):
        with pytest.raises(ValueError, match="multiple"):
            equivariance_check(TINY, shift=8)


class TestFreeze:
    def test_last_18_blocks(self, convnext_l):
        freeze_mask(convnext_l, "last_n_blocks:18")
        open_blocks = {(int(k.split(".")[1]), int(k.split(".")[3]))
                       for k, p in convnext_l.params.items() if p.requires_grad}
        expected = {(2, b) for b in range(12, 27)} | {(3, b) for b in range(3)}
        assert open_blocks == expected
        assert all(".blocks." in k for k, p in convnext_l.params.items() if p.requires_grad)

    def test_none_and_all(self, convnext_l):
        assert freeze_mask(convnext_l, "none") == 0
        assert freeze_mask(convnext_l, {"mode": "all"}) == convnext_l.param_count()

    def test_from_stage_3_on_five_stages(self):
        state = build_encoder(TOY5)
        n = freeze_mask(state, FreezeSpec("from_stage", 3))
        for k, p in state.params.items():
            frozen = k.startswith("stem.") or k.startswith("stages.0.") or k.startswith("stages.1.")
            assert p.requires_grad != frozen, k
        assert n == state.trainable_count() > 0

    @pytest.mark.parametrize("spec", ["last_n_blocks:37", "from_stage:0", "from_stage:5", "bogus", "last_n_blocks"])
    def test_out_of_range(self, convnext_l, spec):
        with pytest.raises(ValueError):
            freeze_mask(convnext_l, spec)

    def test_frozen_unchanged_after_step(self, rng):
        state = build_encoder(TINY, seed=0)
        freeze_mask(state, "from_stage:5")
        before = {k: p.data.copy() for k, p in state.params.items()}
        x = Tensor(rng.normal(size=(1, 3, 32, 32)).astype(np.float32))
        loss = ops.sum(ops.mul(encode(state, x).tokens, encode(state, x).tokens))
        grads = grad(loss, state.params)
        adamw_step(state.params, grads, OptimizerState(), lr=1e-2)
        for k, p in state.params.items():
            changed = p.data.tobytes() != before[k].tobytes()
            assert changed == p.requires_grad, k
