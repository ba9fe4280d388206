"""Saccade identity/invariance, group/recover round trips, hybrid layout,
fixation recovery, and arrangement variants."""

import numpy as np
import numpy.testing as npt
import pytest

from safire import tensor as T
from safire.sflayer import (
    SfLayerState, arrange_variant, build_hybrid, fixation, group,
    init_fixation, init_saccade, init_sf_layer, recover, saccade, sf_layer,
)
from safire.tensor import Tensor, ShapeError, backward


def make_state(rng, h, w, c, l_len):
    return SfLayerState(
        f_v=Tensor(rng.normal(size=(h, w, c))),
        f_t=Tensor(rng.normal(size=(l_len, c))),
    )


class TestSaccade:
    def test_identity_at_init(self):
        rng = np.random.default_rng(0)
        params = init_saccade(rng, width=6, expand=2, d_state=4)
        state = make_state(rng, 4, 4, 6, 5)
        out = saccade(state, params)
        # gamma is exactly zero at init, so the map passes through bitwise
        npt.assert_array_equal(out.f_v.data, state.f_v.data)
        assert out.f_t is state.f_t

    def test_pooled_conditioning_ignores_text_order(self):
        rng = np.random.default_rng(1)
        params = init_saccade(rng, width=4, expand=2, d_state=3)
        # leave identity init so the modulation actually depends on the text
        params.w_pool.data[:] = rng.normal(size=params.w_pool.shape) * 0.3
        state = make_state(rng, 4, 4, 4, 6)
        out1 = saccade(state, params)
        shuffled = SfLayerState(
            f_v=state.f_v, f_t=Tensor(state.f_t.data[::-1].copy()))
        out2 = saccade(shuffled, params)
        npt.assert_array_equal(out1.f_v.data, out2.f_v.data)

    def test_modulation_changes_map_once_gamma_moves(self):
        rng = np.random.default_rng(2)
        params = init_saccade(rng, width=4, expand=2, d_state=3)
        params.b_pool.data[8:] = 0.5  # gamma third
        state = make_state(rng, 4, 4, 4, 5)
        out = saccade(state, params)
        assert not np.allclose(out.f_v.data, state.f_v.data)

    def test_text_passes_through_untouched(self):
        rng = np.random.default_rng(3)
        params = init_saccade(rng, width=4, expand=2, d_state=3)
        state = make_state(rng, 2, 2, 4, 3)
        assert saccade(state, params).f_t is state.f_t


class TestGroupRecover:
    @pytest.mark.parametrize("h,w,win", [(4, 4, 2), (4, 8, 4), (8, 8, 2),
                                         (6, 9, 3), (16, 16, 4)])
    def test_round_trip_bit_exact(self, h, w, win):
        rng = np.random.default_rng(5)
        f_v = Tensor(rng.normal(size=(h, w, 3)))
        windows, layout = group(f_v, win)
        assert len(windows) == (h // win) * (w // win)
        rows = T.concat_rows(windows)
        back = recover(rows, layout)
        npt.assert_array_equal(back.data, f_v.data)

    def test_window_contents_row_major(self):
        # 4x4 map, 2x2 windows: first window holds flat tokens 0,1,4,5
        f_v = Tensor(np.arange(16, dtype=np.float64).reshape(4, 4, 1))
        windows, _ = group(f_v, 2)
        npt.assert_array_equal(windows[0].data.reshape(-1), [0, 1, 4, 5])
        npt.assert_array_equal(windows[1].data.reshape(-1), [2, 3, 6, 7])
        npt.assert_array_equal(windows[2].data.reshape(-1), [8, 9, 12, 13])

    def test_indivisible_rejected(self):
        f_v = Tensor(np.zeros((5, 4, 2)))
        with pytest.raises(ShapeError):
            group(f_v, 2)

    def test_gradient_is_a_permutation(self):
        rng = np.random.default_rng(7)
        f_v = Tensor(rng.normal(size=(4, 4, 2)), requires_grad=True)
        windows, layout = group(f_v, 2)
        back = recover(T.concat_rows(windows), layout)
        backward(T.sum_all(back * Tensor(rng.normal(size=(4, 4, 2)))))
        assert f_v.grad is not None and np.all(np.isfinite(f_v.grad))


class TestHybrid:
    def test_length_and_interleave_order(self):
        rng = np.random.default_rng(8)
        h = w = 4
        win, l_len, c = 2, 3, 2
        f_v = Tensor(rng.normal(size=(h, w, c)))
        f_t = Tensor(rng.normal(size=(l_len, c)))
        windows, glayout = group(f_v, win)
        hybrid, lay = build_hybrid(windows, f_t, glayout)
        p = (h // win) * (w // win)
        assert hybrid.shape == (h * w + p * l_len, c)
        assert lay.repeats == p
        # hybrid = [W1, T, W2, T, ...]: text rows repeat the same values
        ww = win * win
        for k in range(p):
            start = k * (ww + l_len)
            npt.assert_array_equal(hybrid.data[start:start + ww],
                                   windows[k].data)
            npt.assert_array_equal(
                hybrid.data[start + ww:start + ww + l_len], f_t.data)

    def test_recover_indices_invert_grouping(self):
        rng = np.random.default_rng(9)
        f_v = Tensor(rng.normal(size=(4, 4, 3)))
        f_t = Tensor(rng.normal(size=(2, 3)))
        windows, glayout = group(f_v, 2)
        hybrid, lay = build_hybrid(windows, f_t, glayout)
        img = hybrid.data[lay.recover_image].reshape(4, 4, 3)
        npt.assert_array_equal(img, f_v.data)


class TestArrangeVariant:
    def test_lengths(self):
        rng = np.random.default_rng(10)
        f_v = Tensor(rng.normal(size=(4, 4, 2)))
        f_t = Tensor(rng.normal(size=(3, 2)))
        hv, lv = arrange_variant(f_v, f_t, "vanilla", window=2)
        assert hv.shape[0] == 16 + 3 and lv.repeats == 1
        hr, lr = arrange_variant(f_v, f_t, "repeat", window=2, repeat_k=4)
        assert hr.shape[0] == 16 + 4 * 3 and lr.repeats == 4
        hf, lf = arrange_variant(f_v, f_t, "fixate", window=2)
        assert hf.shape[0] == 16 + 4 * 3 and lf.repeats == 4

    def test_every_image_token_exactly_once(self):
        rng = np.random.default_rng(11)
        f_v = Tensor(np.arange(32, dtype=np.float64).reshape(4, 4, 2))
        f_t = Tensor(rng.normal(size=(3, 2)))
        for variant in ("vanilla", "repeat", "fixate"):
            hybrid, lay = arrange_variant(f_v, f_t, variant, window=2,
                                          repeat_k=2)
            img = hybrid.data[lay.recover_image]
            npt.assert_array_equal(img, f_v.data.reshape(16, 2))

    def test_unknown_variant_rejected(self):
        f_v = Tensor(np.zeros((2, 2, 1)))
        f_t = Tensor(np.zeros((1, 1)))
        with pytest.raises(ShapeError):
            arrange_variant(f_v, f_t, "zigzag", window=2)


class TestFixation:
    def test_shapes_preserved(self):
        rng = np.random.default_rng(12)
        params = init_fixation(rng, width=4, expand=2, d_state=3, window=2,
                               repeats=4)
        state = make_state(rng, 4, 4, 4, 5)
        out = fixation(state, params)
        assert out.f_v.shape == (4, 4, 4)
        assert out.f_t.shape == (5, 4)

    def test_text_recovery_is_weighted_mean_of_repeats(self):
        rng = np.random.default_rng(13)
        params = init_fixation(rng, width=3, expand=2, d_state=2, window=2,
                               repeats=4)
        params.recover_w.data[:] = [1.0, 2.0, 3.0, 4.0]
        state = make_state(rng, 4, 4, 3, 2)
        hybrid, lay = arrange_variant(state.f_v, state.f_t, "fixate", 2)
        from safire.ssm import vssm_block
        scanned = vssm_block(hybrid, params.vssm, layout=None)
        copies = scanned.data[lay.text_positions]  # [P, L, C]
        expect = np.tensordot([1.0, 2.0, 3.0, 4.0], copies, axes=1) / 4
        out = fixation(state, params)
        npt.assert_allclose(out.f_t.data, expect, rtol=1e-12)

    def test_text_order_changes_image_output(self):
        rng = np.random.default_rng(14)
        params = init_fixation(rng, width=4, expand=2, d_state=3, window=2,
                               repeats=4)
        state = make_state(rng, 4, 4, 4, 5)
        out1 = fixation(state, params)
        swapped = SfLayerState(f_v=state.f_v,
                               f_t=Tensor(state.f_t.data[::-1].copy()))
        out2 = fixation(swapped, params)
        assert not np.allclose(out1.f_v.data, out2.f_v.data)

    def test_text_gradient_flows_through_all_repeats(self):
        rng = np.random.default_rng(15)
        params = init_fixation(rng, width=3, expand=2, d_state=2, window=2,
                               repeats=4)
        f_t = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        state = SfLayerState(f_v=Tensor(rng.normal(size=(4, 4, 3))), f_t=f_t)
        out = fixation(state, params)
        backward(T.sum_all(out.f_t))
        assert f_t.grad is not None
        assert np.all(np.abs(f_t.grad) > 0)

    def test_recover_weight_shape_checked(self):
        rng = np.random.default_rng(16)
        params = init_fixation(rng, width=3, expand=2, d_state=2, window=2,
                               repeats=3)  # wrong: 4x4/2x2 needs 4
        state = make_state(rng, 4, 4, 3, 2)
        with pytest.raises(ShapeError):
            fixation(state, params)


class TestSfLayer:
    def test_composition_order(self):
        # at init saccade is identity, so the layer equals fixation alone
        rng = np.random.default_rng(17)
        params = init_sf_layer(np.random.default_rng(17), width=4, expand=2,
                               d_state=3, window=2, repeats=4)
        state = make_state(rng, 4, 4, 4, 3)
        out = sf_layer(state, params)
        fix_only = fixation(state, params.fixation)
        npt.assert_array_equal(out.f_v.data, fix_only.f_v.data)
        npt.assert_array_equal(out.f_t.data, fix_only.f_t.data)

    def test_named_parameters_unique(self):
        params = init_sf_layer(np.random.default_rng(18), width=4, expand=2,
                               d_state=3, window=2, repeats=4)
        names = [n for n, _ in params.named("layer0")]
        assert len(names) == len(set(names))
        assert "layer0.saccade.w_pool" in names
        assert "layer0.fixation.recover_w" in names
