"""Window process round trips, CSA/TCA identities and oracles, block
composition, MAC accounting."""

import numpy as np
import pytest

import inbn.tensor as tt
from inbn.attention import MultiHeadWeights, init_multi_head
from inbn.gim import (
    GimWeights,
    WindowedFeature,
    count_macs_csa,
    csa,
    gim_block,
    init_gim,
    tca,
    window_merge,
    window_partition,
)
from inbn.tensor import (
    ContractError,
    DivisibilityError,
    GradTape,
    Tensor,
    backward,
    count_macs,
    finite_diff_check,
)


def rand_weights(rng, c, n=2, dtype=np.float64):
    return init_multi_head(rng, c, c, n_heads=n, dtype=dtype)


class TestWindowProcess:
    def test_shape_arithmetic(self):
        f = Tensor(np.zeros((1, 14, 14, 8)))
        fw = window_partition(f, 7)
        assert fw.data.shape == (1, 49, 4, 8)

    def test_single_window_case(self):
        f = Tensor(np.zeros((1, 7, 7, 5)))
        fw = window_partition(f, 7)
        assert fw.data.shape == (1, 49, 1, 5)

    def test_round_trip_bitwise(self):
        rng = np.random.default_rng(0)
        f = Tensor(rng.normal(size=(1, 14, 14, 8)))
        back = window_merge(window_partition(f, 7))
        assert np.array_equal(back.data, f.data)

    def test_round_trip_shape_sweep(self):
        rng = np.random.default_rng(1)
        for _ in range(60):
            win = int(rng.integers(1, 5))
            gh, gw = rng.integers(1, 5, size=2)
            b = int(rng.integers(1, 3))
            c = int(rng.integers(1, 6))
            f = Tensor(rng.normal(size=(b, win * gh, win * gw, c)))
            back = window_merge(window_partition(f, win))
            assert np.array_equal(back.data, f.data)

    def test_layout_spot_check(self):
        # pixel (row 8, col 3) of a 14x14 map, win=7: window grid (1,0) ->
        # window index 2, in-window offset (1,3) -> position index 10
        rng = np.random.default_rng(2)
        f = Tensor(rng.normal(size=(1, 14, 14, 3)))
        fw = window_partition(f, 7)
        np.testing.assert_array_equal(fw.data.data[0, 1 * 7 + 3, 2, :], f.data[0, 8, 3, :])

    def test_full_layout_hand_enumeration(self):
        rng = np.random.default_rng(3)
        win, gh, gw, c = 2, 2, 3, 2
        f = rng.normal(size=(1, win * gh, win * gw, c))
        fw = window_partition(Tensor(f), win).data.data
        for r in range(win * gh):
            for col in range(win * gw):
                l = (r // win) * gw + (col // win)
                p = (r % win) * win + (col % win)
                np.testing.assert_array_equal(fw[0, p, l], f[0, r, col])

    def test_divisibility_error(self):
        with pytest.raises(DivisibilityError):
            window_partition(Tensor(np.zeros((1, 15, 14, 2))), 7)

    def test_constant_input(self):
        f = Tensor(np.full((1, 4, 4, 2), 1.5))
        out = window_merge(window_partition(f, 2))
        assert np.all(out.data == 1.5)


class TestCSA:
    def test_zero_input_zero_output(self):
        rng = np.random.default_rng(4)
        w = rand_weights(rng, 8)
        fw = window_partition(Tensor(np.zeros((1, 4, 4, 8))), 2)
        out = csa(fw, w)
        assert np.all(out.data.data == 0)

    def test_singleton_sequence(self):
        rng = np.random.default_rng(5)
        w = rand_weights(rng, 6, n=1)
        f = rng.normal(size=(1, 2, 2, 6))
        fw = window_partition(Tensor(f), 2)  # L = 1
        out = csa(fw, w)
        v = fw.data.data @ w.w_v.data
        ref = fw.data.data + v @ w.w_map.data
        np.testing.assert_allclose(out.data.data, ref, atol=1e-13)

    def test_matches_explicit_loop_oracle(self):
        rng = np.random.default_rng(6)
        c, n, win = 8, 2, 2
        w = rand_weights(rng, c, n=n)
        f = rng.normal(size=(1, 4, 4, c))
        out = csa(window_partition(Tensor(f), win), w)

        # loop oracle: enumerate windows and in-window offsets by hand
        gh, gw = 4 // win, 4 // win
        fw = np.zeros((win * win, gh * gw, c))
        for r in range(4):
            for col in range(4):
                l = (r // win) * gw + (col // win)
                p = (r % win) * win + (col % win)
                fw[p, l] = f[0, r, col]
        q_all = fw @ w.w_q.data
        k_all = fw @ w.w_k.data
        v_all = fw @ w.w_v.data
        dh = c // n
        ref = np.zeros_like(fw)
        for p in range(win * win):
            heads = []
            for i in range(n):
                q = q_all[p, :, i * dh : (i + 1) * dh]
                k = k_all[p, :, i * dh : (i + 1) * dh]
                v = v_all[p, :, i * dh : (i + 1) * dh]
                logits = q @ k.T / np.sqrt(c)
                e = np.exp(logits - logits.max(axis=1, keepdims=True))
                a = e / e.sum(axis=1, keepdims=True)
                heads.append(a @ v)
            ref[p] = fw[p] + np.concatenate(heads, axis=1) @ w.w_map.data
        assert np.max(np.abs(out.data.data[0] - ref)) < 1e-12

    def test_output_shape_matches_input(self):
        rng = np.random.default_rng(7)
        w = rand_weights(rng, 4)
        fw = window_partition(Tensor(rng.normal(size=(2, 6, 4, 4))), 2)
        out = csa(fw, w)
        assert out.data.shape == fw.data.shape


class TestTCA:
    def test_cross_attention_weight_shape(self):
        rng = np.random.default_rng(8)
        c = 4
        w = init_multi_head(rng, c, c, n_heads=1, dtype=np.float64)
        fx = window_partition(Tensor(rng.normal(size=(1, 14, 14, c))), 7)
        fz = window_partition(Tensor(rng.normal(size=(1, 7, 7, c))), 7)
        _, attn = tca(fx, fz, w, return_weights=True)
        # per head: B x win^2 x (HxWx/win^2) x (HzWz/win^2)
        assert attn.shape == (1, 49, 1, 4, 1)
        assert attn.shape[:2] + attn.shape[3:] == (1, 49, 4, 1)

    def test_identical_inputs_match_csa_update(self):
        rng = np.random.default_rng(9)
        w = rand_weights(rng, 8)
        f = window_partition(Tensor(rng.normal(size=(1, 4, 4, 8))), 2)
        out_tca = tca(f, f, w)
        out_csa = csa(f, w)
        np.testing.assert_array_equal(out_tca.data.data, out_csa.data.data)

    def test_zero_reference_is_identity(self):
        rng = np.random.default_rng(10)
        w = rand_weights(rng, 8)
        fx = window_partition(Tensor(rng.normal(size=(1, 4, 4, 8))), 2)
        fz = window_partition(Tensor(np.zeros((1, 2, 2, 8))), 2)
        out = tca(fx, fz, w)
        np.testing.assert_array_equal(out.data.data, fx.data.data)

    def test_zero_map_weight_is_identity(self):
        rng = np.random.default_rng(11)
        w = rand_weights(rng, 8)
        w0 = MultiHeadWeights(w.w_q, w.w_k, w.w_v, Tensor(np.zeros((8, 8))), w.n_heads)
        fx = window_partition(Tensor(rng.normal(size=(1, 4, 4, 8))), 2)
        fz = window_partition(Tensor(rng.normal(size=(1, 2, 2, 8))), 2)
        out = tca(fx, fz, w0)
        np.testing.assert_array_equal(out.data.data, fx.data.data)

    def test_reference_window_permutation_invariance(self):
        rng = np.random.default_rng(12)
        w = rand_weights(rng, 8)
        fx = window_partition(Tensor(rng.normal(size=(1, 4, 4, 8))), 2)
        fz = window_partition(Tensor(rng.normal(size=(1, 6, 4, 8))), 2)
        out = tca(fx, fz, w).data.data
        perm = rng.permutation(fz.data.shape[2])
        fz_p = WindowedFeature(Tensor(fz.data.data[:, :, perm, :]), fz.orig_h, fz.orig_w, fz.win)
        out_p = tca(fx, fz_p, w).data.data
        np.testing.assert_allclose(out_p, out, atol=1e-6)

    def test_mismatched_win_rejected(self):
        rng = np.random.default_rng(13)
        w = rand_weights(rng, 8)
        fx = window_partition(Tensor(np.zeros((1, 4, 4, 8))), 2)
        fz = window_partition(Tensor(np.zeros((1, 4, 4, 8))), 4)
        with pytest.raises(ContractError):
            tca(fx, fz, w)


class TestGimBlock:
    def test_streams_independent_without_tca(self):
        rng = np.random.default_rng(14)
        w = init_gim(rng, 8, n_heads=2, with_tca=False, dtype=np.float64)
        a = Tensor(rng.normal(size=(1, 4, 4, 8)))
        b = Tensor(rng.normal(size=(1, 4, 4, 8)))
        oa, ob = gim_block(a, b, w, 2)
        ob2, oa2 = gim_block(b, a, w, 2)
        np.testing.assert_array_equal(oa.data, oa2.data)
        np.testing.assert_array_equal(ob.data, ob2.data)

    def test_zero_inputs_zero_outputs(self):
        rng = np.random.default_rng(15)
        w = init_gim(rng, 8, n_heads=2, with_tca=True, dtype=np.float64)
        a = Tensor(np.zeros((1, 4, 4, 8)))
        b = Tensor(np.zeros((1, 2, 2, 8)))
        oa, ob = gim_block(a, b, w, 2)
        assert np.all(oa.data == 0) and np.all(ob.data == 0)

    def test_matches_hand_sequenced_composition(self):
        rng = np.random.default_rng(16)
        w = init_gim(rng, 8, n_heads=2, with_tca=True, dtype=np.float64)
        a = Tensor(rng.normal(size=(1, 4, 4, 8)))
        b = Tensor(rng.normal(size=(1, 2, 2, 8)))
        oa, ob = gim_block(a, b, w, 2)
        fxw = window_partition(a, 2)
        fzw = window_partition(b, 2)
        fxw = csa(fxw, w.csa)
        fzw = csa(fzw, w.csa)
        fxw = tca(fxw, fzw, w.tca)
        np.testing.assert_array_equal(oa.data, window_merge(fxw).data)
        np.testing.assert_array_equal(ob.data, window_merge(fzw).data)

    def test_unshared_csa_weights(self):
        rng = np.random.default_rng(17)
        w = init_gim(rng, 8, n_heads=2, with_tca=False, dtype=np.float64, share_csa=False)
        assert w.csa_ref is not None
        a = Tensor(rng.normal(size=(1, 2, 2, 8)))
        oa, ob = gim_block(a, Tensor(a.data.copy()), w, 2)
        assert not np.allclose(oa.data, ob.data)

    def test_swin_style_runs_and_differs(self):
        rng = np.random.default_rng(18)
        w = init_gim(rng, 8, n_heads=2, with_tca=True, dtype=np.float64, swin_style=True)
        plain = GimWeights(w.csa, w.tca)
        a = Tensor(rng.normal(size=(1, 4, 4, 8)))
        b = Tensor(rng.normal(size=(1, 2, 2, 8)))
        oa_swin, _ = gim_block(a, b, w, 2)
        oa_plain, _ = gim_block(a, b, plain, 2)
        assert oa_swin.shape == oa_plain.shape
        assert not np.allclose(oa_swin.data, oa_plain.data)

    def test_gradcheck_full_block(self):
        rng = np.random.default_rng(19)
        w = init_gim(rng, 8, n_heads=2, with_tca=True, dtype=np.float64)
        fz = Tensor(rng.normal(size=(1, 2, 2, 8)))
        x = Tensor(rng.normal(size=(1, 4, 4, 8)), requires_grad=True)

        def f(t):
            ox, oz = gim_block(t, fz, w, 2)
            return tt.sum_(tt.mul(ox, ox))

        assert finite_diff_check(f, x) <= 1e-4

    def test_gradcheck_block_weights(self):
        rng = np.random.default_rng(20)
        w = init_gim(rng, 8, n_heads=2, with_tca=True, dtype=np.float64)
        fx = Tensor(rng.normal(size=(1, 4, 4, 8)))
        fz = Tensor(rng.normal(size=(1, 2, 2, 8)))
        wq = Tensor(w.tca.w_q.data.copy(), requires_grad=True)

        def f(t):
            wt = GimWeights(w.csa, MultiHeadWeights(t, w.tca.w_k, w.tca.w_v, w.tca.w_map, 2))
            ox, _ = gim_block(fx, fz, wt, 2)
            return tt.sum_(tt.mul(ox, ox))

        assert finite_diff_check(f, wq) <= 1e-4


class TestMacCounting:
    def test_linearity_in_hw_at_fixed_grid(self):
        # doubling H, W and win together quadruples the attention term
        base = count_macs_csa(14, 14, 8, 8, 7)
        big = count_macs_csa(28, 28, 8, 8, 14)
        assert big.attention == 4 * base.attention

    def test_single_window_degenerate(self):
        h = 6
        out = count_macs_csa(h, h, 4, 8, h)
        assert out.attention == 2 * h * h * 8  # 2 * win^2 * d with L = 1

    def test_attention_term_per_pixel_constant_at_fixed_grid(self):
        vals = []
        for win in (2, 4, 6, 8):
            h = w = 3 * win  # k1 = k2 = 3 fixed
            m = count_macs_csa(h, w, 4, 16, win)
            vals.append((m.attention, h * w))
        first = vals[0][0] * vals[1][1]
        for att, hw in vals:
            assert att * vals[0][1] == vals[0][0] * hw  # exact rational equality

    def test_quadratic_at_fixed_win(self):
        base = count_macs_csa(14, 14, 8, 8, 7)
        big = count_macs_csa(28, 28, 8, 8, 7)
        assert big.attention == 16 * base.attention

    def test_instrumented_forward_matches_analytic(self):
        rng = np.random.default_rng(21)
        h = w_sz = 14
        c = d = 8
        win = 7
        w = init_multi_head(rng, c, d, n_heads=2, dtype=np.float64)
        f = Tensor(rng.normal(size=(1, h, w_sz, c)))
        fw = window_partition(f, win)
        with count_macs() as counter:
            csa(fw, w)
        analytic = count_macs_csa(h, w_sz, c, d, win)
        assert counter.total == analytic.total

    def test_gradcheck_runs_under_two_minutes_budget(self):
        # toy composite: block-scale loss gradient check per the contract
        rng = np.random.default_rng(22)
        w = init_gim(rng, 4, n_heads=2, with_tca=True, dtype=np.float64)
        fz = Tensor(rng.normal(size=(1, 2, 2, 4)))
        x = Tensor(rng.normal(size=(1, 2, 2, 4)), requires_grad=True)

        def f(t):
            ox, _ = gim_block(t, fz, w, 2)
            s = tt.softmax(tt.reshape(ox, (-1,)), axis=0)
            return tt.sum_(tt.mul(s, ox.reshape((-1,))))

        assert finite_diff_check(f, x) <= 1e-4
