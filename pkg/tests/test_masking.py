import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from usmim.masking import (ALPMap, MaskPlan, MaskScheduleState, RecLossEMA, alpha_schedule, argsort_desc,
                           compute_alp, n_to_mask, random_blockwise_mask, ratio_schedule, self_adaptive_mask,
                           uniform_random_mask, update_rec_loss_ema)


def minmax_oracle(v):
    v = np.asarray(v, dtype=float)
    if v.max() == v.min():
        return np.full(v.shape, 0.5)
    return (v - v.min()) / (v.max() - v.min())


class TestSchedules:
    def test_ratio_points(self):
        assert ratio_schedule(MaskScheduleState(0, 10)) == 0.1
        assert ratio_schedule(MaskScheduleState(10, 10)) == 0.9
        assert ratio_schedule(MaskScheduleState(5, 10)) == pytest.approx(0.5, abs=1e-15)

    def test_alpha_points(self):
        assert alpha_schedule(MaskScheduleState(0, 10)) == 0.1
        assert alpha_schedule(MaskScheduleState(10, 10)) == 0.9
        assert alpha_schedule(MaskScheduleState(5, 10)) == pytest.approx(0.5, abs=1e-15)

    def test_alpha_closed_form(self):
        for t in range(0, 21):
            expect = 0.9 - 0.8 * (1 + math.cos(math.pi * t / 20)) / 2
            assert alpha_schedule(MaskScheduleState(t, 20)) == pytest.approx(expect, abs=1e-15)

    def test_monotone_sweep(self):
        r = [ratio_schedule(MaskScheduleState(t, 1000)) for t in range(1001)]
        a = [alpha_schedule(MaskScheduleState(t, 1000)) for t in range(1001)]
        assert all(x <= y for x, y in zip(r, r[1:]))
        assert all(x <= y for x, y in zip(a, a[1:]))

    @pytest.mark.parametrize("kw", [dict(t=11, T=10), dict(t=0, T=0), dict(t=0, T=5, r0=0.5, rT=0.2),
                                    dict(t=0, T=5, alpha_min=0.95)])
    def test_invalid_state(self, kw):
        with pytest.raises(ValueError):
            MaskScheduleState(**kw)


class TestALP:
    def test_worked_example(self):
        alp = compute_alp([0.2, 0.8], [0.6, 0.4], 0.5)
        np.testing.assert_array_equal(alp.scores, [0.5, 0.5])
        np.testing.assert_array_equal(alp.rec_norm, [1.0, 0.0])

    def test_alpha_zero(self, rng):
        am = rng.uniform(size=10)
        alp = compute_alp(am, rng.uniform(size=10), 0.0)
        np.testing.assert_array_equal(alp.scores, minmax_oracle(am))

    def test_oracle(self, rng):
        for _ in range(50):
            am, rec = rng.normal(size=64), rng.exponential(size=64)
            alp = compute_alp(am, rec, 0.9)
            np.testing.assert_allclose(alp.scores, 0.1 * minmax_oracle(am) + 0.9 * minmax_oracle(rec),
                                       atol=1e-12, rtol=0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compute_alp(np.zeros(4), np.zeros(5), 0.5)

    def test_bad_alpha(self):
        with pytest.raises(ValueError):
            compute_alp(np.zeros(4), np.zeros(4), 1.5)

    def test_cold_start(self, rng):
        am = rng.uniform(size=8)
        alp = compute_alp(am, None, 0.7)
        assert alp.alpha_used == 0.0 and alp.flags["cold_start"]
        np.testing.assert_array_equal(alp.scores, minmax_oracle(am))
        np.testing.assert_array_equal(alp.rec_norm, np.full(8, 0.5))

    def test_unobserved_patches_take_observed_mean(self):
        alp = compute_alp([0.0, 1.0, 0.5, 0.2], [2.0, np.nan, 4.0, np.nan], 1.0)
        np.testing.assert_array_equal(alp.scores, [0.0, 0.5, 1.0, 0.5])

    def test_constant_inputs(self):
        alp = compute_alp(np.ones(4), np.ones(4), 0.3)
        np.testing.assert_array_equal(alp.scores, np.full(4, 0.5))
        assert alp.flags["am_constant"] and alp.flags["rec_constant"]

    @given(st.integers(0, 2**31), st.floats(0.0, 0.99))
    def test_monotone_in_alpha(self, seed, a):
        rng = np.random.default_rng(seed)
        am, rec = rng.uniform(size=16), rng.uniform(size=16)
        lo, hi = compute_alp(am, rec, a), compute_alp(am, rec, min(1.0, a + 0.01))
        up = lo.rec_norm > lo.am_norm
        down = lo.rec_norm < lo.am_norm
        assert np.all(hi.scores[up] > lo.scores[up])
        assert np.all(hi.scores[down] < lo.scores[down])

    @given(st.integers(0, 2**31), st.floats(0.0, 1.0))
    def test_bounds_and_blend(self, seed, a):
        rng = np.random.default_rng(seed)
        alp = compute_alp(rng.normal(size=20), rng.exponential(size=20), a)
        assert np.all((alp.am_norm >= 0) & (alp.am_norm <= 1))
        assert np.all((alp.rec_norm >= 0) & (alp.rec_norm <= 1))
        np.testing.assert_array_equal(alp.scores, (1 - a) * alp.am_norm + a * alp.rec_norm)


class TestSelfAdaptive:
    def test_sixteen_patches(self, rng):
        scores = rng.uniform(size=16)
        top4 = set(np.argsort(-scores)[:4].tolist())
        for seed in range(50):
            plan = self_adaptive_mask(scores, 0.5, 0.25, np.random.default_rng(seed))
            assert plan.n_masked == 8
            assert top4 <= set(plan.masked_idx.tolist())

    def test_full_ratio(self, rng):
        plan = self_adaptive_mask(rng.uniform(size=10), 1.0, 0.3, rng)
        assert plan.n_masked == 10

    def test_forced_argsort(self, rng):
        plan = self_adaptive_mask(np.array([0.9, 0.1, 0.5, 0.3]), 0.5, 0.5, rng)
        assert plan.masked_idx.tolist() == [0, 2]
        assert plan.random_idx.size == 0

    def test_ties_break_low_index(self):
        assert argsort_desc(np.array([0.5, 0.7, 0.5, 0.7])).tolist() == [1, 3, 0, 2]

    @pytest.mark.parametrize("rat, thr", [(1.2, 0.5), (0.5, 0.6), (0.0, 0.0), (0.5, -0.1)])
    def test_invalid(self, rat, thr, rng):
        with pytest.raises(ValueError):
            self_adaptive_mask(np.zeros(8), rat, thr, rng)

    def test_accepts_alp_map(self, rng):
        alp = compute_alp(rng.uniform(size=16), rng.uniform(size=16), 0.5)
        assert isinstance(alp, ALPMap)
        assert self_adaptive_mask(alp, 0.5, 0.25, rng).n_masked == 8

    @given(st.integers(1, 200), st.floats(0.01, 1.0), st.floats(0.0, 1.0), st.integers(0, 2**31))
    def test_contracts(self, n, rat, frac, seed):
        rng = np.random.default_rng(seed)
        thr = rat * frac
        scores = rng.uniform(size=n)
        plan = self_adaptive_mask(scores, rat, thr, rng)
        assert plan.n_masked == math.ceil(round(n * rat, 9))
        assert not set(plan.alp_driven_idx.tolist()) & set(plan.random_idx.tolist())
        assert plan.alp_driven_idx.size + plan.random_idx.size == plan.n_masked
        top = math.floor(round(n * thr, 9))
        if top >= 1:
            assert set(argsort_desc(scores)[:top].tolist()) <= set(plan.masked_idx.tolist())


class TestBlockwise:
    def test_exact_count(self, rng):
        assert random_blockwise_mask(12, 12, 0.5, rng).n_masked == 72

    def test_all(self, rng):
        assert random_blockwise_mask(8, 8, 1.0, rng).n_masked == 64

    def test_tiny_grid_falls_back(self, rng):
        plan = random_blockwise_mask(1, 3, 0.5, rng)
        assert plan.n_masked == 2

    def test_bad_ratio(self, rng):
        with pytest.raises(ValueError):
            random_blockwise_mask(4, 4, 0.0, rng)

    def test_marginals_have_no_dead_zones(self):
        rng = np.random.default_rng(7)
        freq = np.zeros(144)
        for _ in range(1000):
            freq += random_blockwise_mask(12, 12, 0.4, rng).grid
        freq /= 1000
        assert freq.min() >= 0.25 and freq.max() <= 0.55

    def test_blocks_are_contiguous(self):
        # at a low ratio the mask is one or a few rectangles, far from scattered
        rng = np.random.default_rng(3)
        plan = random_blockwise_mask(16, 16, 0.1, rng)
        g = plan.grid.reshape(16, 16).astype(int)
        neighbours = (g[1:, :] & g[:-1, :]).sum() + (g[:, 1:] & g[:, :-1]).sum()
        assert neighbours >= plan.n_masked // 2

    @given(st.integers(1, 16), st.integers(1, 16), st.floats(0.01, 1.0), st.integers(0, 2**31))
    def test_cardinality(self, h, w, ratio, seed):
        plan = random_blockwise_mask(h, w, ratio, np.random.default_rng(seed))
        assert plan.n_masked == math.ceil(round(h * w * ratio, 9))
        assert plan.alp_driven_idx.size == 0

    def test_uniform_random(self, rng):
        assert uniform_random_mask(10, 0.35, rng).n_masked == 4


class TestRecLossEMA:
    def test_arithmetic(self):
        store = RecLossEMA(0.9)
        update_rec_loss_ema(store, "a", [1.0])
        update_rec_loss_ema(store, "a", [0.0])
        assert store.get("a")[0] == pytest.approx(0.9, abs=1e-15)

    def test_first_observation(self):
        store = update_rec_loss_ema(RecLossEMA(0.9), "a", [0.7])
        assert store.get("a").tolist() == [0.7]

    def test_geometric_convergence(self):
        store = RecLossEMA(0.9)
        update_rec_loss_ema(store, "x", [5.0])
        c = 2.0
        for k in range(1, 60):
            update_rec_loss_ema(store, "x", [c])
            assert abs(store.get("x")[0] - c) == pytest.approx(0.9**k * 3.0, rel=1e-9)

    def test_unobserved_carry_forward(self):
        store = RecLossEMA(0.5)
        update_rec_loss_ema(store, "a", [1.0, np.nan, 3.0])
        update_rec_loss_ema(store, "a", [np.nan, 2.0, 1.0])
        np.testing.assert_array_equal(store.get("a"), [1.0, 2.0, 2.0])

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            update_rec_loss_ema(RecLossEMA(), "a", [-0.1])

    def test_length_change_rejected(self):
        store = update_rec_loss_ema(RecLossEMA(), "a", [1.0, 2.0])
        with pytest.raises(ValueError):
            update_rec_loss_ema(store, "a", [1.0])

    def test_snapshot_is_isolated(self):
        store = update_rec_loss_ema(RecLossEMA(), "a", [1.0])
        snap = store.snapshot()
        update_rec_loss_ema(store, "a", [0.0])
        assert snap.get("a").tolist() == [1.0]

    def test_bad_decay(self):
        with pytest.raises(ValueError):
            RecLossEMA(1.0)


class TestMaskPlan:
    def test_n_to_mask_guards_float_noise(self):
        assert n_to_mask(10, 0.3) == 3
        assert n_to_mask(7, 0.5) == 4

    def test_empty(self):
        assert MaskPlan.empty(5).n_masked == 0
