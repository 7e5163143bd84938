"""AdamW update arithmetic and the warmup-cosine schedule."""

import numpy as np
import pytest

from histomask import numcore as nc


class TestAdamW:
    def test_zero_grad_zero_decay_leaves_params(self):
        params = {"w": nc.parameter(np.array([1.0, -2.0]))}
        state = nc.AdamWState(weight_decay=0.0)
        nc.adamw_step(state, params, {"w": np.zeros(2)}, lr=0.1)
        np.testing.assert_array_equal(params["w"].data, [1.0, -2.0])

    def test_single_step_hand_value(self):
        # g=1, theta=0: m-hat = v-hat = 1, so the step is -lr / (1 + eps)
        params = {"w": nc.parameter(np.array([0.0]))}
        state = nc.AdamWState(beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
        nc.adamw_step(state, params, {"w": np.array([1.0])}, lr=0.1)
        np.testing.assert_allclose(params["w"].data, [-0.1 / (1.0 + 1e-8)], atol=1e-12)
        assert abs(params["w"].data[0] + 0.1) < 1e-8

    def test_decoupled_decay(self):
        # wd=0.1, g=0, lr=0.1, theta=1 -> theta = 1 - lr*wd*1 = 0.99
        params = {"w": nc.parameter(np.array([1.0]))}
        state = nc.AdamWState(weight_decay=0.1)
        nc.adamw_step(state, params, {"w": np.array([0.0])}, lr=0.1)
        np.testing.assert_allclose(params["w"].data, [0.99], atol=1e-15)

    def test_nan_gradient_rejected(self):
        params = {"w": nc.parameter(np.array([1.0]))}
        state = nc.AdamWState()
        with pytest.raises(nc.NonFiniteError):
            nc.adamw_step(state, params, {"w": np.array([np.nan])}, lr=0.1)

    def test_step_counter_increases(self):
        params = {"w": nc.parameter(np.zeros(3))}
        state = nc.AdamWState()
        for expected in (1, 2, 3):
            nc.adamw_step(state, params, {"w": np.ones(3)}, lr=0.01)
            assert state.step == expected

    def test_moment_shapes_match(self):
        params = {"w": nc.parameter(np.zeros((2, 3)))}
        state = nc.AdamWState()
        nc.adamw_step(state, params, {"w": np.ones((2, 3))}, lr=0.01)
        m, v = state.moments["w"]
        assert m.shape == (2, 3) and v.shape == (2, 3)


class TestLrSchedule:
    def test_peak_at_warmup_end(self):
        sched = nc.LrSchedule(peak_lr=4e-5, warmup_steps=8000, total_steps=400_000)
        assert nc.lr_at(sched, 8000) == pytest.approx(4e-5, abs=0.0)

    def test_ramp_starts_at_zero(self):
        sched = nc.LrSchedule(peak_lr=1e-3, warmup_steps=100, total_steps=1000)
        assert nc.lr_at(sched, 0) == 0.0

    def test_cosine_endpoint_hits_floor(self):
        sched = nc.LrSchedule(peak_lr=1e-3, warmup_steps=100, total_steps=1000, floor_lr=0.0)
        assert nc.lr_at(sched, 1000) == pytest.approx(0.0, abs=1e-18)

    def test_continuous_at_warmup_boundary(self):
        sched = nc.LrSchedule(peak_lr=3e-4, warmup_steps=50, total_steps=500, floor_lr=1e-5)
        left = nc.lr_at(sched, 49)
        boundary = nc.lr_at(sched, 50)
        right = nc.lr_at(sched, 51)
        assert left < boundary
        assert boundary == pytest.approx(3e-4)
        assert boundary - right < boundary - left + 1e-6

    def test_monotone_decay_after_warmup(self):
        sched = nc.LrSchedule(peak_lr=1e-3, warmup_steps=10, total_steps=100, floor_lr=1e-5)
        values = [nc.lr_at(sched, s) for s in range(10, 101)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert min(values) == pytest.approx(1e-5)

    def test_out_of_range_step(self):
        sched = nc.LrSchedule(peak_lr=1e-3, warmup_steps=10, total_steps=100)
        with pytest.raises(ValueError):
            nc.lr_at(sched, 101)
        with pytest.raises(ValueError):
            nc.lr_at(sched, -1)

    def test_invalid_schedule(self):
        with pytest.raises(ValueError):
            nc.LrSchedule(peak_lr=1e-3, warmup_steps=11, total_steps=10)
        with pytest.raises(ValueError):
            nc.LrSchedule(peak_lr=1e-5, warmup_steps=0, total_steps=10, floor_lr=1e-3)
