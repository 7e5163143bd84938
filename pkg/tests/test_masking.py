"""Blockwise masking: rate bounds, connectivity, foreground-only, substitution."""

import math

import numpy as np
import pytest

from histomask.featstore import RegionTensor, region_positions
from histomask.masking import (
    MaskPlan,
    apply_mask,
    blockwise_mask,
    plan_from_text,
    plan_to_text,
)


def make_region(side, background=None, d=6, rng=None):
    rng = rng or np.random.default_rng(0)
    cells = side * side
    background = (
        np.zeros(cells, dtype=bool) if background is None else np.asarray(background, dtype=bool)
    )
    features = rng.normal(size=(cells, d))
    features[background] = 0.0
    return RegionTensor(features=features, background=background, positions=region_positions(side))


def is_connected(cells, side):
    cells = set(cells)
    if not cells:
        return True
    seen = {next(iter(cells))}
    queue = list(seen)
    while queue:
        j = queue.pop()
        y, x = divmod(j, side)
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            k = ny * side + nx
            if 0 <= ny < side and 0 <= nx < side and k in cells and k not in seen:
                seen.add(k)
                queue.append(k)
    return seen == cells


class TestBlockwiseMask:
    def test_zero_rate_empty_plan(self):
        region = make_region(6)
        plan = blockwise_mask(region, 0.0, np.random.default_rng(0))
        assert plan.masked_positions == () and plan.blocks == ()

    def test_full_region_rate_band(self):
        region = make_region(20)  # 400 foreground cells
        rng = np.random.default_rng(1)
        for _ in range(20):
            plan = blockwise_mask(region, 0.4, rng)
            assert 160 <= len(plan.masked_positions) <= 163

    def test_single_foreground_cell(self):
        background = np.ones(16, dtype=bool)
        background[7] = False
        region = make_region(4, background)
        plan = blockwise_mask(region, 0.5, np.random.default_rng(2))
        assert plan.masked_positions == (7,)

    def test_randomized_contract(self):
        rng = np.random.default_rng(3)
        for _ in range(400):
            side = int(rng.integers(2, 11))
            background = rng.random(side * side) < rng.uniform(0.0, 0.6)
            if background.all():
                background[0] = False
            region = make_region(side, background, rng=rng)
            p = float(rng.uniform(0.05, 0.95))
            plan = blockwise_mask(region, p, rng)
            fg_count = int((~background).sum())
            target = math.ceil(p * fg_count)
            assert target <= len(plan.masked_positions) <= target + 3
            assert not any(background[j] for j in plan.masked_positions)
            flat = [j for block in plan.blocks for j in block]
            assert sorted(flat) == sorted(plan.masked_positions)  # blocks partition
            for block in plan.blocks:
                assert 1 <= len(block) <= 4
                assert is_connected(block, side)

    def test_deterministic_given_stream(self):
        region = make_region(8)
        a = blockwise_mask(region, 0.4, np.random.default_rng(11))
        b = blockwise_mask(region, 0.4, np.random.default_rng(11))
        assert a == b

    def test_invalid_rate(self):
        region = make_region(4)
        with pytest.raises(ValueError):
            blockwise_mask(region, 1.5, np.random.default_rng(0))


class TestApplyMask:
    def test_empty_plan_is_identity(self):
        region = make_region(5)
        plan = MaskPlan((), (), 0.0)
        out = apply_mask(region, plan, np.zeros(6))
        np.testing.assert_array_equal(out.features, region.features)
        np.testing.assert_array_equal(out.background, region.background)

    def test_single_cell_substitution(self):
        region = make_region(4)
        token = np.arange(6, dtype=np.float64)
        plan = MaskPlan((7,), ((7,),), 0.1)
        out = apply_mask(region, plan, token)
        np.testing.assert_array_equal(out.features[7], token)
        untouched = [j for j in range(16) if j != 7]
        np.testing.assert_array_equal(out.features[untouched], region.features[untouched])

    def test_changed_rows_equal_plan_exactly(self):
        rng = np.random.default_rng(4)
        region = make_region(7, rng=rng)
        plan = blockwise_mask(region, 0.3, rng)
        token = rng.normal(size=6) + 10.0  # far from any feature value
        out = apply_mask(region, plan, token)
        changed = {
            j for j in range(49) if not np.array_equal(out.features[j], region.features[j])
        }
        assert changed == set(plan.masked_positions)

    def test_background_cell_in_plan_rejected(self):
        background = np.zeros(16, dtype=bool)
        background[3] = True
        region = make_region(4, background)
        plan = MaskPlan((3,), ((3,),), 0.1)
        with pytest.raises(ValueError, match="background"):
            apply_mask(region, plan, np.zeros(6))


class TestPlanSerialization:
    def test_round_trip(self):
        rng = np.random.default_rng(5)
        region = make_region(6, rng=rng)
        plan = blockwise_mask(region, 0.5, rng)
        assert plan_from_text(plan_to_text(plan)) == plan
