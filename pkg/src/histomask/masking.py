"""Blockwise random masking of region cells for the pretext task.

Blocks are small rectangles (1x1 up to 1x4/4x1 lines and the 2x2 square)
placed at random until the masked foreground count reaches ceil(p * F).
Placed rectangles are clipped to foreground cells not yet masked, and only
the largest 4-connected component of the clipped set is kept, so every
recorded block is a connected set of one to four cells.  Because the final
block adds at most four cells, the overshoot is at most three.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .featstore.types import RegionTensor

__all__ = ["MaskPlan", "apply_mask", "blockwise_mask", "plan_to_text", "plan_from_text"]

# (height, width) of every candidate rectangle, area <= 4
BLOCK_SHAPES = ((1, 1), (1, 2), (2, 1), (2, 2), (1, 3), (3, 1), (1, 4), (4, 1))


@dataclass(frozen=True)
class MaskPlan:
    """Cells hidden during one pretext pass, grouped into placed blocks."""

    masked_positions: tuple[int, ...]
    blocks: tuple[tuple[int, ...], ...]
    target_rate: float


def _connected_components(cells: list[int], side: int) -> list[list[int]]:
    remaining = set(cells)
    components = []
    while remaining:
        start = min(remaining)
        remaining.discard(start)
        comp = [start]
        queue = [start]
        while queue:
            j = queue.pop()
            y, x = divmod(j, side)
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < side and 0 <= nx < side:
                    k = ny * side + nx
                    if k in remaining:
                        remaining.discard(k)
                        comp.append(k)
                        queue.append(k)
        components.append(sorted(comp))
    return components


def blockwise_mask(
    region: RegionTensor, p: float, rng: np.random.Generator
) -> MaskPlan:
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"mask rate must be in [0, 1], got {p}")
    side = region.side
    foreground = ~region.background
    fg_count = int(foreground.sum())
    if fg_count == 0:
        raise ValueError("region has no foreground cells")
    target = math.ceil(p * fg_count)
    if target == 0:
        return MaskPlan(masked_positions=(), blocks=(), target_rate=p)
    masked = np.zeros(side * side, dtype=bool)
    blocks: list[tuple[int, ...]] = []
    count = 0
    shapes = [s for s in BLOCK_SHAPES if s[0] <= side and s[1] <= side]
    while count < target:
        h, w = shapes[int(rng.integers(len(shapes)))]
        y0 = int(rng.integers(side - h + 1))
        x0 = int(rng.integers(side - w + 1))
        cells = [
            (y0 + dy) * side + (x0 + dx) for dy in range(h) for dx in range(w)
        ]
        cells = [j for j in cells if foreground[j] and not masked[j]]
        if not cells:
            continue
        components = _connected_components(cells, side)
        block = max(components, key=len)
        masked[block] = True
        blocks.append(tuple(block))
        count += len(block)
    return MaskPlan(
        masked_positions=tuple(sorted(np.nonzero(masked)[0].tolist())),
        blocks=tuple(blocks),
        target_rate=p,
    )


def apply_mask(
    region: RegionTensor, plan: MaskPlan, mask_token: np.ndarray
) -> RegionTensor:
    """Substitute the mask token at every planned cell; everything else is untouched."""
    token = np.asarray(mask_token, dtype=np.float64)
    if token.shape != (region.features.shape[1],):
        raise ValueError(
            f"mask token shape {token.shape} != feature dim ({region.features.shape[1]},)"
        )
    positions = list(plan.masked_positions)
    if any(region.background[j] for j in positions):
        raise ValueError("mask plan references a background cell")
    features = region.features.copy()
    features[positions] = token
    return RegionTensor(
        features=features,
        background=region.background.copy(),
        positions=region.positions.copy(),
    )


def plan_to_text(plan: MaskPlan) -> str:
    """One-line log form: rate, then semicolon-separated comma-joined blocks."""
    blocks = ";".join(",".join(str(j) for j in block) for block in plan.blocks)
    return f"{plan.target_rate!r}|{blocks}"


def plan_from_text(text: str) -> MaskPlan:
    rate_str, _, blocks_str = text.partition("|")
    blocks = tuple(
        tuple(int(j) for j in chunk.split(","))
        for chunk in blocks_str.split(";")
        if chunk
    )
    positions = tuple(sorted(j for block in blocks for j in block))
    return MaskPlan(masked_positions=positions, blocks=blocks, target_rate=float(rate_str))
