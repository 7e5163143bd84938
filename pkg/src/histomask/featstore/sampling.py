"""Region sampling under foreground-coverage and overlap constraints."""

from __future__ import annotations

import numpy as np

from .types import (
    FeatureStore,
    NoValidRegion,
    RegionSpec,
    RegionTensor,
    SlideRecord,
    region_positions,
)

__all__ = [
    "gather_region",
    "overlap_fraction",
    "sample_region",
    "sample_region_set",
    "systematic_region_set",
    "valid_origins",
]

MIN_FOREGROUND_FRACTION = 0.25


def _window_counts(fg_grid: np.ndarray, n: int) -> np.ndarray:
    """Foreground counts of every n-by-n window, via an integral image."""
    h, w = fg_grid.shape
    if h < n or w < n:
        return np.zeros((0, 0), dtype=np.int64)
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = fg_grid.astype(np.int64).cumsum(axis=0).cumsum(axis=1)
    return (
        integral[n:, n:]
        - integral[:-n, n:]
        - integral[n:, :-n]
        + integral[:-n, :-n]
    )


def valid_origins(slide: SlideRecord, n: int) -> list[tuple[int, int]]:
    """All (x0, y0) whose window holds at least 25% foreground, row-major order."""
    counts = _window_counts(slide.foreground_grid(), n)
    ok = counts * 4 >= n * n
    ys, xs = np.nonzero(ok)
    return [(int(x), int(y)) for y, x in zip(ys, xs)]


def sample_region(slide: SlideRecord, n: int, rng: np.random.Generator) -> RegionSpec:
    """Uniform draw among the valid origins of one slide."""
    if slide.grid_width < n or slide.grid_height < n:
        raise NoValidRegion(f"{slide.slide_id}: grid smaller than region side {n}")
    origins = valid_origins(slide, n)
    if not origins:
        raise NoValidRegion(f"{slide.slide_id}: no origin reaches 25% foreground")
    x0, y0 = origins[int(rng.integers(len(origins)))]
    return RegionSpec(slide_id=slide.slide_id, x0=x0, y0=y0, side=n)


def overlap_fraction(a: RegionSpec, b: RegionSpec) -> float:
    """Intersection area of two equal-side regions divided by the region area."""
    n = a.side
    ix = max(0, n - abs(a.x0 - b.x0))
    iy = max(0, n - abs(a.y0 - b.y0))
    return (ix * iy) / (n * n)


def sample_region_set(
    slide: SlideRecord,
    n: int,
    m: int,
    rng: np.random.Generator,
    max_overlap: float = 0.5,
) -> list[RegionSpec]:
    """Up to ``m`` regions with pairwise overlap <= ``max_overlap``.

    When the slide cannot host ``m`` compatible regions, the accepted specs
    are repeated cyclically so the result always has length ``m``.
    """
    if m < 1:
        raise ValueError("need m >= 1")
    if slide.grid_width < n or slide.grid_height < n:
        raise NoValidRegion(f"{slide.slide_id}: grid smaller than region side {n}")
    origins = valid_origins(slide, n)
    if not origins:
        raise NoValidRegion(f"{slide.slide_id}: no origin reaches 25% foreground")
    candidates = [RegionSpec(slide.slide_id, x, y, n) for x, y in origins]
    accepted: list[RegionSpec] = []
    while len(accepted) < m and candidates:
        pick = candidates[int(rng.integers(len(candidates)))]
        accepted.append(pick)
        candidates = [
            c for c in candidates if overlap_fraction(c, pick) <= max_overlap
        ]
    out = list(accepted)
    while len(out) < m:
        out.append(accepted[len(out) % len(accepted)])
    return out


def systematic_region_set(
    slide: SlideRecord,
    n: int,
    m: int,
    max_overlap: float = 0.5,
) -> list[RegionSpec]:
    """Deterministic evaluation-time sampling on a stride-n/2 origin grid.

    Origins are scanned row-major on the stride grid, kept when valid and
    compatible with everything accepted so far, and capped at ``m``.  No
    repetition padding: identical copies would not change a class-token
    average.
    """
    if m < 1:
        raise ValueError("need m >= 1")
    if slide.grid_width < n or slide.grid_height < n:
        raise NoValidRegion(f"{slide.slide_id}: grid smaller than region side {n}")
    counts = _window_counts(slide.foreground_grid(), n)
    stride = max(1, n // 2)
    xs = list(range(0, slide.grid_width - n + 1, stride))
    ys = list(range(0, slide.grid_height - n + 1, stride))
    if xs[-1] != slide.grid_width - n:
        xs.append(slide.grid_width - n)
    if ys[-1] != slide.grid_height - n:
        ys.append(slide.grid_height - n)
    accepted: list[RegionSpec] = []
    for y0 in ys:
        for x0 in xs:
            if counts[y0, x0] * 4 < n * n:
                continue
            spec = RegionSpec(slide.slide_id, x0, y0, n)
            if all(overlap_fraction(spec, a) <= max_overlap for a in accepted):
                accepted.append(spec)
                if len(accepted) == m:
                    return accepted
    if not accepted:
        raise NoValidRegion(f"{slide.slide_id}: no valid origin on the stride grid")
    return accepted


def gather_region(store: FeatureStore, spec: RegionSpec) -> RegionTensor:
    """Materialize a region in row-major grid order; uncovered cells are background."""
    slide = store.slide(spec.slide_id)
    n = spec.side
    if not (
        0 <= spec.x0 <= slide.grid_width - n and 0 <= spec.y0 <= slide.grid_height - n
    ):
        raise NoValidRegion(f"{spec} out of bounds for slide grid")
    feat_grid, fg_grid = store.dense(spec.slide_id)
    window = feat_grid[spec.y0 : spec.y0 + n, spec.x0 : spec.x0 + n]
    fg = fg_grid[spec.y0 : spec.y0 + n, spec.x0 : spec.x0 + n]
    return RegionTensor(
        features=window.reshape(n * n, -1).copy(),
        background=~fg.reshape(n * n),
        positions=region_positions(n),
    )
