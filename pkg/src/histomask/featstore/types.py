"""Slide records, labels, region specs and the in-memory feature store."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ClassLabel",
    "FeatureStore",
    "NoValidRegion",
    "RegionSpec",
    "RegionTensor",
    "SlideLabel",
    "SlideRecord",
    "StoreError",
    "SurvivalLabel",
]


class StoreError(ValueError):
    """Invalid store contents or malformed store file."""


class NoValidRegion(RuntimeError):
    """No region origin satisfies the sampling constraints."""


@dataclass(frozen=True)
class SurvivalLabel:
    time_years: float
    event: bool

    def __post_init__(self) -> None:
        if not self.time_years > 0.0:
            raise StoreError(f"survival time must be positive, got {self.time_years}")


@dataclass(frozen=True)
class ClassLabel:
    class_id: int

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise StoreError(f"class id must be >= 0, got {self.class_id}")


SlideLabel = SurvivalLabel | ClassLabel


@dataclass
class SlideRecord:
    """One preprocessed slide: patch coordinates, foreground flags, features.

    Only recorded patches carry data; any grid cell without a record is
    background.  Explicitly recorded background patches must carry the
    all-zero feature vector.  Features stay f32, exactly as stored on disk.
    """

    slide_id: str
    grid_width: int
    grid_height: int
    xs: np.ndarray
    ys: np.ndarray
    foreground: np.ndarray
    features: np.ndarray
    label: SlideLabel

    @property
    def n_patches(self) -> int:
        return len(self.xs)

    def foreground_grid(self) -> np.ndarray:
        """(grid_height, grid_width) bool grid of foreground cells."""
        grid = np.zeros((self.grid_height, self.grid_width), dtype=bool)
        grid[self.ys[self.foreground], self.xs[self.foreground]] = True
        return grid

    def validate(self, feature_dim: int) -> None:
        if self.grid_width <= 0 or self.grid_height <= 0:
            raise StoreError(f"{self.slide_id}: non-positive grid extents")
        if self.grid_width > 0xFFFF or self.grid_height > 0xFFFF:
            raise StoreError(f"{self.slide_id}: grid extents exceed u16 coordinates")
        if self.features.shape != (self.n_patches, feature_dim):
            raise StoreError(
                f"{self.slide_id}: feature block {self.features.shape} != "
                f"({self.n_patches}, {feature_dim})"
            )
        if np.any(self.xs >= self.grid_width) or np.any(self.ys >= self.grid_height):
            raise StoreError(f"{self.slide_id}: patch coordinate outside grid")
        flat = self.ys.astype(np.int64) * self.grid_width + self.xs.astype(np.int64)
        if len(np.unique(flat)) != len(flat):
            raise StoreError(f"{self.slide_id}: duplicate patch coordinates")
        if not self.foreground.any():
            raise StoreError(f"{self.slide_id}: no foreground patches")
        background = ~self.foreground
        if background.any() and np.any(self.features[background] != 0.0):
            raise StoreError(f"{self.slide_id}: background patch with nonzero features")
        if not np.all(np.isfinite(self.features)):
            raise StoreError(f"{self.slide_id}: non-finite feature values")


@dataclass
class FeatureStore:
    """Immutable collection of slides sharing one feature dimension."""

    feature_dim: int
    slides: list[SlideRecord]
    _index: dict[str, int] = field(init=False, repr=False)
    _dense: dict[str, tuple[np.ndarray, np.ndarray]] = field(
        init=False, repr=False, default_factory=dict
    )

    def __post_init__(self) -> None:
        self._index = {}
        for i, slide in enumerate(self.slides):
            if slide.slide_id in self._index:
                raise StoreError(f"duplicate slide id '{slide.slide_id}'")
            self._index[slide.slide_id] = i

    def __len__(self) -> int:
        return len(self.slides)

    def __iter__(self):
        return iter(self.slides)

    def slide(self, slide_id: str) -> SlideRecord:
        try:
            return self.slides[self._index[slide_id]]
        except KeyError:
            raise StoreError(f"unknown slide id '{slide_id}'") from None

    def slide_ids(self) -> list[str]:
        return [s.slide_id for s in self.slides]

    def validate(self) -> None:
        for slide in self.slides:
            slide.validate(self.feature_dim)

    def dense(self, slide_id: str) -> tuple[np.ndarray, np.ndarray]:
        """Cached (features f64 (H, W, d), foreground bool (H, W)) grids."""
        cached = self._dense.get(slide_id)
        if cached is None:
            slide = self.slide(slide_id)
            feat = np.zeros(
                (slide.grid_height, slide.grid_width, self.feature_dim), dtype=np.float64
            )
            feat[slide.ys, slide.xs] = slide.features.astype(np.float64)
            cached = (feat, slide.foreground_grid())
            self._dense[slide_id] = cached
        return cached


@dataclass(frozen=True)
class RegionSpec:
    """An n-by-n window into a slide grid, in patch units."""

    slide_id: str
    x0: int
    y0: int
    side: int


@dataclass
class RegionTensor:
    """One sampled region: features in row-major grid order plus masks.

    Cell j covers relative position (x=j % n, y=j // n).  Background rows are
    all-zero and flagged in ``background``.
    """

    features: np.ndarray
    background: np.ndarray
    positions: np.ndarray

    @property
    def side(self) -> int:
        return int(np.sqrt(len(self.background)))

    @property
    def foreground_count(self) -> int:
        return int((~self.background).sum())


def region_positions(side: int) -> np.ndarray:
    """Relative (x, y) pairs for the row-major cell order of a region."""
    ys, xs = np.divmod(np.arange(side * side), side)
    return np.stack([xs, ys], axis=1)
