"""Shared training machinery: splits, early stopping, sampling, batching."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .. import numcore as nc
from ..featstore import (
    ClassLabel,
    FeatureStore,
    RegionTensor,
    SurvivalLabel,
    gather_region,
    region_positions,
    sample_region_set,
    systematic_region_set,
)
from ..encoder import EncoderConfig, encode, positional_matrix

__all__ = [
    "DataError",
    "EarlyStopState",
    "SplitSpec",
    "class_ids",
    "encode_regions",
    "eval_coverage_rng",
    "sample_slide_regions",
    "split_fractions",
    "stratified_folds",
    "stratum_of",
    "survival_arrays",
    "systematic_slide_regions",
]


class DataError(ValueError):
    """Store contents cannot support the requested training setup."""


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[str, ...]
    monitor: tuple[str, ...]
    test: tuple[str, ...] = ()


@dataclass
class EarlyStopState:
    """Stop after ``patience`` consecutive epochs without strict improvement."""

    patience: int
    best_value: float = float("inf")
    best_epoch: int = 0
    stagnant: int = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record one epoch's monitored value; True means stop now."""
        if value < self.best_value:
            self.best_value = value
            self.best_epoch = epoch
            self.stagnant = 0
        else:
            self.stagnant += 1
        return self.stagnant >= self.patience


def stratum_of(label) -> int:
    """Stratification key: event indicator for survival, class id otherwise."""
    if isinstance(label, SurvivalLabel):
        return int(label.event)
    return label.class_id


def split_fractions(
    ids: list[str], fractions: tuple[float, ...], rng: np.random.Generator
) -> list[list[str]]:
    """Shuffle ids and cut into len(fractions) groups; remainders go to the first."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    order = [ids[i] for i in rng.permutation(len(ids))]
    sizes = [int(len(ids) * f) for f in fractions]
    sizes[0] += len(ids) - sum(sizes)
    out = []
    start = 0
    for size in sizes:
        out.append(order[start : start + size])
        start += size
    return out


def stratified_folds(
    store: FeatureStore, ids: list[str], n_folds: int, rng: np.random.Generator
) -> list[list[str]]:
    """Deal shuffled ids round-robin into folds, separately per stratum."""
    by_stratum: dict[int, list[str]] = {}
    for slide_id in ids:
        by_stratum.setdefault(stratum_of(store.slide(slide_id).label), []).append(slide_id)
    folds: list[list[str]] = [[] for _ in range(n_folds)]
    offset = 0
    for stratum in sorted(by_stratum):
        members = by_stratum[stratum]
        shuffled = [members[i] for i in rng.permutation(len(members))]
        for i, slide_id in enumerate(shuffled):
            folds[(i + offset) % n_folds].append(slide_id)
        offset += len(members)
    for fold in folds:
        if not fold:
            raise DataError(f"cannot fill {n_folds} folds with {len(ids)} slides")
    return folds


def survival_arrays(store: FeatureStore, ids) -> tuple[np.ndarray, np.ndarray]:
    times, events = [], []
    for slide_id in ids:
        label = store.slide(slide_id).label
        if not isinstance(label, SurvivalLabel):
            raise DataError(f"{slide_id}: expected a survival label")
        times.append(label.time_years)
        events.append(label.event)
    return np.asarray(times), np.asarray(events, dtype=bool)


def class_ids(store: FeatureStore, ids) -> np.ndarray:
    out = []
    for slide_id in ids:
        label = store.slide(slide_id).label
        if not isinstance(label, ClassLabel):
            raise DataError(f"{slide_id}: expected a class label")
        out.append(label.class_id)
    return np.asarray(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# region sampling shared by the transformer model and the MIL baselines
# ---------------------------------------------------------------------------

def _subsample_coverage(
    region: RegionTensor, coverage: float, rng: np.random.Generator
) -> RegionTensor:
    """Keep a fraction of foreground cells; the rest become background for this pass."""
    if coverage >= 1.0:
        return region
    fg_idx = np.nonzero(~region.background)[0]
    keep = max(1, int(np.ceil(coverage * len(fg_idx))))
    kept = rng.choice(fg_idx, size=keep, replace=False)
    drop = np.setdiff1d(fg_idx, kept)
    features = region.features.copy()
    background = region.background.copy()
    features[drop] = 0.0
    background[drop] = True
    return RegionTensor(features=features, background=background, positions=region.positions)


def sample_slide_regions(
    store: FeatureStore,
    slide_id: str,
    side: int,
    m: int,
    coverage: float,
    rng: np.random.Generator,
    max_overlap: float = 0.5,
) -> list[RegionTensor]:
    specs = sample_region_set(store.slide(slide_id), side, m, rng, max_overlap)
    return [
        _subsample_coverage(gather_region(store, spec), coverage, rng) for spec in specs
    ]


def eval_coverage_rng(slide_id: str) -> np.random.Generator:
    """Store-determined stream so evaluation-time subsampling is reproducible."""
    return np.random.default_rng(np.random.SeedSequence([0xE7A1, zlib.crc32(slide_id.encode())]))


def systematic_slide_regions(
    store: FeatureStore,
    slide_id: str,
    side: int,
    m: int,
    coverage: float = 1.0,
    max_overlap: float = 0.5,
) -> list[RegionTensor]:
    specs = systematic_region_set(store.slide(slide_id), side, m, max_overlap)
    rng = eval_coverage_rng(slide_id)
    return [
        _subsample_coverage(gather_region(store, spec), coverage, rng) for spec in specs
    ]


# ---------------------------------------------------------------------------
# batched encoding
# ---------------------------------------------------------------------------

@dataclass
class RegionBatch:
    """Stacked region arrays ready for one encoder forward."""

    base_features: np.ndarray  # (R, n^2, d), masked cells already zeroed
    mask_indicator: np.ndarray | None  # (R, n^2, 1) or None when nothing is masked
    background: np.ndarray  # (R, n^2) bool
    groups: list[int] = field(default_factory=list)  # regions per slide, in order


def stack_regions(
    regions: list[RegionTensor],
    masked_positions: list[tuple[int, ...]] | None = None,
) -> RegionBatch:
    base = np.stack([r.features for r in regions])
    background = np.stack([r.background for r in regions])
    indicator = None
    if masked_positions is not None:
        indicator = np.zeros(base.shape[:2] + (1,))
        for i, cells in enumerate(masked_positions):
            if cells:
                base[i, list(cells)] = 0.0
                indicator[i, list(cells)] = 1.0
    return RegionBatch(base_features=base, mask_indicator=indicator, background=background)


def encode_regions(
    batch: RegionBatch,
    config: EncoderConfig,
    params: dict[str, nc.Tensor],
    train_rng: np.random.Generator | None = None,
):
    """Mask-token substitution, positional encoding, then the encoder forward."""
    feats = nc.constant(batch.base_features)
    if batch.mask_indicator is not None:
        feats = feats + nc.constant(batch.mask_indicator) * params["tokens.mask"]
    feats = feats + positional_matrix(params, region_positions(config.region_side))
    return encode(feats, batch.background, config, params, train_rng=train_rng)
