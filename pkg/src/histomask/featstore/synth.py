"""Synthetic feature stores with planted, verifiable signals.

Each foreground patch feature is one of C unit-norm prototype vectors plus
isotropic Gaussian noise.  Prototype assignments are spatially autocorrelated
(multi-source region growing with fixed per-prototype capacities), so masked
cells are predictable from their neighborhood.

Planted labels per task:

* ``classification``   - the class sets the prototype mixture the slide's
  counts are drawn from, so bag composition carries the signal.
* ``spatial-classification`` - every slide has the *same* prototype counts;
  the label is 1 iff any patch of prototype 0 is 4-adjacent to a patch of
  prototype 1.  Permutation-invariant pooling sees identical bags.
* ``survival``         - event time is exponential with log-hazard linear in
  the slide's prototype frequencies, censored by an independent uniform draw.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .types import ClassLabel, FeatureStore, SlideRecord, StoreError, SurvivalLabel

__all__ = ["SynthConfig", "SynthTruth", "generate_with_truth", "synth_generate"]

TASKS = ("survival", "classification", "spatial-classification")


@dataclass(frozen=True)
class SynthConfig:
    n_slides: int
    grid_width: int
    grid_height: int
    feature_dim: int
    n_prototypes: int
    noise_sigma: float
    task: str
    n_classes: int = 2
    foreground_fraction: tuple[float, float] = (0.7, 0.95)
    hazard_scale: float = 4.0
    hazard_offset: float = -0.7
    censor_max: float = 4.0

    def validate(self) -> None:
        if self.task not in TASKS:
            raise StoreError(f"unknown task '{self.task}', expected one of {TASKS}")
        if self.n_slides < 1:
            raise StoreError("need at least one slide")
        if min(self.grid_width, self.grid_height) < 2:
            raise StoreError("grid extents must be >= 2")
        if self.feature_dim < 1:
            raise StoreError("feature_dim must be >= 1")
        if self.n_prototypes < 1:
            raise StoreError("need at least one prototype")
        if self.noise_sigma < 0:
            raise StoreError("noise sigma must be >= 0")
        lo, hi = self.foreground_fraction
        if not (0.0 < lo <= hi <= 1.0):
            raise StoreError("foreground_fraction must satisfy 0 < lo <= hi <= 1")
        if self.task != "survival" and self.n_classes < 2:
            raise StoreError("classification tasks need n_classes >= 2")
        if self.task == "spatial-classification":
            if self.n_prototypes < 3:
                raise StoreError("spatial task needs >= 3 prototypes")
            if self.n_classes != 2:
                raise StoreError("spatial task is binary")
        if self.task == "classification" and self.n_prototypes < self.n_classes:
            raise StoreError("classification needs n_prototypes >= n_classes")
        if self.censor_max <= 0.05:
            raise StoreError("censor_max must exceed the 0.05 censoring floor")


@dataclass
class SynthTruth:
    """Ground truth behind a generated store, for oracle-style checks."""

    prototypes: np.ndarray
    assignments: dict[str, np.ndarray] = field(default_factory=dict)
    hazard_weights: np.ndarray | None = None
    risk_scores: dict[str, float] = field(default_factory=dict)
    adjacency: dict[str, bool] = field(default_factory=dict)


def _grow_blob(
    rng: np.random.Generator, height: int, width: int, target: int
) -> np.ndarray:
    """Random 4-connected blob of ``target`` cells, grown from a random seed."""
    blob = np.zeros((height, width), dtype=bool)
    seed = (int(rng.integers(height)), int(rng.integers(width)))
    blob[seed] = True
    frontier = [seed]
    count = 1
    while count < target:
        idx = int(rng.integers(len(frontier)))
        y, x = frontier[idx]
        neighbors = [
            (ny, nx)
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1))
            if 0 <= ny < height and 0 <= nx < width and not blob[ny, nx]
        ]
        if not neighbors:
            frontier[idx] = frontier[-1]
            frontier.pop()
            continue
        ny, nx = neighbors[int(rng.integers(len(neighbors)))]
        blob[ny, nx] = True
        frontier.append((ny, nx))
        count += 1
    return blob


def _grow_assignment(
    rng: np.random.Generator, fg_grid: np.ndarray, capacities: np.ndarray
) -> np.ndarray:
    """Potts-style assignment: grow one region per prototype to exact capacity.

    Returns an int grid with prototype ids on foreground cells, -1 elsewhere.
    Prototypes whose frontier is walled off claim random unassigned cells so
    capacities stay exact.
    """
    height, width = fg_grid.shape
    assign = np.full((height, width), -1, dtype=np.int64)
    cells = list(zip(*np.nonzero(fg_grid)))
    order = rng.permutation(len(cells))
    protos = [p for p in range(len(capacities)) if capacities[p] > 0]
    seeds = [cells[order[i]] for i in range(len(protos))]
    remaining = capacities.copy()
    frontiers: dict[int, list[tuple[int, int]]] = {}
    for p, seed in zip(protos, seeds):
        assign[seed] = p
        remaining[p] -= 1
        frontiers[p] = [seed]
    active = [p for p in protos if remaining[p] > 0]
    while active:
        p = active[int(rng.integers(len(active)))]
        frontier = frontiers[p]
        grew = False
        while frontier and not grew:
            idx = int(rng.integers(len(frontier)))
            y, x = frontier[idx]
            neighbors = [
                (ny, nx)
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1))
                if 0 <= ny < height
                and 0 <= nx < width
                and fg_grid[ny, nx]
                and assign[ny, nx] == -1
            ]
            if not neighbors:
                frontier[idx] = frontier[-1]
                frontier.pop()
                continue
            ny, nx = neighbors[int(rng.integers(len(neighbors)))]
            assign[ny, nx] = p
            remaining[p] -= 1
            frontier.append((ny, nx))
            grew = True
        if not grew:
            # walled off: claim any unassigned foreground cell
            free = np.argwhere(fg_grid & (assign == -1))
            y, x = free[int(rng.integers(len(free)))]
            assign[y, x] = p
            remaining[p] -= 1
            frontier.append((int(y), int(x)))
        if remaining[p] == 0:
            active.remove(p)
    return assign


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` cells over prototypes."""
    raw = weights / weights.sum() * total
    counts = np.floor(raw).astype(np.int64)
    shortfall = total - counts.sum()
    if shortfall > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:shortfall]] += 1
    return counts


def _has_adjacency(assign: np.ndarray, a: int, b: int) -> bool:
    """True iff any cell of prototype ``a`` is 4-adjacent to one of ``b``."""
    mask_a = assign == a
    mask_b = assign == b
    shifted = np.zeros_like(mask_a)
    shifted[1:, :] |= mask_a[:-1, :]
    shifted[:-1, :] |= mask_a[1:, :]
    shifted[:, 1:] |= mask_a[:, :-1]
    shifted[:, :-1] |= mask_a[:, 1:]
    return bool((shifted & mask_b).any())


def _class_mixture(n_prototypes: int, n_classes: int, class_id: int) -> np.ndarray:
    """Mixture weights for a class: uniform base plus a bump on its own group."""
    groups = np.arange(n_prototypes) % n_classes
    weights = np.ones(n_prototypes)
    weights[groups == class_id] += 2.0
    return weights


def _slide_record(
    slide_id: str,
    assign: np.ndarray,
    prototypes: np.ndarray,
    sigma: float,
    rng: np.random.Generator,
    label,
) -> SlideRecord:
    ys, xs = np.nonzero(assign >= 0)
    protos = assign[ys, xs]
    features = prototypes[protos] + rng.normal(0.0, sigma, (len(ys), prototypes.shape[1]))
    return SlideRecord(
        slide_id=slide_id,
        grid_width=assign.shape[1],
        grid_height=assign.shape[0],
        xs=xs.astype(np.uint16),
        ys=ys.astype(np.uint16),
        foreground=np.ones(len(ys), dtype=bool),
        features=features.astype(np.float32),
        label=label,
    )


def generate_with_truth(config: SynthConfig, seed: int) -> tuple[FeatureStore, SynthTruth]:
    config.validate()
    root = np.random.SeedSequence(seed)
    proto_rng = np.random.default_rng(root.spawn(1)[0])
    prototypes = proto_rng.normal(0.0, 1.0, (config.n_prototypes, config.feature_dim))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    truth = SynthTruth(prototypes=prototypes)
    if config.task == "survival":
        w = proto_rng.normal(0.0, 1.0, config.n_prototypes)
        truth.hazard_weights = w / np.linalg.norm(w)

    slides = []
    slide_seeds = root.spawn(config.n_slides + 1)[1:]
    n_cells = config.grid_width * config.grid_height
    for i, ss in enumerate(slide_seeds):
        rng = np.random.default_rng(ss)
        slide_id = f"slide{i:04d}"
        if config.task == "spatial-classification":
            # fully foreground and identical counts on every slide: the only
            # per-slide difference is the arrangement
            fg_grid = np.ones((config.grid_height, config.grid_width), dtype=bool)
            counts = _apportion(n_cells, np.ones(config.n_prototypes))
            want_adjacent = i % 2 == 1
            assign = None
            for _ in range(500):
                candidate = _grow_assignment(rng, fg_grid, counts)
                if _has_adjacency(candidate, 0, 1) == want_adjacent:
                    assign = candidate
                    break
            if assign is None:
                raise StoreError(
                    f"{slide_id}: could not grow a layout with adjacency={want_adjacent}"
                )
            label = ClassLabel(class_id=int(want_adjacent))
            truth.adjacency[slide_id] = want_adjacent
        else:
            lo, hi = config.foreground_fraction
            target = max(1, round(rng.uniform(lo, hi) * n_cells))
            fg_grid = _grow_blob(rng, config.grid_height, config.grid_width, target)
            fg_count = int(fg_grid.sum())
            if config.task == "classification":
                class_id = i % config.n_classes
                mixture = _class_mixture(config.n_prototypes, config.n_classes, class_id)
                counts = _apportion(fg_count, mixture * rng.dirichlet(mixture * 4.0))
                assign = _grow_assignment(rng, fg_grid, counts)
                label = ClassLabel(class_id=class_id)
            else:
                mixture = rng.dirichlet(np.full(config.n_prototypes, 1.5))
                counts = _apportion(fg_count, mixture)
                assign = _grow_assignment(rng, fg_grid, counts)
                freq = counts / fg_count
                score = float(truth.hazard_weights @ freq)
                lam = float(np.exp(config.hazard_offset + config.hazard_scale * score))
                event_time = rng.exponential(1.0 / lam)
                censor_time = rng.uniform(0.05, config.censor_max)
                label = SurvivalLabel(
                    time_years=float(min(event_time, censor_time)),
                    event=bool(event_time <= censor_time),
                )
                truth.risk_scores[slide_id] = config.hazard_scale * score
        truth.assignments[slide_id] = assign
        slides.append(
            _slide_record(slide_id, assign, prototypes, config.noise_sigma, rng, label)
        )
    store = FeatureStore(feature_dim=config.feature_dim, slides=slides)
    store.validate()
    return store, truth


def synth_generate(config: SynthConfig, seed: int) -> FeatureStore:
    store, _ = generate_with_truth(config, seed)
    return store
