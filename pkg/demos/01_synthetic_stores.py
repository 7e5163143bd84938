#!/usr/bin/env python3
"""Build synthetic feature stores and poke at their planted structure.

Walks through the three store flavors (survival, classification,
spatial-classification), shows the on-disk round trip, and verifies that the
spatial task is invisible to bag-of-patches statistics.

Run from the repository root:

    python3 demos/01_synthetic_stores.py
"""

import tempfile
from pathlib import Path

import numpy as np

from histomask.featstore import (
    SynthConfig,
    generate_with_truth,
    read_store,
    write_store,
)

rng_seed = 7

print("=" * 68)
print("1. survival store: log-hazard is linear in prototype frequencies")
print("=" * 68)
config = SynthConfig(
    n_slides=24,
    grid_width=16,
    grid_height=16,
    feature_dim=32,
    n_prototypes=6,
    noise_sigma=0.1,
    task="survival",
)
store, truth = generate_with_truth(config, rng_seed)
events = sum(1 for s in store if s.label.event)
print(f"slides: {len(store)}, events: {events}, censored: {len(store) - events}")
times = np.array([s.label.time_years for s in store])
risks = np.array([truth.risk_scores[s.slide_id] for s in store])
print(f"observed times: min {times.min():.2f}y max {times.max():.2f}y")
print(f"planted risk scores correlate with shorter lives: "
      f"corr(risk, time) = {np.corrcoef(risks, times)[0, 1]:+.2f}")

print()
print("=" * 68)
print("2. the store file round-trips byte-exactly")
print("=" * 68)
with tempfile.TemporaryDirectory() as tmp:
    path_a = Path(tmp) / "a.mhfs"
    path_b = Path(tmp) / "b.mhfs"
    write_store(store, path_a)
    write_store(read_store(path_a), path_b)
    print(f"wrote {path_a.stat().st_size} bytes; "
          f"re-serialization identical: {path_a.read_bytes() == path_b.read_bytes()}")

print()
print("=" * 68)
print("3. spatial-classification: identical bags, different arrangements")
print("=" * 68)
config = SynthConfig(
    n_slides=12,
    grid_width=8,
    grid_height=8,
    feature_dim=32,
    n_prototypes=4,
    noise_sigma=0.1,
    task="spatial-classification",
)
store, truth = generate_with_truth(config, rng_seed)
histograms = {}
for slide in store:
    assign = truth.assignments[slide.slide_id]
    counts = tuple(np.bincount(assign[assign >= 0], minlength=4))
    histograms.setdefault(slide.label.class_id, set()).add(counts)
print(f"class 0 histograms: {histograms[0]}")
print(f"class 1 histograms: {histograms[1]}")
print("every slide has the same prototype counts; only adjacency differs.")

slide = store.slides[1]
assign = truth.assignments[slide.slide_id]
glyphs = np.array(list("ABCD"))
print(f"\nlayout of {slide.slide_id} (label={slide.label.class_id}, "
      "1 means an A cell touches a B cell):")
for row in assign:
    print("  " + "".join(glyphs[row]))
