"""On-disk patch-feature stores, region sampling, and synthetic generation."""

from .io import (
    format_label,
    parse_label,
    read_manifest,
    read_store,
    write_manifest,
    write_store,
)
from .sampling import (
    gather_region,
    overlap_fraction,
    sample_region,
    sample_region_set,
    systematic_region_set,
    valid_origins,
)
from .synth import SynthConfig, SynthTruth, generate_with_truth, synth_generate
from .types import (
    ClassLabel,
    FeatureStore,
    NoValidRegion,
    RegionSpec,
    RegionTensor,
    SlideLabel,
    SlideRecord,
    StoreError,
    SurvivalLabel,
    region_positions,
)

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
    "SynthConfig",
    "SynthTruth",
    "format_label",
    "gather_region",
    "generate_with_truth",
    "overlap_fraction",
    "parse_label",
    "read_manifest",
    "read_store",
    "region_positions",
    "sample_region",
    "sample_region_set",
    "synth_generate",
    "systematic_region_set",
    "valid_origins",
    "write_manifest",
    "write_store",
]
