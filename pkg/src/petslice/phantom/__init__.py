"""Synthetic PET/CT phantoms, tumor planting and multi-rater label fusion."""

from .generator import CenterProfile, bccv_like, cohort_stats, generate_cohort, smhs_like
from .staple import RaterMaskSet, RaterNoise, StapleResult, simulate_raters, staple_fuse
from .volume import (
    MASK_THRESHOLD,
    PatientVolume,
    TumorSpec,
    plant_tumor,
    plant_tumor_inplace,
    slice_ground_truth,
    tmtv,
)

__all__ = [
    "CenterProfile", "MASK_THRESHOLD", "PatientVolume", "RaterMaskSet", "RaterNoise", "StapleResult",
    "TumorSpec", "bccv_like", "cohort_stats", "generate_cohort", "plant_tumor", "plant_tumor_inplace",
    "simulate_raters", "slice_ground_truth", "smhs_like", "staple_fuse", "tmtv",
]
