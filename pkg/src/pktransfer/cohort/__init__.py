"""Bags, cohorts, bag files, fold splitting and the synthetic generator."""

from .data import DEFAULT_N_BINS, Cohort, InstanceBag
from .io import load_bags, save_bags
from .splits import (FoldAssignment, check_inclusion, check_no_leakage, resplit_until_stable,
                     stratified_kfold)
from .synth import GroundTruth, SynthSpec, default_signal_dims, signal_score, synth_cohorts

__all__ = [
    "DEFAULT_N_BINS", "Cohort", "InstanceBag", "load_bags", "save_bags", "FoldAssignment",
    "check_inclusion", "check_no_leakage", "resplit_until_stable", "stratified_kfold",
    "GroundTruth", "SynthSpec", "default_signal_dims", "signal_score", "synth_cohorts",
]
