from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ContractError, DimensionError
from ..validation import SurvivalLabel, check_labels, make_labels

DEFAULT_N_BINS = 10


@dataclass(frozen=True, eq=False)
class InstanceBag:
    """One slide: ``M`` instance feature vectors of dimension ``d``."""

    bag_id: str
    patient_id: str
    cancer_code: str
    features: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise DimensionError(f"bag {self.bag_id}: need (M, d) with M >= 1, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ContractError(f"bag {self.bag_id}: non-finite features")
        x.setflags(write=False)
        object.__setattr__(self, "features", x)

    @property
    def n_instances(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.features if dtype is None else self.features.astype(dtype)


@dataclass(eq=False)
class Cohort:
    """Bags of one cancer type with aligned survival labels."""

    cancer_code: str
    bags: list
    labels: np.ndarray
    n_bins: int = DEFAULT_N_BINS
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        time, event = check_labels(self.labels, self.n_bins)
        self.labels = make_labels(time, event)
        self.labels.setflags(write=False)
        if len(self.bags) != len(self.labels):
            raise ContractError(f"{len(self.bags)} bags but {len(self.labels)} labels")
        dims = {b.d for b in self.bags}
        if len(dims) > 1:
            raise DimensionError(f"cohort {self.cancer_code}: mixed feature dims {sorted(dims)}")
        codes = {b.cancer_code for b in self.bags}
        if codes - {self.cancer_code}:
            raise ContractError(f"cohort {self.cancer_code} holds bags of {sorted(codes)}")

    def __len__(self):
        return len(self.bags)

    @property
    def d(self):
        return self.bags[0].d if self.bags else None

    @property
    def time_bin(self):
        return self.labels["time_bin"]

    @property
    def event(self):
        return self.labels["event"]

    @property
    def bag_ids(self):
        return [b.bag_id for b in self.bags]

    @property
    def patient_ids(self):
        return [b.patient_id for b in self.bags]

    def label(self, i):
        return SurvivalLabel(int(self.time_bin[i]), bool(self.event[i]))

    def patients(self):
        """Distinct patients in first-appearance order with their first label."""
        seen = {}
        for i, b in enumerate(self.bags):
            seen.setdefault(b.patient_id, i)
        return {pid: self.label(i) for pid, i in seen.items()}

    def subset(self, indices):
        indices = list(indices)
        return Cohort(
            self.cancer_code,
            [self.bags[i] for i in indices],
            self.labels[indices],
            self.n_bins,
            dict(self.metadata),
        )
