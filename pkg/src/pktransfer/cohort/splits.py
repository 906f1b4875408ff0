"""Cohort inclusion rules and patient-level stratified K-fold splitting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..exceptions import ContractError

MIN_PATIENTS = 200
MIN_EVENT_RATIO = 0.05


def check_inclusion(cohort, min_patients=MIN_PATIENTS, min_event_ratio=MIN_EVENT_RATIO):
    """``"included"`` if the cohort can train its own model, else ``"rare"``.

    Both thresholds are strict: more than ``min_patients`` distinct patients
    and a patient-level event ratio above ``min_event_ratio``.
    """
    patients = cohort.patients()
    if not patients:
        raise ContractError("empty cohort")
    n = len(patients)
    events = sum(1 for label in patients.values() if label.event)
    if n > min_patients and events / n > min_event_ratio:
        return "included"
    return "rare"


@dataclass(frozen=True)
class FoldAssignment:
    """Patient-to-fold map; all bags of a patient share its fold."""

    k: int
    folds: dict
    seed: int | None = None

    def bag_folds(self, cohort):
        return np.array([self.folds[b.patient_id] for b in cohort.bags])

    def split(self, cohort, fold):
        """(train indices, test indices) into ``cohort.bags`` for one fold."""
        f = self.bag_folds(cohort)
        return np.flatnonzero(f != fold), np.flatnonzero(f == fold)

    def to_dict(self):
        return {"k": self.k, "seed": self.seed, "folds": dict(self.folds)}

    @classmethod
    def from_dict(cls, data):
        return cls(int(data["k"]), {str(p): int(f) for p, f in data["folds"].items()}, data.get("seed"))


def stratified_kfold(cohort, k=5, seed=0):
    """Patient-level K-fold split stratified by (time bin, event).

    Patients are shuffled within each stratum and dealt round-robin, with
    the dealing position carried across strata, so per-stratum fold counts
    differ by at most one and so do overall fold sizes.
    """
    if k < 2:
        raise ContractError(f"need k >= 2, got {k}")
    patients = cohort.patients()
    if len(patients) < k:
        raise ContractError(f"{len(patients)} patients cannot fill {k} folds")
    strata = {}
    for pid, label in patients.items():
        strata.setdefault((label.time_bin, label.event), []).append(pid)
    rng = np.random.default_rng(seed)
    folds, cursor = {}, 0
    for key in sorted(strata):
        members = strata[key]
        for idx in rng.permutation(len(members)):
            folds[members[idx]] = cursor % k
            cursor += 1
    return FoldAssignment(k, folds, seed)


def resplit_until_stable(cohort, k, trainer, max_seeds, seeds=None, return_scores=False):
    """Pick, among candidate seeds, the split whose CV C-Index varies least.

    ``trainer(cohort, folds)`` must return the per-fold test C-Indices.
    Candidates are ``seeds`` if given, else ``0..max_seeds-1``; ties keep the
    earliest candidate. With ``return_scores`` the per-seed standard
    deviations are returned alongside the chosen split.
    """
    if max_seeds < 1:
        raise ContractError("max_seeds must be >= 1")
    candidates = list(seeds)[:max_seeds] if seeds is not None else list(range(max_seeds))
    best, best_std, stds = None, np.inf, {}
    for s in candidates:
        folds = stratified_kfold(cohort, k, s)
        std = float(np.std(trainer(cohort, folds)))
        stds[s] = std
        if std < best_std:
            best, best_std = folds, std
    return (best, stds) if return_scores else best


def check_no_leakage(cohort, folds, trace):
    """Raise if a training set in ``trace`` contains a bag of a test patient.

    ``trace`` maps fold index to the bag ids used for training that fold.
    """
    patient_of = {b.bag_id: b.patient_id for b in cohort.bags}
    for fold, train_ids in trace.items():
        leaked = [bid for bid in train_ids if folds.folds[patient_of[bid]] == int(fold)]
        if leaked:
            raise ContractError(f"fold {fold}: test-patient bags in training: {leaked[:5]}")
