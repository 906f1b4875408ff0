"""Cross-cancer transfer evaluation.

A source model trained on cancer S is applied unchanged to cancer T and
scored by the C-Index of its risk predictions, giving ``P[S -> T]``. The
diagonal ``P[T -> T]`` is T's own cross-validated performance.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .abmil import AbmilModel, CVResult, train_cancer_specific
from .cohort import stratified_kfold
from .exceptions import ContractError, UndefinedMetricError
from .survival import c_index, risk_score
from .training import TrainConfig

SOURCE_FOLD = 0


def _risk_fn(model):
    if isinstance(model, AbmilModel):
        return lambda bag: risk_score(model.forward(bag)[0])
    if callable(model):
        return model
    raise ContractError(f"cannot score bags with {type(model).__name__}")


def eval_transfer(model, cohort, folds=None):
    """Apply a frozen model to a target cohort.

    Parameters
    ----------
    model : AbmilModel or callable
        Source model, or any ``bag -> risk`` function.
    cohort : Cohort
        Target cohort.
    folds : FoldAssignment, optional
        Target folds; the result is the mean test-fold C-Index. Without
        folds the whole cohort is one test set.

    Returns
    -------
    mean, std : float
        Mean and standard deviation over scored folds (std is NaN for a
        single pooled test set).
    """
    if isinstance(model, AbmilModel) and model.config.d_in != cohort.d:
        raise ContractError(f"model expects d_in={model.config.d_in}, cohort has d={cohort.d}")
    score = _risk_fn(model)
    risks = np.array([score(b) for b in cohort.bags])
    if folds is None:
        return c_index(risks, cohort.labels), float("nan")
    f = folds.bag_folds(cohort)
    values = []
    for fold in range(folds.k):
        idx = np.flatnonzero(f == fold)
        try:
            values.append(c_index(risks[idx], cohort.labels[idx]))
        except UndefinedMetricError:
            warnings.warn(f"{cohort.cancer_code} fold {fold}: C-Index undefined, skipped", stacklevel=2)
    if not values:
        raise UndefinedMetricError(f"C-Index undefined on every fold of {cohort.cancer_code}")
    return float(np.mean(values)), float(np.std(values))


@dataclass(frozen=True)
class TransferVerdict:
    source: str
    target: str
    performance: float

    @property
    def positive(self):
        return bool(self.performance > 0.5)


@dataclass
class TransferMatrix:
    """``values[i, j]`` is ``P[sources[i] -> targets[j]]``; ``sigma`` the fold std."""

    sources: list
    targets: list
    values: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        shape = (len(self.sources), len(self.targets))
        if self.values.shape != shape or self.sigma.shape != shape:
            raise ContractError(f"matrix must be {shape}, got {self.values.shape}")

    def get(self, source, target):
        return float(self.values[self.sources.index(source), self.targets.index(target)])

    def column(self, target):
        j = self.targets.index(target)
        return dict(zip(self.sources, self.values[:, j].tolist()))

    def diagonal(self):
        return {c: self.get(c, c) for c in self.sources if c in self.targets}

    def verdicts(self):
        return [TransferVerdict(s, t, self.get(s, t))
                for s in self.sources for t in self.targets if s != t]

    def to_csv(self, path=None):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["source"] + list(self.targets))
        for i, s in enumerate(self.sources):
            cells = []
            for j in range(len(self.targets)):
                v, sd = self.values[i, j], self.sigma[i, j]
                cells.append(f"{v:.4f}" if np.isnan(sd) else f"{v:.4f}±{sd:.4f}")
            writer.writerow([s] + cells)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def to_dict(self):
        def clean(a):
            return [[None if np.isnan(x) else float(x) for x in row] for row in a]
        return {"sources": list(self.sources), "targets": list(self.targets),
                "values": clean(self.values), "sigma": clean(self.sigma)}

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_dict(cls, data):
        def restore(a):
            return np.array([[np.nan if x is None else x for x in row] for row in a], dtype=np.float64)
        return cls(list(data["sources"]), list(data["targets"]),
                   restore(data["values"]), restore(data["sigma"]))

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def cohort_seed(seed, index):
    """Training seed of the ``index``-th cohort, so no two cohorts share an init."""
    return int(seed) + 100_000 * int(index)


def train_sources(cohorts, k=5, cfg=None, model_cfg=None, split_seed=0):
    """Cross-validate one ABMIL per cohort.

    Cohort ``i`` trains with seed ``cohort_seed(cfg.seed, i)``.

    Returns
    -------
    results : dict of str -> CVResult
    folds : dict of str -> FoldAssignment
    """
    cfg = cfg or TrainConfig()
    results, folds = {}, {}
    for i, cohort in enumerate(cohorts):
        code = cohort.cancer_code
        folds[code] = stratified_kfold(cohort, k, split_seed)
        cohort_cfg = TrainConfig(**{**cfg.to_dict(), "seed": cohort_seed(cfg.seed, i)})
        results[code] = train_cancer_specific(cohort, folds[code], cohort_cfg, model_cfg)
    return results, folds


def _cell(source, target, models, cohorts, folds):
    if source not in models:
        raise ContractError(f"cell ({source}, {target}): no model for source {source!r}")
    if target not in cohorts:
        raise ContractError(f"cell ({source}, {target}): no cohort for target {target!r}")
    entry = models[source]
    target_folds = folds.get(target)
    if source == target and isinstance(entry, CVResult):
        return entry.mean, entry.std
    model = entry.models[SOURCE_FOLD] if isinstance(entry, CVResult) else entry
    return eval_transfer(model, cohorts[target], target_folds)


def transfer_matrix(models, cohorts, folds=None, sources=None, targets=None, n_jobs=1):
    """Evaluate every (source, target) cell.

    Parameters
    ----------
    models : dict of str -> CVResult or AbmilModel
        Source models. For a :class:`CVResult` the first fold's model is
        transferred and the diagonal is the cohort's own CV result.
    cohorts : dict of str -> Cohort
        Target cohorts.
    folds : dict of str -> FoldAssignment, optional
        Target folds. Targets without folds (the rare pool) are scored as
        a single test set.
    sources, targets : list of str, optional
        Registry order; default to the dict orders.
    n_jobs : int
        Cells are independent and may be evaluated in parallel threads.
    """
    sources = list(sources if sources is not None else models)
    targets = list(targets if targets is not None else cohorts)
    folds = folds or {}
    cells = [(s, t) for s in sources for t in targets]
    out = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_cell)(s, t, models, cohorts, folds) for s, t in cells)
    values = np.array([v for v, _ in out]).reshape(len(sources), len(targets))
    sigma = np.array([sd for _, sd in out]).reshape(len(sources), len(targets))
    return TransferMatrix(sources, targets, values, sigma)


def nearest_source(matrix, target, registry=None):
    """The source with the best transfer into ``target``, excluding itself.

    Ties go to the earliest source in ``registry`` (default: matrix order).
    """
    if target not in matrix.targets:
        raise ContractError(f"target {target!r} not in matrix")
    order = list(registry) if registry is not None else list(matrix.sources)
    col = matrix.column(target)
    best, best_val = None, -np.inf
    for s in order:
        if s == target or s not in col:
            continue
        if col[s] > best_val:
            best, best_val = s, col[s]
    if best is None:
        raise ContractError(f"no source other than {target!r} available")
    return best
