"""Factors that explain transfer performance, and their regression analysis.

Intra-task factors are the source model's own CV performance ``P_S`` and the
target's ``P_T``. Inter-task factors measure how close two cancers are in
survival profile (``C_RMST``) and in feature distribution (``C_Dist``).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import betainc
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.decomposition import PCA
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ContractError, ProjectionError, SingularMatrixError, UndefinedMetricError
from .survival import km_curve, rmst

FACTOR_NAMES = ("P_S", "P_T", "C_RMST", "C_Dist")
FACTOR_SUBSETS = (
    ("P_S",),
    ("P_T",),
    ("P_S", "P_T"),
    ("P_S", "P_T", "C_RMST"),
    ("P_S", "P_T", "C_Dist"),
    ("P_S", "P_T", "C_RMST", "C_Dist"),
)


def cohort_rmst(cohort, horizon=10):
    return rmst(km_curve(cohort.labels, cohort.n_bins), horizon)


def rmst_closeness(cohort_s, cohort_t, horizon=10):
    """``1 - |RMST_S - RMST_T| / horizon`` from per-bin Kaplan-Meier curves."""
    a = cohort_rmst(cohort_s, horizon)
    b = cohort_rmst(cohort_t, horizon)
    return 1.0 - abs(a - b) / horizon


def slide_features(cohort):
    return np.stack([b.features.mean(axis=0) for b in cohort.bags])


def dist_closeness(cohorts):
    """Pairwise closeness of cohort centroids in a shared 2-D projection.

    Slide features (instance means) of all cohorts are projected on their
    top two principal components, each cohort's centroid is taken there,
    and ``C = 1 - D / max(D)`` for the centroid distances ``D``.

    Returns
    -------
    codes : list of str
    C : ndarray of shape (n, n)
    """
    if len(cohorts) < 2:
        raise ContractError("dist_closeness needs at least two cohorts")
    feats = [slide_features(c) for c in cohorts]
    X = np.vstack(feats)
    if X.shape[1] < 2 or X.shape[0] < 2:
        raise ProjectionError(f"cannot project {X.shape} slide features to 2-D")
    if not np.any(X.var(axis=0) > 0):
        raise ProjectionError("slide features have zero variance")
    proj = PCA(n_components=2, svd_solver="full").fit(X)
    centroids = np.stack([proj.transform(f).mean(axis=0) for f in feats])
    D = np.sqrt(((centroids[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1))
    top = D.max()
    if top <= 0:
        raise ProjectionError("all cohort centroids coincide")
    C = 1.0 - D / top
    np.fill_diagonal(C, 1.0)
    return [c.cancer_code for c in cohorts], C


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 2:
        raise ContractError("pearson needs two equal-length vectors of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = np.dot(dx, dx), np.dot(dy, dy)
    if sxx == 0 or syy == 0:
        raise UndefinedMetricError("correlation undefined for a constant vector")
    r = np.dot(dx, dy) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def student_t_two_sided(t, dof):
    """Two-sided p-value ``P(|T| >= |t|)`` via the regularized incomplete beta."""
    t = np.asarray(t, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = dof / (dof + t * t)
    return np.where(np.isinf(t), 0.0, betainc(dof / 2.0, 0.5, x))


@dataclass
class OlsReport:
    """Fitted OLS model with inference statistics.

    ``coef``, ``se``, ``t`` and ``p`` list the intercept first, then the
    predictors in ``names`` order.
    """

    names: list
    coef: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    r2: float
    adj_r2: float
    nll: float
    n: int
    dof: int

    @property
    def intercept(self):
        return float(self.coef[0])

    @property
    def coefficients(self):
        return dict(zip(self.names, self.coef[1:].tolist()))

    @property
    def pvalues(self):
        return dict(zip(self.names, self.p[1:].tolist()))

    def to_dict(self):
        terms = ["intercept"] + list(self.names)
        return {
            "terms": terms,
            "coef": self.coef.tolist(),
            "se": self.se.tolist(),
            "t": self.t.tolist(),
            "p": self.p.tolist(),
            "r2": self.r2,
            "adj_r2": self.adj_r2,
            "nll": self.nll,
            "n": self.n,
            "dof": self.dof,
        }


def _dependent_columns(A, names):
    dependent, basis = [], np.zeros((A.shape[0], 0))
    for j, name in enumerate(names):
        trial = np.column_stack([basis, A[:, j]])
        if np.linalg.matrix_rank(trial) > basis.shape[1]:
            basis = trial
        else:
            dependent.append(name)
    return dependent


def ols_fit(X, y, names=None):
    """Ordinary least squares with an intercept column prepended.

    Parameters
    ----------
    X : array-like of shape (n, p)
        Predictors, without the intercept.
    y : array-like of shape (n,)
    names : list of str, optional
        Predictor names used in reports and error messages.

    Returns
    -------
    OlsReport
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=np.float64).ravel()
    n, p = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    if len(names) != p or y.shape[0] != n:
        raise ContractError("X, y and names disagree in size")
    if n <= p + 1:
        raise ContractError(f"need more rows than columns: n={n}, columns={p + 1}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ContractError("OLS inputs must be finite")
    A = np.column_stack([np.ones(n), X])
    Q, R = np.linalg.qr(A)
    diag = np.abs(np.diag(R))
    if np.linalg.matrix_rank(A) < p + 1 or diag.min() <= 1e-12 * diag.max():
        bad = _dependent_columns(A, ["intercept"] + names)
        raise SingularMatrixError(f"design matrix is rank deficient; dependent columns: {bad}", bad)
    beta = np.linalg.solve(R, Q.T @ y)
    resid = y - A @ beta
    rss = float(resid @ resid)
    dof = n - p - 1
    r_inv = np.linalg.solve(R, np.eye(p + 1))
    cov_unscaled = r_inv @ r_inv.T
    se = np.sqrt(rss / dof * np.diag(cov_unscaled))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, np.where(beta == 0, 0.0, np.sign(beta) * np.inf))
    pvals = student_t_two_sided(t, dof)
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - rss / tss if tss > 0 else float("nan")
    adj = 1.0 - (1.0 - r2) * (n - 1) / dof
    with np.errstate(divide="ignore"):
        nll = 0.5 * n * (np.log(2.0 * np.pi * rss / n) + 1.0)
    return OlsReport(names, beta, se, t, pvals, float(r2), float(adj), float(nll), n, dof)


class OLSRegression(RegressorMixin, BaseEstimator):
    """Least-squares linear regression with coefficient inference.

    Attributes
    ----------
    report_ : OlsReport
    coef_ : ndarray of shape (n_features,)
    intercept_ : float
    """

    def __init__(self, feature_names=None):
        self.feature_names = feature_names

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.report_ = ols_fit(X, y, self.feature_names)
        self.coef_ = self.report_.coef[1:].copy()
        self.intercept_ = self.report_.intercept
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "report_")
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_ + self.intercept_


@dataclass
class FactorRow:
    source: str
    target: str
    P_S: float
    P_T: float
    C_RMST: float
    C_Dist: float
    P_ST: float

    def factors(self, subset):
        return [getattr(self, f) for f in subset]


@dataclass
class FactorAnalysis:
    rows: list
    reports: dict
    univariate: dict = field(default_factory=dict)

    def table_csv(self, path=None):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["source", "target", *FACTOR_NAMES, "P_ST"])
        for r in self.rows:
            writer.writerow([r.source, r.target] + [repr(float(v)) for v in
                                                   (r.P_S, r.P_T, r.C_RMST, r.C_Dist, r.P_ST)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def to_dict(self):
        return {
            "rows": [asdict(r) for r in self.rows],
            "reports": {"+".join(k): v.to_dict() for k, v in self.reports.items()},
            "univariate": self.univariate,
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=True) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def factor_table(matrix, cohorts, horizon=10):
    """One :class:`FactorRow` per ordered pair of distinct cancers."""
    by_code = {c.cancer_code: c for c in cohorts}
    codes = [c for c in matrix.sources if c in matrix.targets]
    if set(codes) != set(matrix.targets) or set(codes) != set(matrix.sources):
        raise ContractError("factor analysis needs a square matrix over the same cancers")
    missing = [c for c in codes if c not in by_code]
    if missing:
        raise ContractError(f"no cohort for {missing}")
    dist_codes, dist = dist_closeness([by_code[c] for c in codes])
    rmst_of = {c: cohort_rmst(by_code[c], horizon) for c in codes}
    diag = matrix.diagonal()
    rows = []
    for s in codes:
        for t in codes:
            if s == t:
                continue
            rows.append(FactorRow(
                s, t, diag[s], diag[t],
                1.0 - abs(rmst_of[s] - rmst_of[t]) / horizon,
                float(dist[dist_codes.index(s), dist_codes.index(t)]),
                matrix.get(s, t)))
    return rows


def _safe_pearson(x, y):
    try:
        return pearson(x, y)
    except (UndefinedMetricError, ContractError):
        return None


def factor_analysis(matrix, cohorts, horizon=10, subsets=FACTOR_SUBSETS):
    """Regress ``P_ST`` on each factor subset and correlate closeness with gain.

    The per-target univariate entries correlate ``C_RMST`` and ``C_Dist``
    with ``P_ST - P_S`` across sources (None when undefined).
    """
    rows = factor_table(matrix, cohorts, horizon)
    y = np.array([r.P_ST for r in rows])
    reports = {}
    for subset in subsets:
        X = np.array([r.factors(subset) for r in rows])
        reports[tuple(subset)] = ols_fit(X, y, list(subset))
    univariate = {}
    for t in dict.fromkeys(r.target for r in rows):
        sel = [r for r in rows if r.target == t]
        gain = [r.P_ST - r.P_S for r in sel]
        univariate[t] = {
            "C_RMST": _safe_pearson([r.C_RMST for r in sel], gain),
            "C_Dist": _safe_pearson([r.C_Dist for r in sel], gain),
        }
    return FactorAnalysis(rows, reports, univariate)
