import json

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from pktransfer.cohort import Cohort, InstanceBag, SynthSpec, synth_cohorts
from pktransfer.exceptions import ContractError, ProjectionError, SingularMatrixError, UndefinedMetricError
from pktransfer.factors import (FACTOR_SUBSETS, OLSRegression, cohort_rmst, dist_closeness,
                                factor_analysis, factor_table, ols_fit, pearson, rmst_closeness)
from pktransfer.transfer import TransferMatrix
from pktransfer.validation import make_labels


def label_cohort(code, time, event, rng=None, shift=0.0, d=3):
    rng = rng or np.random.default_rng(0)
    bags = [InstanceBag(f"{code}{i}", f"{code}{i}", code, rng.standard_normal((3, d)) + shift)
            for i in range(len(time))]
    return Cohort(code, bags, make_labels(np.asarray(time), np.asarray(event, bool)))


def test_rmst_closeness_examples():
    s = label_cohort("S", [7] * 4, [True] * 4)     # RMST(10) = 1 + 7 = 8
    t = label_cohort("T", [5] * 4, [True] * 4)     # RMST(10) = 1 + 5 = 6
    assert cohort_rmst(s) == 8.0 and cohort_rmst(t) == 6.0
    assert rmst_closeness(s, t) == pytest.approx(0.8)
    assert rmst_closeness(s, s) == 1.0
    with pytest.raises(ContractError):
        rmst_closeness(s, t, horizon=11)


def test_rmst_closeness_matches_independent_pipeline(rng):
    def km(time, event, n_bins=10):
        out, s = [], 1.0
        for b in range(n_bins):
            at_risk = np.sum(time >= b)
            deaths = np.sum((time == b) & event)
            s *= 1 - deaths / at_risk if at_risk else 1.0
            out.append(s)
        return out

    for _ in range(5):
        ta, tb = rng.integers(0, 10, 50), rng.integers(0, 10, 40)
        ea, eb = rng.uniform(size=50) < 0.6, rng.uniform(size=40) < 0.4
        a, b = label_cohort("A", ta, ea, rng), label_cohort("B", tb, eb, rng)
        ra, rb = 1 + sum(km(ta, ea)[:9]), 1 + sum(km(tb, eb)[:9])
        value = rmst_closeness(a, b)
        assert value == pytest.approx(1 - abs(ra - rb) / 10, abs=1e-12)
        assert value == rmst_closeness(b, a) and 0 <= value <= 1


def test_dist_closeness_structure():
    spec = SynthSpec(n_cancers=3, n_patients=60, d=8, m_range=(5, 10), signal_dims=[[0], [0], [1]],
                     cancer_shift=[0.0, 0.0, 0.0], seed=0)
    cohorts, _ = synth_cohorts(spec)
    shifted = Cohort("FAR", [InstanceBag(b.bag_id, b.patient_id, "FAR", b.features + 1.5)
                             for b in cohorts[2].bags], cohorts[2].labels)
    codes, C = dist_closeness([cohorts[0], cohorts[1], shifted])
    assert codes == ["SYN0", "SYN1", "FAR"]
    np.testing.assert_array_equal(np.diag(C), 1.0)
    np.testing.assert_allclose(C, C.T, atol=1e-15)
    assert C.min() == 0.0 and np.all(C <= 1)
    assert C[0, 1] > max(C[0, 2], C[1, 2])


def test_dist_closeness_is_deterministic_and_allows_single_slide(rng):
    a = label_cohort("A", [1, 2, 3], [True] * 3, rng)
    b = label_cohort("B", [1], [True], rng, shift=2.0)
    c = label_cohort("C", [4, 5], [False, True], rng, shift=-1.0)
    first = dist_closeness([a, b, c])[1]
    np.testing.assert_array_equal(first, dist_closeness([a, b, c])[1])


def test_dist_closeness_errors():
    x = np.ones((2, 3))
    a = Cohort("A", [InstanceBag("a", "a", "A", x)], make_labels(np.array([0]), np.array([True])))
    b = Cohort("B", [InstanceBag("b", "b", "B", x)], make_labels(np.array([0]), np.array([True])))
    with pytest.raises(ProjectionError):
        dist_closeness([a, b])
    with pytest.raises(ContractError):
        dist_closeness([a])


def test_pearson_examples_and_oracle(rng):
    x = rng.standard_normal(30)
    assert pearson(x, x) == pytest.approx(1.0, abs=1e-15)
    assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-15)
    for _ in range(10):
        a, b = rng.standard_normal(25), rng.standard_normal(25)
        cov = np.sum((a - a.mean()) * (b - b.mean())) / 24
        oracle = cov / (np.std(a, ddof=1) * np.std(b, ddof=1))
        assert pearson(a, b) == pytest.approx(oracle, abs=1e-12)
    with pytest.raises(UndefinedMetricError):
        pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


@given(arrays(np.float64, 12, elements=st.floats(-10, 10)), arrays(np.float64, 12, elements=st.floats(-10, 10)),
       st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_positive_affine_invariance(x, y, scale, shift):
    assume(np.std(x) > 1e-3 and np.std(y) > 1e-3)
    assert pearson(scale * x + shift, y) == pytest.approx(pearson(x, y), abs=1e-9)


def test_ols_exact_fit():
    x = np.arange(10.0)
    r = ols_fit(x[:, None], 2 * x + 1, ["x"])
    assert r.coefficients["x"] == pytest.approx(2.0)
    assert r.intercept == pytest.approx(1.0)
    assert r.r2 == pytest.approx(1.0)


def test_ols_without_explanatory_power(rng):
    y = rng.standard_normal(20)
    assert ols_fit(np.zeros((20, 0)), y, []).adj_r2 <= 0
    x = rng.standard_normal(20)
    x -= x.mean()
    dy = y - y.mean()
    x -= dy * (x @ dy) / (dy @ dy)        # exactly uncorrelated with y
    r = ols_fit(x[:, None], y, ["x"])
    assert r.r2 == pytest.approx(0.0, abs=1e-12) and r.adj_r2 <= 0


def test_ols_matches_normal_equations(rng):
    X = rng.standard_normal((30, 3))
    y = X @ [0.5, -1.0, 2.0] + 0.3 + rng.standard_normal(30)
    A = np.column_stack([np.ones(30), X])
    beta = np.linalg.solve(A.T @ A, A.T @ y)
    np.testing.assert_allclose(ols_fit(X, y).coef, beta, rtol=0, atol=1e-10)


def test_ols_matches_statsmodels(rng):
    sm = pytest.importorskip("statsmodels.api")
    X = rng.standard_normal((40, 4))
    y = X @ [0.2, 0.0, -0.7, 1.1] + rng.standard_normal(40)
    ours = ols_fit(X, y)
    ref = sm.OLS(y, sm.add_constant(X)).fit()
    np.testing.assert_allclose(ours.coef, ref.params, rtol=1e-10)
    np.testing.assert_allclose(ours.se, ref.bse, rtol=1e-10)
    np.testing.assert_allclose(ours.t, ref.tvalues, rtol=1e-10)
    np.testing.assert_allclose(ours.p, ref.pvalues, rtol=1e-8, atol=1e-14)
    assert ours.adj_r2 == pytest.approx(ref.rsquared_adj, rel=1e-10)
    assert ours.nll == pytest.approx(-ref.llf, rel=1e-10)
    assert ours.dof == ref.df_resid


@given(st.integers(8, 40), st.integers(1, 4), st.integers(0, 10_000))
def test_ols_residuals_orthogonal_and_nested_r2(n, p, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p + 1))
    y = rng.standard_normal(n)
    full = ols_fit(X, y)
    reduced = ols_fit(X[:, :p], y)
    resid = y - np.column_stack([np.ones(n), X]) @ full.coef
    A = np.column_stack([np.ones(n), X])
    assert np.all(np.abs(A.T @ resid) < 1e-9)
    assert full.r2 >= reduced.r2 - 1e-12
    assert np.all((full.p >= 0) & (full.p <= 1)) and full.adj_r2 <= 1


def test_ols_singular_names_columns(rng):
    x = rng.standard_normal(12)
    with pytest.raises(SingularMatrixError, match="b") as info:
        ols_fit(np.column_stack([x, x]), rng.standard_normal(12), ["a", "b"])
    assert info.value.dependent_columns == ["b"]
    with pytest.raises(SingularMatrixError) as info:
        ols_fit(np.column_stack([x, np.full(12, 3.0)]), x, ["a", "const"])
    assert info.value.dependent_columns == ["const"]
    with pytest.raises(ContractError):
        ols_fit(np.ones((2, 2)), [1.0, 2.0])


def test_ols_estimator(rng):
    X = rng.standard_normal((25, 2))
    y = X @ [1.0, -2.0] + 0.5
    est = OLSRegression(feature_names=["u", "v"]).fit(X, y)
    np.testing.assert_allclose(est.coef_, [1.0, -2.0], atol=1e-12)
    assert est.score(X, y) == pytest.approx(1.0)
    assert clone(est).get_params() == {"feature_names": ["u", "v"]}
    assert est.report_.pvalues.keys() == {"u", "v"}


@pytest.fixture(scope="module")
def four_cancers():
    spec = SynthSpec(n_cancers=4, n_patients=[40, 50, 60, 45], d=6, m_range=(3, 6),
                     signal_dims=[[0], [0], [1], [1]], cancer_shift=[0.0, 0.5, 1.0, 1.5], seed=4)
    cohorts, _ = synth_cohorts(spec)
    codes = [c.cancer_code for c in cohorts]
    values = np.random.default_rng(1).uniform(0.4, 0.8, (4, 4))
    return cohorts, TransferMatrix(codes, codes, values, np.full((4, 4), 0.01))


def test_factor_table_rows(four_cancers):
    cohorts, matrix = four_cancers
    rows = factor_table(matrix, cohorts)
    assert len(rows) == 12 and all(r.source != r.target for r in rows)
    r = next(r for r in rows if (r.source, r.target) == ("SYN1", "SYN3"))
    assert r.P_S == matrix.get("SYN1", "SYN1") and r.P_T == matrix.get("SYN3", "SYN3")
    assert r.P_ST == matrix.get("SYN1", "SYN3")
    assert r.C_RMST == pytest.approx(rmst_closeness(cohorts[1], cohorts[3]))
    assert r.C_Dist == pytest.approx(dist_closeness(cohorts)[1][1, 3])


def test_factor_analysis_six_reports(four_cancers, tmp_path):
    cohorts, matrix = four_cancers
    fa = factor_analysis(matrix, cohorts)
    assert list(fa.reports) == [tuple(s) for s in FACTOR_SUBSETS]
    assert len(fa.reports) == 6
    assert fa.reports[("P_S",)].names == ["P_S"]
    assert set(fa.univariate) == {"SYN0", "SYN1", "SYN2", "SYN3"}
    for entry in fa.univariate.values():
        assert set(entry) == {"C_RMST", "C_Dist"}
    fa.to_json(tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert set(data["reports"]) == {"+".join(s) for s in FACTOR_SUBSETS}
    assert len(fa.table_csv().splitlines()) == 13


def test_factor_analysis_needs_square_matrix(four_cancers):
    cohorts, matrix = four_cancers
    rect = TransferMatrix(matrix.sources, matrix.targets[:2], matrix.values[:, :2], matrix.sigma[:, :2])
    with pytest.raises(ContractError):
        factor_analysis(rect, cohorts)
