import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit

from sdbench.linear import (AsdModel, FitError, HyperParams, WeightMatrix, asd_fit, asd_predict,
                            combine_occurrence_amount, ebic_select, elasticnet_fit,
                            elasticnet_kkt, elasticnet_lambda_max, elasticnet_objective,
                            grid_search_cv, l1_logistic_fit, logistic_fit, logistic_kkt, ols_fit,
                            predict_proba, svc_fit, svc_objective, svr_fit, svr_objective,
                            with_hyper)
from sdbench.preprocess import standardize_apply, standardize_fit


# --------------------------------------------------------------------------- OLS

def test_ols_exact_line():
    x = np.arange(10.0)[:, None]
    w = ols_fit(x, 2 * x[:, 0])
    assert w.coef[0, 0] == pytest.approx(2.0, abs=1e-12)
    assert w.intercept[0] == pytest.approx(0.0, abs=1e-12)


def test_ols_orthogonal_target():
    X = np.array([[1.0, 0], [-1, 0], [0, 1], [0, -1]])
    y = np.array([1.0, 1.0, 1.0, 1.0])
    assert np.allclose(ols_fit(X, y).coef, 0, atol=1e-14)


def test_ols_matches_normal_equations(rng):
    X = rng.standard_normal((50, 3))
    y = rng.standard_normal(50)
    w = ols_fit(X, y, fit_intercept=False)
    ref = np.linalg.solve(X.T @ X, X.T @ y)
    assert np.allclose(w.coef[:, 0], ref, atol=1e-8)
    r = y - X @ w.coef[:, 0]
    assert np.abs(X.T @ r).max() < 1e-8


def test_ols_rank_deficient_warns(rng):
    x = rng.standard_normal(20)
    with pytest.warns(RuntimeWarning, match="rank"):
        w = ols_fit(np.column_stack([x, x]), 3 * x)
    assert np.allclose(w.coef[:, 0], [1.5, 1.5])


def test_weight_matrix_roundtrip_and_validation():
    w = WeightMatrix(np.arange(6.0).reshape(3, 2), [1.0, 2.0])
    assert WeightMatrix.from_dict(w.to_dict()).coef.tolist() == w.coef.tolist()
    assert w.column(1).coef[:, 0].tolist() == [1.0, 3.0, 5.0]
    with pytest.raises(ValueError):
        WeightMatrix(np.ones((3, 2)), [1.0])
    with pytest.raises(ValueError):
        WeightMatrix(np.array([[np.nan]]), [0.0])
    with pytest.raises(ValueError):
        w.predict(np.ones((1, 2)))


# ---------------------------------------------------------------------- logistic

def test_logistic_separable(rng):
    X = rng.standard_normal((60, 2))
    labels = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(float)
    w = logistic_fit(X, labels)
    assert np.all((predict_proba(X, w)[:, 0] >= 0.5) == (labels == 1))


def test_logistic_independent_labels_give_prior(rng):
    X = rng.standard_normal((4000, 3))
    labels = (rng.random(4000) < 0.3).astype(float)
    p = predict_proba(X, logistic_fit(X, labels))
    # intercept score equation: mean prediction equals the prior exactly
    assert p.mean() == pytest.approx(labels.mean(), abs=1e-6)
    assert np.abs(p - labels.mean()).max() < 0.1


def test_logistic_flip_symmetry(rng):
    X = rng.standard_normal((200, 3))
    labels = (X[:, 0] + rng.standard_normal(200) > 0).astype(float)
    p = predict_proba(X, logistic_fit(X, labels))
    q = predict_proba(X, logistic_fit(X, 1 - labels))
    assert np.abs(p + q - 1).max() < 1e-6


def test_logistic_single_class():
    with pytest.raises(FitError):
        logistic_fit(np.ones((5, 1)), np.ones(5))
    with pytest.raises(ValueError):
        logistic_fit(np.ones((2, 1)), np.array([0.0, 2.0]))


def test_l1_logistic_zero_penalty_matches_logistic(rng):
    X = rng.standard_normal((150, 4))
    labels = (X @ [1.0, -1.0, 0.5, 0.0] + rng.standard_normal(150) > 0).astype(float)
    a = logistic_fit(X, labels)
    b = l1_logistic_fit(X, labels, 0.0)
    assert np.abs(a.coef - b.coef).max() < 1e-4
    assert abs(a.intercept[0] - b.intercept[0]) < 1e-4


def test_l1_logistic_huge_penalty_is_intercept_only(rng):
    X = rng.standard_normal((100, 5))
    labels = (rng.random(100) < 0.4).astype(float)
    w = l1_logistic_fit(X, labels, 100.0)
    assert np.all(w.coef == 0)
    assert expit(w.intercept[0]) == pytest.approx(labels.mean(), abs=1e-5)


def test_l1_logistic_kkt_and_support(rng):
    X = rng.standard_normal((300, 20))
    labels = (X[:, 3] - X[:, 11] > 0).astype(float)
    w = l1_logistic_fit(X, labels, 0.01)
    assert logistic_kkt(X, labels, w, 0.01) <= 1e-4
    assert {3, 11} <= set(np.flatnonzero(w.coef[:, 0]))


# ------------------------------------------------------------------- elastic net

def test_enet_no_penalty_is_ols(rng):
    X = rng.standard_normal((80, 6))
    y = X @ rng.standard_normal(6) + rng.standard_normal(80)
    assert np.abs(elasticnet_fit(X, y, 0, 0).coef - ols_fit(X, y).coef).max() < 1e-6


def test_enet_lambda_max_zeroes(rng):
    X = rng.standard_normal((50, 8))
    y = X[:, 0] + rng.standard_normal(50)
    lmax = elasticnet_lambda_max(X, y)
    assert np.all(elasticnet_fit(X, y, lmax, 0.1).coef == 0)
    assert np.any(elasticnet_fit(X, y, 0.9 * lmax, 0.0).coef != 0)


@given(st.floats(-3, 3), st.floats(0, 2))
def test_enet_univariate_soft_threshold(scale, lam):
    x = np.linspace(-1, 1, 21)
    x = (x - x.mean()) / np.sqrt(np.mean((x - x.mean()) ** 2))   # (1/n) x'x = 1
    y = scale * x + 0.3 * np.cos(7 * x)
    rho = float(x @ (y - y.mean()) / x.size)
    w = elasticnet_fit(x[:, None], y, lam, 0.0)
    assert w.coef[0, 0] == pytest.approx(np.sign(rho) * max(abs(rho) - lam, 0.0), abs=1e-9)


@given(st.integers(0, 2**31), st.floats(1e-3, 1.0), st.floats(0.0, 1.0))
def test_enet_kkt_and_monotone_sweeps(seed, lam1, lam2):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((40, 10))
    y = X[:, :3] @ [1.0, -2.0, 0.5] + rng.standard_normal(40)
    hist = []
    w = elasticnet_fit(X, y, lam1, lam2, history=hist)
    assert elasticnet_kkt(X, y, w, lam1, lam2) <= 1e-6
    assert np.all(np.diff(hist) <= 1e-12 * max(1.0, abs(hist[0])))
    assert hist[-1] == pytest.approx(elasticnet_objective(X, y, w, lam1, lam2), rel=1e-10)


@given(st.integers(0, 2**31), st.floats(0.0, 0.5))
def test_enet_path_l1_norm_shrinks(seed, lam2):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((60, 8))
    y = X @ rng.standard_normal(8) + rng.standard_normal(60)
    norms = [np.abs(elasticnet_fit(X, y, lam, lam2).coef).sum()
             for lam in np.logspace(-3, 1, 9)]
    assert np.all(np.diff(norms) <= 1e-7)


def test_enet_negative_penalty():
    with pytest.raises(ValueError):
        elasticnet_fit(np.ones((3, 1)), np.ones(3), -1.0, 0.0)


# --------------------------------------------------------------------------- SVM

def _sweep(obj, ws, bs):
    W, B = np.meshgrid(ws, bs, indexing="ij")
    return min(obj(w, b) for w, b in zip(W.ravel(), B.ravel()))


def test_svr_slope_and_sweep_oracle(rng):
    x = np.linspace(-1, 1, 30)
    y = 3 * x + 0.05 * rng.standard_normal(30)
    w = svr_fit(x[:, None], y, C=1.0, eps=0.1)
    assert 2.8 <= w.coef[0, 0] <= 3.2
    ours = svr_objective(x[:, None], y, w, 1.0, 0.1)
    obj = lambda a, b: svr_objective(x[:, None], y, WeightMatrix([[a]], [b]), 1.0, 0.1)
    best = _sweep(obj, np.linspace(2.5, 3.5, 201), np.linspace(-0.3, 0.3, 121))
    assert ours <= best + 1e-9


def test_svr_constant_target():
    x = np.linspace(0, 1, 20)[:, None]
    w = svr_fit(x, np.full(20, 4.0))
    assert abs(w.coef[0, 0]) < 1e-6
    assert abs(w.intercept[0] - 4.0) <= 0.1 + 1e-6


def test_svr_tube_contains_ols_residuals(rng):
    x = np.linspace(-1, 1, 25)
    y = 2 * x + 0.01 * rng.standard_normal(25)
    w = svr_fit(x[:, None], y, C=1.0, eps=0.1)
    r = y - w.predict(x[:, None])[:, 0]
    assert np.abs(r).max() <= 0.1 + 1e-6      # loss term is zero
    assert 0 < w.coef[0, 0] < ols_fit(x[:, None], y).coef[0, 0]


def test_svr_and_ols_agree_in_direction(rng):
    X = rng.standard_normal((60, 3))
    y = X @ [1.0, -2.0, 0.5]
    a = svr_fit(X, y, C=10.0, eps=0.01).coef[:, 0]
    b = ols_fit(X, y).coef[:, 0]
    assert a @ b / np.linalg.norm(a) / np.linalg.norm(b) >= 0.99


def test_svc_sweep_oracle(rng):
    x = rng.standard_normal(40)
    labels = (x + 0.5 * rng.standard_normal(40) > 0).astype(float)
    w = svc_fit(x[:, None], labels, C=1.0)
    ours = svc_objective(x[:, None], labels, w, 1.0)
    obj = lambda a, b: svc_objective(x[:, None], labels, WeightMatrix([[a]], [b]), 1.0)
    a0, b0 = w.coef[0, 0], w.intercept[0]
    best = _sweep(obj, a0 + np.linspace(-1, 1, 161), b0 + np.linspace(-1, 1, 161))
    assert ours <= best + 1e-9


# ---------------------------------------------------------------------------- CV

def test_cv_single_point_skips_search():
    calls = []
    res = grid_search_cv(lambda X, y, a: calls.append(a), None, np.ones((10, 1)), np.ones(10),
                         {"a": [0.5]})
    assert res.best == {"a": 0.5} and calls == []


def test_cv_pure_noise_prefers_strong_penalty(rng):
    X = rng.standard_normal((200, 10))
    y = rng.standard_normal(200)
    grid = {"lam1": [1e-3, 1e-2, 1e-1, 1.0, 10.0], "lam2": [0.0]}
    fit = lambda A, b, lam1, lam2: elasticnet_fit(A, b, lam1, lam2)
    res = grid_search_cv(fit, lambda m, A: m.predict(A), X, y, grid)
    assert res.best["lam1"] >= 0.1
    again = grid_search_cv(fit, lambda m, A: m.predict(A), X, y, grid)
    assert again.scores == res.scores


def test_cv_strong_signal_prefers_weak_penalty(rng):
    X = rng.standard_normal((200, 5))
    y = X @ [3.0, -2.0, 1.0, 0.5, 1.5] + 0.1 * rng.standard_normal(200)
    grid = {"lam1": [1e-3, 1e-1, 1.0, 10.0], "lam2": [0.0]}
    res = grid_search_cv(lambda A, b, lam1, lam2: elasticnet_fit(A, b, lam1, lam2),
                         lambda m, A: m.predict(A), X, y, grid)
    assert res.best["lam1"] == 1e-3


def test_cv_folds_are_contiguous_and_reported():
    seen = []
    dates = np.datetime64("2000-01-01") + np.arange(20)
    grid_search_cv(lambda X, y, a: ols_fit(X, y), lambda m, X: m.predict(X),
                   np.arange(20.0)[:, None], np.arange(20.0), {"a": [1, 2]}, folds=4,
                   dates=dates, on_fold=lambda tr, va: seen.append(va))
    assert len(seen) == 4
    assert all(np.all(np.diff(v).astype(int) == 1) for v in seen)
    with pytest.raises(ValueError):
        grid_search_cv(None, None, np.ones((3, 1)), np.ones(3), {"a": []})


def test_ebic_select_recovers_support(rng):
    X = rng.standard_normal((300, 30))
    y = X[:, [2, 7, 19]] @ [1.5, -1.0, 2.0] + 0.5 * rng.standard_normal(300)
    grid = {"lam1": list(np.logspace(-3, 0, 7)), "lam2": [1e-3]}
    fit = lambda A, b, lam1, lam2: elasticnet_fit(A, b, lam1, lam2)
    res = ebic_select(fit, lambda m: m.coef[:, 0] != 0, X, y, grid)
    w = fit(X, y, **res.best)
    assert set(np.flatnonzero(w.coef[:, 0])) == {2, 7, 19}


# --------------------------------------------------------------------------- ASD

def test_gate_examples():
    out, gate = combine_occurrence_amount(np.array([0.3, 0.7, 0.7]), np.array([5.0, 5.0, -1.0]))
    assert out.tolist() == [0.0, 5.0, 0.0]
    assert gate.tolist() == [False, True, True]


def _asd_data(rng, n=400):
    X = rng.standard_normal((n, 4))
    wet = X[:, 0] + 0.5 * rng.standard_normal(n) > 0
    amount = np.maximum(5 + 2 * X[:, 1] + rng.standard_normal(n), 1.0)
    Y = np.where(wet[:, None], amount[:, None] * [1.0, 1.5], 0.0)
    return X, Y


@pytest.mark.parametrize("clf,reg,pca", [("logistic", "ols", 0.98), ("svc", "svr", 0.98),
                                         ("l1-logistic", "elasticnet", None)])
def test_asd_fit_predict(rng, clf, reg, pca):
    X, Y = _asd_data(rng)
    model = asd_fit(X, Y, clf, reg, pca_frac=pca, season="JJA")
    pred, gate = asd_predict(model, X, return_gate=True)
    assert pred.shape == Y.shape and np.all(pred >= 0)
    # dry predictions are exactly the sub-threshold classifier outputs
    assert np.array_equal(pred == 0, ~gate | (pred == 0))
    assert np.mean(pred[~gate] == 0) == 1.0
    back = AsdModel.from_dict(model.to_dict())
    assert np.array_equal(asd_predict(back, X), pred)


def test_asd_regressor_sees_wet_days_only(rng):
    X, Y = _asd_data(rng)
    model = asd_fit(X, Y, "logistic", "ols")
    Z = standardize_apply(X, *standardize_fit(X))
    wet = Y[:, 0] >= 1.0
    ref = ols_fit(Z[wet], Y[wet, 0])
    assert np.allclose(model.reg.column(0).coef, ref.coef, atol=1e-10)


def test_asd_refuses_few_wet_days(rng):
    X = rng.standard_normal((100, 2))
    Y = np.zeros((100, 1))
    Y[:9] = 5.0
    with pytest.raises(FitError, match="wet days"):
        asd_fit(X, Y, "logistic", "ols")
    with pytest.raises(ValueError):
        asd_fit(X, Y, "tree", "ols")


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        HyperParams(lam1=-1)
    with pytest.raises(ValueError):
        HyperParams(C=0)
    assert with_hyper(HyperParams(), lam1=0.5).lam1 == 0.5
