"""ASD (occurrence x amount) regressions and classifiers.

Regressors: ordinary least squares, elastic net (coordinate descent) and
linear epsilon-SVR. Classifiers: ridge-stabilised logistic regression,
L1 logistic regression (accelerated proximal gradient) and a linear
hinge-loss SVC. :func:`asd_fit` wires one classifier and one regressor into
the two-stage rainy-day model.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, log_expit

from . import _kernels
from .preprocess import PcaBasis, pca_fit, pca_transform, standardize_apply, standardize_fit

log = logging.getLogger(__name__)

LOGISTIC_RIDGE = 1e-6
WET_CUTOFF = 1.0
MIN_WET_DAYS = 10


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class WeightMatrix:
    """Coefficients (d x K) and intercepts (K,)."""

    coef: np.ndarray
    intercept: np.ndarray

    def __post_init__(self):
        coef = np.atleast_2d(np.asarray(self.coef, dtype=np.float64))
        if coef.shape[0] == 1 and np.ndim(self.coef) == 1:
            coef = coef.T
        intercept = np.atleast_1d(np.asarray(self.intercept, dtype=np.float64))
        if intercept.shape != (coef.shape[1],):
            raise ValueError("one intercept per column is required")
        if not (np.all(np.isfinite(coef)) and np.all(np.isfinite(intercept))):
            raise ValueError("weights must be finite")
        object.__setattr__(self, "coef", coef)
        object.__setattr__(self, "intercept", intercept)

    @property
    def d(self) -> int:
        return self.coef.shape[0]

    @property
    def k(self) -> int:
        return self.coef.shape[1]

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.d:
            raise ValueError(f"expected {self.d} features, got {X.shape[-1]}")
        return X @ self.coef + self.intercept

    def column(self, k: int) -> "WeightMatrix":
        return WeightMatrix(self.coef[:, [k]], self.intercept[[k]])

    @classmethod
    def stack(cls, cols: Sequence["WeightMatrix"]) -> "WeightMatrix":
        return cls(np.hstack([c.coef for c in cols]), np.concatenate([c.intercept for c in cols]))

    def to_dict(self) -> dict:
        return {"coef": self.coef.tolist(), "intercept": self.intercept.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "WeightMatrix":
        return cls(np.asarray(d["coef"], dtype=np.float64).reshape(-1, len(d["intercept"])),
                   d["intercept"])


def _center(X, y, fit_intercept):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if fit_intercept:
        xm, ym = X.mean(axis=0), y.mean(axis=0)
    else:
        xm, ym = np.zeros(X.shape[1]), np.zeros(y.shape[1:]) if y.ndim > 1 else 0.0
    return X - xm, y - ym, xm, ym


# ------------------------------------------------------------------------- OLS

def ols_fit(X, y, fit_intercept: bool = True) -> WeightMatrix:
    """Least squares via an SVD-based solve.

    Rank-deficient designs get the minimum-norm solution and a warning.
    """
    Xc, yc, xm, ym = _center(X, y, fit_intercept)
    coef, _, rank, _ = np.linalg.lstsq(Xc, yc, rcond=None)
    if rank < Xc.shape[1]:
        warnings.warn(f"design has rank {rank} < {Xc.shape[1]}; "
                      "returning the minimum-norm solution", RuntimeWarning, stacklevel=2)
    coef = coef.reshape(Xc.shape[1], -1)
    return WeightMatrix(coef, np.atleast_1d(ym - xm @ coef))


# -------------------------------------------------------------------- logistic

def _check_labels(labels):
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0/1")
    if labels.min() == labels.max():
        raise FitError("logistic fit needs both classes present")
    return labels


def logistic_objective(X, labels, coef, intercept, ridge=LOGISTIC_RIDGE, lam1=0.0) -> float:
    z = X @ coef + intercept
    nll = -np.mean(labels * log_expit(z) + (1 - labels) * log_expit(-z))
    return float(nll + 0.5 * ridge * coef @ coef + lam1 * np.abs(coef).sum())


def logistic_fit(X, labels, ridge: float = LOGISTIC_RIDGE, tol: float = 1e-6,
                 max_iter: int = 200) -> WeightMatrix:
    """Logistic regression by damped Newton steps.

    Minimises mean negative log-likelihood + ridge/2 ||w||^2 (intercept
    unpenalised); stops when the gradient infinity-norm drops below ``tol``.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = _check_labels(labels)
    n, d = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    theta = np.zeros(d + 1)
    prior = labels.mean()
    theta[-1] = np.log(prior / (1 - prior))
    pen = np.full(d + 1, ridge)
    pen[-1] = 0.0

    def obj(th):
        return logistic_objective(X, labels, th[:-1], th[-1], ridge)

    f = obj(theta)
    for it in range(max_iter):
        p = expit(A @ theta)
        grad = A.T @ (p - labels) / n + pen * theta
        if np.max(np.abs(grad)) < tol:
            break
        H = (A * (p * (1 - p))[:, None]).T @ A / n + np.diag(pen)
        H[np.diag_indices_from(H)] += 1e-12
        step = np.linalg.solve(H, grad)
        t = 1.0
        while True:
            cand = theta - t * step
            fc = obj(cand)
            if fc <= f - 1e-4 * t * grad @ step or t < 1e-10:
                break
            t *= 0.5
        theta, f = cand, fc
    else:
        log.warning("logistic_fit did not reach tol=%g in %d iterations", tol, max_iter)
    return WeightMatrix(theta[:-1, None], theta[-1:])


def predict_proba(X, weights: WeightMatrix) -> np.ndarray:
    return expit(weights.predict(X))


def l1_logistic_fit(X, labels, lam1: float, ridge: float = LOGISTIC_RIDGE,
                    tol: float = 1e-6, max_iter: int = 20000) -> WeightMatrix:
    """L1-penalised logistic regression by FISTA with adaptive restart.

    Objective: mean NLL + lam1 ||w||_1 + ridge/2 ||w||^2, intercept free.
    Converged when the proximal-gradient mapping has infinity-norm < ``tol``.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = _check_labels(labels)
    n, d = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    L = np.linalg.norm(A, 2) ** 2 / (4 * n) + ridge
    step = 1.0 / L
    theta = np.zeros(d + 1)
    prior = labels.mean()
    theta[-1] = np.log(prior / (1 - prior))
    pen = np.full(d + 1, ridge)
    pen[-1] = 0.0
    thr = np.full(d + 1, lam1 * step)
    thr[-1] = 0.0

    def smooth_grad(th):
        return A.T @ (expit(A @ th) - labels) / n + pen * th

    def prox(v):
        return np.sign(v) * np.maximum(np.abs(v) - thr, 0.0)

    y_k, t_k = theta.copy(), 1.0
    f_prev = np.inf
    for it in range(max_iter):
        g = smooth_grad(y_k)
        new = prox(y_k - step * g)
        mapping = (y_k - new) / step
        f_new = logistic_objective(X, labels, new[:-1], new[-1], ridge, lam1)
        if f_new > f_prev:
            # restart momentum and take a plain proximal step from theta
            y_k, t_k = theta.copy(), 1.0
            g = smooth_grad(y_k)
            new = prox(y_k - step * g)
            mapping = (y_k - new) / step
            f_new = logistic_objective(X, labels, new[:-1], new[-1], ridge, lam1)
        if np.max(np.abs(mapping)) < tol:
            theta = new
            break
        t_next = 0.5 * (1 + np.sqrt(1 + 4 * t_k * t_k))
        y_k = new + (t_k - 1) / t_next * (new - theta)
        theta, t_k, f_prev = new, t_next, f_new
    else:
        log.warning("l1_logistic_fit did not reach tol=%g in %d iterations", tol, max_iter)
    return WeightMatrix(theta[:-1, None], theta[-1:])


def logistic_kkt(X, labels, weights: WeightMatrix, lam1: float, ridge=LOGISTIC_RIDGE) -> float:
    """Largest violation of the L1-logistic optimality conditions."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).ravel()
    w = weights.coef[:, 0]
    p = expit(X @ w + weights.intercept[0])
    g = X.T @ (p - labels) / X.shape[0] + ridge * w
    viol_b = abs(np.mean(p - labels))
    zero = w == 0
    viol_zero = np.maximum(np.abs(g[zero]) - lam1, 0.0)
    viol_nz = np.abs(g[~zero] + lam1 * np.sign(w[~zero]))
    return float(max(viol_b, viol_zero.max(initial=0.0), viol_nz.max(initial=0.0)))


# ----------------------------------------------------------------- elastic net

def elasticnet_objective(X, y, weights: WeightMatrix, lam1: float, lam2: float) -> float:
    """(1/2n)||y - Xb - b0||^2 + lam1 ||b||_1 + lam2 ||b||_2^2."""
    X = np.asarray(X, dtype=np.float64)
    r = np.asarray(y, dtype=np.float64).ravel() - weights.predict(X)[:, 0]
    b = weights.coef[:, 0]
    return float(0.5 * r @ r / X.shape[0] + lam1 * np.abs(b).sum() + lam2 * b @ b)


def elasticnet_fit(X, y, lam1: float, lam2: float, tol: float = 1e-8,
                   max_sweeps: int = 100000, fit_intercept: bool = True,
                   warm_start=None, history: list | None = None) -> WeightMatrix:
    """Elastic net by cyclic coordinate descent.

    The squared loss is scaled by 1/(2n) so the penalties are per-sample.
    Stops when the largest coefficient change in a sweep is below ``tol``.
    Passing a list as ``history`` collects the objective after every sweep.
    """
    if lam1 < 0 or lam2 < 0:
        raise ValueError("penalties must be non-negative")
    Xc, yc, xm, ym = _center(X, np.asarray(y, dtype=np.float64).ravel(), fit_intercept)
    n, d = Xc.shape
    beta = np.zeros(d) if warm_start is None else np.array(warm_start, dtype=np.float64)
    if d <= max(n, 2000) or history is not None:
        G = Xc.T @ Xc / n
        c = Xc.T @ yc / n
        hist = np.empty(max_sweeps if history is not None else 0)
        sweeps = _kernels.enet_cd_gram(G, c, float(yc @ yc / n), beta, float(lam1),
                                       float(lam2), float(tol), int(max_sweeps), hist)
        if history is not None:
            history.extend(hist[:sweeps].tolist())
    else:
        r = yc - Xc @ beta
        sweeps = _kernels.enet_cd_resid(np.ascontiguousarray(Xc), r, (Xc ** 2).sum(axis=0),
                                        beta, float(lam1), float(lam2), float(tol), int(max_sweeps))
    if sweeps >= max_sweeps:
        log.warning("elasticnet_fit hit max_sweeps=%d", max_sweeps)
    return WeightMatrix(beta[:, None], np.atleast_1d(ym - xm @ beta))


def elasticnet_kkt(X, y, weights: WeightMatrix, lam1: float, lam2: float) -> float:
    """Largest violation of the elastic-net optimality conditions.

    Zero coefficients need |x_j'r|/n <= lam1; active ones need
    x_j'r/n - 2 lam2 b_j = lam1 sign(b_j).
    """
    X = np.asarray(X, dtype=np.float64)
    r = np.asarray(y, dtype=np.float64).ravel() - weights.predict(X)[:, 0]
    b = weights.coef[:, 0]
    g = X.T @ r / X.shape[0] - 2 * lam2 * b
    zero = b == 0
    v0 = np.maximum(np.abs(g[zero]) - lam1, 0.0)
    v1 = np.abs(g[~zero] - lam1 * np.sign(b[~zero]))
    return float(max(v0.max(initial=0.0), v1.max(initial=0.0)))


def elasticnet_lambda_max(X, y) -> float:
    """Smallest lam1 giving an all-zero solution (intercept fitted)."""
    Xc, yc, _, _ = _center(X, np.asarray(y, dtype=np.float64).ravel(), True)
    return float(np.max(np.abs(Xc.T @ yc)) / Xc.shape[0])


# ------------------------------------------------------------------------- SVM

def svr_objective(X, y, weights: WeightMatrix, C=1.0, eps=0.1) -> float:
    r = np.asarray(y, dtype=np.float64).ravel() - weights.predict(X)[:, 0]
    w = weights.coef[:, 0]
    return float(0.5 * w @ w + C * np.maximum(np.abs(r) - eps, 0.0).sum())


def _linear_svm_ip(G, h, C, tol=1e-10, max_iter=200):
    """Primal-dual interior point for
    min 0.5||w||^2 + C sum(xi)  s.t.  G [w; b] - xi <= h,  xi >= 0.

    Each Newton system is reduced to (d+1) x (d+1) by eliminating the slack
    and multiplier blocks, so the cost per iteration is O(m d^2).
    """
    m, p = G.shape
    P = np.eye(p)
    P[-1, -1] = 0.0
    theta = np.zeros(p)
    xi = np.maximum(1.0, 1.0 - h)
    sig = h - G @ theta + xi
    alpha = np.full(m, C / 2)
    nu = np.full(m, C / 2)
    scale = 1.0 + np.abs(h).max()
    for it in range(max_iter):
        r1 = P @ theta + G.T @ alpha
        r2 = C - alpha - nu
        r3 = G @ theta - xi + sig - h
        mu = (alpha @ sig + nu @ xi) / (2 * m)
        if (np.abs(r1).max() < tol * scale and np.abs(r2).max() < tol * max(C, 1)
                and np.abs(r3).max() < tol * scale and mu < tol * 1e-2):
            break
        tau_mu = 0.1 * mu
        r4 = alpha * sig - tau_mu
        r5 = nu * xi - tau_mu
        D = xi / nu + sig / alpha
        q = r3 + (xi * r2 + r5) / nu - r4 / alpha
        M = P + (G / D[:, None]).T @ G
        M[np.diag_indices_from(M)] += 1e-14
        d_theta = np.linalg.solve(M, -r1 - G.T @ (q / D))
        d_alpha = (G @ d_theta + q) / D
        d_sig = (-r4 - sig * d_alpha) / alpha
        d_xi = (xi * (d_alpha - r2) - r5) / nu
        d_nu = (-r5 - nu * d_xi) / xi
        step = 1.0
        for v, dv in ((alpha, d_alpha), (sig, d_sig), (xi, d_xi), (nu, d_nu)):
            neg = dv < 0
            if neg.any():
                step = min(step, 0.99 * np.min(-v[neg] / dv[neg]))
        theta += step * d_theta
        alpha += step * d_alpha
        sig += step * d_sig
        xi += step * d_xi
        nu += step * d_nu
    else:
        log.warning("linear SVM interior point hit max_iter=%d", max_iter)
    return theta


def svr_fit(X, y, C: float = 1.0, eps: float = 0.1, tol: float = 1e-10,
            max_iter: int = 200) -> WeightMatrix:
    """Linear epsilon-insensitive SVR,
    min 0.5||w||^2 + C sum max(0, |y - Xw - b| - eps),
    solved as a quadratic program by a primal-dual interior-point method.
    The offset b is unregularised.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if C <= 0 or eps < 0:
        raise ValueError("need C > 0 and eps >= 0")
    A = np.hstack([X, np.ones((X.shape[0], 1))])
    # two one-sided tube constraints per sample, each with its own slack
    theta = _linear_svm_ip(np.vstack([-A, A]), np.concatenate([eps - y, eps + y]), C,
                           tol=tol, max_iter=max_iter)
    return WeightMatrix(theta[:-1, None], theta[-1:])


def svc_objective(X, labels, weights: WeightMatrix, C=1.0) -> float:
    s = 2 * np.asarray(labels, dtype=np.float64).ravel() - 1
    w = weights.coef[:, 0]
    return float(0.5 * w @ w + C * np.maximum(0.0, 1 - s * weights.predict(X)[:, 0]).sum())


def svc_fit(X, labels, C: float = 1.0, tol: float = 1e-10, max_iter: int = 200) -> WeightMatrix:
    """Linear hinge-loss SVM with an unregularised offset, solved by the same
    interior-point routine as :func:`svr_fit`.

    Probabilities are taken as sigmoid(margin) so the 0.5 gate coincides
    with the sign of the decision function.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = _check_labels(labels)
    s = 2 * labels - 1
    A = s[:, None] * np.hstack([X, np.ones((X.shape[0], 1))])
    theta = _linear_svm_ip(-A, -np.ones(X.shape[0]), C, tol=tol, max_iter=max_iter)
    return WeightMatrix(theta[:-1, None], theta[-1:])


# -------------------------------------------------------------------------- CV

@dataclass
class CvResult:
    best: dict
    scores: list  # (params, mean validation loss) in grid order
    errors: list | None = None  # standard error of each mean


def contiguous_folds(n: int, folds: int):
    """Yield (train_idx, valid_idx) for contiguous validation blocks."""
    if folds < 2 or folds > n:
        raise ValueError(f"need 2 <= folds <= n, got folds={folds}, n={n}")
    for block in np.array_split(np.arange(n), folds):
        train = np.setdiff1d(np.arange(n), block, assume_unique=True)
        yield train, block


def _rmse(pred, y):
    return float(np.sqrt(np.mean((np.asarray(pred) - y) ** 2)))


def _logloss(prob, y):
    p = np.clip(np.asarray(prob, dtype=np.float64), 1e-15, 1 - 1e-15)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def _grid_points(grid: dict):
    keys = list(grid)
    if not keys or any(len(grid[k]) == 0 for k in keys):
        raise ValueError("empty parameter grid")
    mesh = np.meshgrid(*[np.arange(len(grid[k])) for k in keys], indexing="ij")
    for idx in zip(*[m.ravel() for m in mesh]):
        yield {k: grid[k][i] for k, i in zip(keys, idx)}


def grid_search_cv(fit: Callable, predict: Callable, X, y, grid: dict, folds: int = 5,
                   loss: str = "rmse", strength: Callable | None = None,
                   dates=None, on_fold: Callable | None = None, rule: str = "min") -> CvResult:
    """Exhaustive grid search with contiguous-block cross-validation.

    ``fit(X, y, **params)`` returns a model, ``predict(model, X)`` its
    predictions (probabilities when ``loss='logloss'``). Ties on mean
    validation loss go to the largest ``strength(params)`` (default: the sum
    of the parameter values, i.e. the strongest regularisation).
    ``on_fold(train_dates, valid_dates)`` is called once per fold when
    ``dates`` are supplied.

    ``rule="1se"`` instead takes the strongest point whose mean loss is
    within one standard error of the minimum, which favours sparser models
    when the aim is support recovery rather than pure prediction.
    """
    if rule not in ("min", "1se"):
        raise ValueError(f"unknown selection rule {rule!r}")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    points = list(_grid_points(grid))
    strength = strength or (lambda p: float(sum(p.values())))
    if len(points) == 1:
        return CvResult(points[0], [(points[0], float("nan"))])
    score_fn = {"rmse": _rmse, "logloss": _logloss}[loss]
    splits = list(contiguous_folds(X.shape[0], folds))
    if dates is not None and on_fold is not None:
        for tr, va in splits:
            on_fold(np.asarray(dates)[tr], np.asarray(dates)[va])
    scores, errors = [], []
    for params in points:
        fold_scores = []
        for tr, va in splits:
            try:
                model = fit(X[tr], y[tr], **params)
                # (n, 1) predictions against a (n,) target would broadcast
                pred = np.reshape(predict(model, X[va]), y[va].shape)
                fold_scores.append(score_fn(pred, y[va]))
            except FitError:
                fold_scores.append(np.inf)
        scores.append((params, float(np.mean(fold_scores))))
        errors.append(float(np.std(fold_scores, ddof=1) / np.sqrt(len(fold_scores))))
    i_min = int(np.argmin([s for _, s in scores]))
    best_loss = scores[i_min][1]
    slack = 1e-12 * max(1.0, abs(best_loss))
    if rule == "1se" and np.isfinite(errors[i_min]):
        slack += errors[i_min]
    tied = [p for p, s in scores if s <= best_loss + slack]
    best = max(tied, key=strength)
    return CvResult(dict(best), scores, errors)


def refit_rss(X, y, support) -> float:
    """Residual sum of squares of an unpenalised least-squares refit (with
    intercept) on the columns in ``support``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    A = np.column_stack([np.ones(X.shape[0]), X[:, support]])
    r = y - A @ np.linalg.lstsq(A, y, rcond=None)[0]
    return float(r @ r)


def ebic(rss: float, n: int, df: int, p: int, gamma: float = 1.0) -> float:
    """Extended BIC: n log(rss/n) + df log n + 2 gamma df log p."""
    return n * np.log(max(rss, 1e-300) / n) + df * np.log(n) + 2 * gamma * df * np.log(p)


def ebic_select(fit: Callable, support: Callable, X, y, grid: dict, gamma: float = 1.0,
                strength: Callable | None = None) -> CvResult:
    """Grid search that scores each fitted model's support by the extended BIC
    of its least-squares refit.

    Aimed at support recovery: refitting removes the shrinkage bias that makes
    validation-loss selection favour weak penalties and spurious small
    coefficients. Points with equal score share a support, so ties go to the
    weakest penalty (least shrinkage). ``y`` may be a matrix, in which case
    ``support(model)`` returns a (d, K) mask and scores add over columns.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(y, dtype=np.float64)
    Y2 = Y.reshape(Y.shape[0], -1)
    n, p = X.shape
    strength = strength or (lambda q: float(sum(q.values())))
    points = list(_grid_points(grid))
    scores = []
    for params in points:
        model = fit(X, Y, **params)
        mask = np.asarray(support(model), dtype=bool).reshape(p, -1)
        total = 0.0
        for k in range(Y2.shape[1]):
            cols = np.flatnonzero(mask[:, k])
            total += ebic(refit_rss(X, Y2[:, k], cols), n, cols.size, p, gamma)
        scores.append((params, float(total)))
    best_score = min(s for _, s in scores)
    tied = [q for q, s in scores if s <= best_score + 1e-9 * max(1.0, abs(best_score))]
    best = min(tied, key=strength)
    return CvResult(dict(best), scores)


# ------------------------------------------------------------------------- ASD

CLASSIFIERS = ("logistic", "l1-logistic", "svc")
REGRESSORS = ("ols", "elasticnet", "svr")


@dataclass(frozen=True)
class HyperParams:
    lam1: float = 0.01
    lam2: float = 0.01
    C: float = 1.0
    eps: float = 0.1
    lam: float = 1.0           # MSSL precision penalty
    gamma: float = 1.0         # MSSL weight penalty
    clf_lam1: float = 0.01     # L1-logistic penalty
    threshold: float = 0.5
    wet_cutoff: float = WET_CUTOFF

    def __post_init__(self):
        for name in ("lam1", "lam2", "eps", "lam", "gamma", "clf_lam1"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.C <= 0:
            raise ValueError("C must be > 0")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class AsdModel:
    """Occurrence classifier x amount regressor on a shared feature pipeline."""

    classifier: str
    regressor: str
    means: np.ndarray
    scales: np.ndarray
    clf: WeightMatrix
    reg: WeightMatrix
    hyper: list = field(default_factory=list)
    pca: PcaBasis | None = None
    season: str = "ALL"

    def features(self, X) -> np.ndarray:
        Z = standardize_apply(X, self.means, self.scales)
        if self.pca is not None:
            Z = Z @ self.pca.components
        return Z

    def to_dict(self) -> dict:
        return {"classifier": self.classifier, "regressor": self.regressor,
                "means": self.means.tolist(), "scales": self.scales.tolist(),
                "clf": self.clf.to_dict(), "reg": self.reg.to_dict(),
                "hyper": [h.to_dict() for h in self.hyper],
                "pca": None if self.pca is None else self.pca.to_dict(),
                "season": self.season}

    @classmethod
    def from_dict(cls, d: dict) -> "AsdModel":
        return cls(d["classifier"], d["regressor"], np.asarray(d["means"]),
                   np.asarray(d["scales"]), WeightMatrix.from_dict(d["clf"]),
                   WeightMatrix.from_dict(d["reg"]), [HyperParams(**h) for h in d["hyper"]],
                   None if d["pca"] is None else PcaBasis.from_dict(d["pca"]), d["season"])


def fit_classifier(kind: str, Z, labels, hp: HyperParams) -> WeightMatrix:
    if kind == "logistic":
        return logistic_fit(Z, labels)
    if kind == "l1-logistic":
        return l1_logistic_fit(Z, labels, hp.clf_lam1)
    if kind == "svc":
        return svc_fit(Z, labels, C=hp.C)
    raise ValueError(f"unknown classifier {kind!r}")


def fit_regressor(kind: str, Z, y, hp: HyperParams) -> WeightMatrix:
    if kind == "ols":
        return ols_fit(Z, y)
    if kind == "elasticnet":
        return elasticnet_fit(Z, y, hp.lam1, hp.lam2)
    if kind == "svr":
        return svr_fit(Z, y, C=hp.C, eps=hp.eps)
    raise ValueError(f"unknown regressor {kind!r}")


def asd_fit(X, Y, classifier: str, regressor: str, hyper=None, pca_frac: float | None = None,
            season: str = "ALL") -> AsdModel:
    """Fit one occurrence/amount pair per target column of ``Y``.

    Wet days are ``Y >= wet_cutoff``; the regressor sees observed wet days
    only. ``hyper`` is one :class:`HyperParams` or one per column.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    K = Y.shape[1]
    if classifier not in CLASSIFIERS:
        raise ValueError(f"unknown classifier {classifier!r}")
    if regressor not in REGRESSORS:
        raise ValueError(f"unknown regressor {regressor!r}")
    if hyper is None:
        hyper = HyperParams()
    hypers = list(hyper) if isinstance(hyper, (list, tuple)) else [hyper] * K
    if len(hypers) != K:
        raise ValueError("need one HyperParams per target column")
    means, scales = standardize_fit(X)
    Z = standardize_apply(X, means, scales)
    basis = None
    if pca_frac is not None:
        basis = pca_fit(Z, pca_frac, scale=False)
        Z = pca_transform(Z, basis)
    clfs, regs = [], []
    for k in range(K):
        hp = hypers[k]
        wet = Y[:, k] >= hp.wet_cutoff
        if wet.sum() < MIN_WET_DAYS:
            raise FitError(f"target {k}: only {int(wet.sum())} wet days (< {MIN_WET_DAYS})")
        clfs.append(fit_classifier(classifier, Z, wet.astype(float), hp))
        regs.append(fit_regressor(regressor, Z[wet], Y[wet, k], hp))
    return AsdModel(classifier, regressor, means, scales, WeightMatrix.stack(clfs),
                    WeightMatrix.stack(regs), hypers, basis, season)


def combine_occurrence_amount(prob, amount, threshold: float = 0.5):
    """Rainy-day gate: zero where P(rain) < threshold, else the amount floored at 0."""
    prob = np.asarray(prob, dtype=np.float64)
    gate = prob >= threshold
    return np.where(gate, np.maximum(amount, 0.0), 0.0), gate


def asd_predict(model: AsdModel, X, return_gate: bool = False):
    Z = model.features(X)
    prob = expit(model.clf.predict(Z))
    amount = model.reg.predict(Z)
    thr = np.array([h.threshold for h in model.hyper]) if model.hyper else 0.5
    out, gate = combine_occurrence_amount(prob, amount, thr)
    return (out, gate) if return_gate else out


def with_hyper(hp: HyperParams, **changes) -> HyperParams:
    return replace(hp, **changes)
