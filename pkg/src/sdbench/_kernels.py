"""Compiled inner loops for coordinate-descent solvers."""
import numpy as np
from numba import njit


@njit(cache=True)
def soft(x, t):
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


@njit(cache=True)
def enet_cd_gram(G, c, yy, beta, lam1, lam2, tol, max_sweeps, history):
    """Cyclic coordinate descent on
    0.5*yy - beta'c + 0.5*beta'G beta + lam1*|beta|_1 + lam2*|beta|_2^2.

    ``G`` and ``c`` are X'X/n and X'y/n of centred data. ``history`` (length
    max_sweeps, or 0 to skip) receives the objective after each sweep.
    Returns the number of sweeps run.
    """
    d = G.shape[0]
    grad = c - G @ beta
    record = history.shape[0] > 0
    for sweep in range(max_sweeps):
        max_delta = 0.0
        for j in range(d):
            denom = G[j, j] + 2.0 * lam2
            if denom <= 0.0:
                continue
            old = beta[j]
            new = soft(grad[j] + G[j, j] * old, lam1) / denom
            delta = new - old
            if delta != 0.0:
                for k in range(d):
                    grad[k] -= G[k, j] * delta
                beta[j] = new
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        if record:
            obj = 0.5 * yy
            l1 = 0.0
            l2 = 0.0
            for j in range(d):
                # grad = c - G beta  =>  beta'G beta = beta'c - beta'grad
                obj += -beta[j] * c[j] + 0.5 * (beta[j] * c[j] - beta[j] * grad[j])
                l1 += abs(beta[j])
                l2 += beta[j] * beta[j]
            history[sweep] = obj + lam1 * l1 + lam2 * l2
        if max_delta < tol:
            return sweep + 1
    return max_sweeps


@njit(cache=True)
def enet_cd_resid(X, r, colsq, beta, lam1, lam2, tol, max_sweeps):
    """Residual-updating variant for d >> n; ``r`` is y - X beta (centred)."""
    n, d = X.shape
    for sweep in range(max_sweeps):
        max_delta = 0.0
        for j in range(d):
            denom = colsq[j] / n + 2.0 * lam2
            if denom <= 0.0:
                continue
            old = beta[j]
            rho = 0.0
            for i in range(n):
                rho += X[i, j] * r[i]
            rho = rho / n + colsq[j] / n * old
            new = soft(rho, lam1) / denom
            delta = new - old
            if delta != 0.0:
                for i in range(n):
                    r[i] -= X[i, j] * delta
                beta[j] = new
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        if max_delta < tol:
            return sweep + 1
    return max_sweeps
