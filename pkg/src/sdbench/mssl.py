"""Multi-task sparse structure learning.

Jointly estimates task weights W (d x K) and a sparse task precision matrix
Omega (K x K) by alternating minimisation of

    L(XW, Y) - (K/2) log|Omega| + Tr(W Omega W') + lam ||Omega||_1 + gamma ||W||_1

where L is half the squared error summed over tasks (or the summed logistic
loss for binary targets). Both blocks are solved with ADMM: the W-step splits
W = Z and solves the coupled quadratic through eigendecompositions of X'X and
Omega; the Omega-step splits Omega = Phi and has a per-eigenvalue closed form.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .linear import WeightMatrix

log = logging.getLogger(__name__)

# an outer step may raise the objective by at most this much (rounding)
ACCEPT_SLACK = 1e-9


class MsslError(ValueError):
    pass


@dataclass(frozen=True)
class SolverSettings:
    rho: float = 1.0
    abs_tol: float = 1e-8
    rel_tol: float = 1e-8
    max_admm: int = 1000
    outer_tol: float = 1e-5
    max_outer: int = 50
    adapt_rho: bool = True
    max_prox: int = 2000

    def __post_init__(self):
        for name in ("rho", "abs_tol", "rel_tol", "max_admm", "outer_tol", "max_outer", "max_prox"):
            if not getattr(self, name) > 0:
                raise MsslError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepInfo:
    iterations: int
    converged: bool
    rho: float
    primal: float
    dual: float


def soft_threshold(A, t):
    return np.sign(A) * np.maximum(np.abs(A) - t, 0.0)


def _check_pd(omega, name="Omega"):
    omega = np.asarray(omega, dtype=np.float64)
    if omega.ndim != 2 or omega.shape[0] != omega.shape[1]:
        raise MsslError(f"{name} must be square")
    if not np.allclose(omega, omega.T, atol=1e-10 * max(1.0, np.abs(omega).max())):
        raise MsslError(f"{name} is not symmetric")
    evals = np.linalg.eigvalsh(omega)
    if evals[0] <= 0:
        raise MsslError(f"{name} is not positive definite (min eigenvalue {evals[0]:.3g})")
    return evals


def logistic_loss(X, Y, W, b):
    """Sum over tasks and samples of log(1 + exp(-s m)), s = 2y - 1."""
    M = X @ W + b
    S = 2.0 * Y - 1.0
    return float(np.logaddexp(0.0, -S * M).sum())


def mssl_objective(X, Y, W, omega, lam: float, gamma: float, loss: str = "squared",
                   intercept=None) -> float:
    """Alternating-minimisation objective; ``||Omega||_1`` sums every entry.

    ``intercept`` (length K) only enters the logistic loss; the squared loss
    expects centred data.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    K = Y.shape[1]
    _check_pd(omega)
    sign, logdet = np.linalg.slogdet(omega)
    if loss == "squared":
        R = X @ W - Y
        fit = 0.5 * float(np.sum(R * R))
    elif loss == "logistic":
        b = np.zeros(K) if intercept is None else np.asarray(intercept, dtype=np.float64)
        fit = logistic_loss(X, Y, W, b)
    else:
        raise MsslError(f"unknown loss {loss!r}")
    return (fit - 0.5 * K * logdet + float(np.trace(W @ omega @ W.T))
            + lam * float(np.abs(omega).sum()) + gamma * float(np.abs(W).sum()))


# ---------------------------------------------------------------------- W-step

@dataclass
class _WState:
    Z: np.ndarray
    U: np.ndarray
    rho: float


def _residual_ok(r, s, x_norm, z_norm, u_norm, size, st: SolverSettings, step=0.0):
    """Primal/dual residual test, plus a rho-free test on the split iterate's
    last step. The dual residual scales with rho, so after rho has been
    shrunk it can pass while the iterate is still moving."""
    eps_pri = np.sqrt(size) * st.abs_tol + st.rel_tol * max(x_norm, z_norm)
    eps_dual = np.sqrt(size) * st.abs_tol + st.rel_tol * u_norm
    return r <= eps_pri and s <= eps_dual and step <= eps_pri


def _balance(rho, r, s, U):
    if r > 10 * s:
        return rho * 2, U / 2
    if s > 10 * r:
        return rho / 2, U * 2
    return rho, U


def w_step(X, Y, omega, gamma: float, settings: SolverSettings | None = None,
           state: _WState | None = None, gram=None):
    """Minimise 0.5||XW - Y||^2 + Tr(W Omega W') + gamma ||W||_1 over W.

    ADMM on W = Z. The W-update solves (X'X + rho I) W + 2 W Omega = R in
    the joint eigenbasis of X'X and Omega; Z is the soft-threshold of W + U
    at gamma/rho. Returns (Z, info, state); Z carries exact zeros.
    ``gram`` may pass a precomputed (eigvals, eigvecs, X'Y) triple.
    """
    st = settings or SolverSettings()
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    d, K = X.shape[1], Y.shape[1]
    if gram is None:
        a, P = np.linalg.eigh(X.T @ X)
        XtY = X.T @ Y
    else:
        a, P, XtY = gram
    o, Q = np.linalg.eigh(omega)
    if o[0] <= 0:
        raise MsslError("Omega must be positive definite")
    if state is None:
        # rho is relative to the average curvature of the quadratic term
        scale = max(float(a.mean()) + 2.0 * float(o.mean()), 1e-12)
        state = _WState(np.zeros((d, K)), np.zeros((d, K)), st.rho * scale)
    Z, U, rho = state.Z.copy(), state.U.copy(), state.rho
    B = P.T @ XtY @ Q
    W = Z
    converged = False
    r = s = np.inf
    for it in range(1, st.max_admm + 1):
        rhs = B + rho * (P.T @ (Z - U) @ Q)
        W = P @ (rhs / (a[:, None] + rho + 2.0 * o[None, :])) @ Q.T
        Z_old = Z
        Z = soft_threshold(W + U, gamma / rho)
        U = U + W - Z
        r = float(np.linalg.norm(W - Z))
        s = float(rho * np.linalg.norm(Z - Z_old))
        if _residual_ok(r, s, np.linalg.norm(W), np.linalg.norm(Z), rho * np.linalg.norm(U),
                        d * K, st, s / rho):
            converged = True
            break
        if st.adapt_rho and it % 10 == 0:
            rho, U = _balance(rho, r, s, U)
    if not converged:
        log.warning("W-step ADMM stopped at max_admm=%d (r=%.3g, s=%.3g)", st.max_admm, r, s)
    info = StepInfo(it, converged, rho, r, s)
    return Z, info, _WState(Z, U, rho)


def _w_step_logistic(X, Y, omega, gamma, W0, b0, settings: SolverSettings):
    """Proximal-gradient (FISTA with restart) W-step for the logistic loss.

    The intercept row is unpenalised and excluded from the trace term.
    """
    n, d = X.shape
    K = Y.shape[1]
    S = 2.0 * Y - 1.0
    X1 = np.hstack([X, np.ones((n, 1))])
    L = 0.25 * np.linalg.norm(X1, 2) ** 2 + 2.0 * float(np.linalg.eigvalsh(omega)[-1])
    step = 1.0 / L

    def smooth(Wb):
        W, b = Wb[:d], Wb[d]
        M = X @ W + b
        val = float(np.logaddexp(0.0, -S * M).sum()) + float(np.trace(W @ omega @ W.T))
        G = -S * expit(-S * M)
        grad = X1.T @ G
        grad[:d] += 2.0 * W @ omega
        return val, grad

    def prox(Wb, t):
        out = Wb.copy()
        out[:d] = soft_threshold(Wb[:d], t * gamma)
        return out

    def full(Wb):
        return smooth(Wb)[0] + gamma * float(np.abs(Wb[:d]).sum())

    x = np.vstack([W0, b0[None, :]])
    y = x.copy()
    t = 1.0
    f_x = full(x)
    converged = False
    for it in range(1, settings.max_prox + 1):
        _, g = smooth(y)
        x_new = prox(y - step * g, step)
        f_new = full(x_new)
        if f_new > f_x:
            # restart from the last accepted point with a plain proximal step
            _, g = smooth(x)
            x_new = prox(x - step * g, step)
            f_new = full(x_new)
            t = 1.0
            y = x_new.copy()
        else:
            t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
            y = x_new + (t - 1) / t_new * (x_new - x)
            t = t_new
        delta = float(np.abs(x_new - x).max())
        x, f_x = x_new, f_new
        if delta < settings.abs_tol * step * 1e-2 or delta < 1e-10:
            converged = True
            break
    info = StepInfo(it, converged, step, delta, 0.0)
    return x[:d], x[d], info


# ------------------------------------------------------------------ Omega-step

@dataclass
class _OState:
    Phi: np.ndarray
    U: np.ndarray
    rho: float


def omega_step(W, lam: float, settings: SolverSettings | None = None,
               state: _OState | None = None, K: int | None = None):
    """Minimise Tr(S Omega) - (K/2) log|Omega| + lam ||Omega||_1 with S = W'W.

    The diagonal of ``||Omega||_1`` is linear on the PD cone, so it is folded
    into S; only the off-diagonal is soft-thresholded in the Phi-update. The
    returned Omega iterate is symmetric positive definite by construction.
    """
    st = settings or SolverSettings()
    W = np.asarray(W, dtype=np.float64)
    K = W.shape[1] if K is None else K
    if lam < 0:
        raise MsslError("lam must be >= 0")
    S = W.T @ W + lam * np.eye(K)
    if state is None:
        state = _OState(np.eye(K), np.zeros((K, K)), st.rho)
    Phi, U, rho = state.Phi.copy(), state.U.copy(), state.rho
    off = ~np.eye(K, dtype=bool)
    omega = Phi
    converged = False
    r = s = np.inf
    for it in range(1, st.max_admm + 1):
        M = rho * (Phi - U) - S
        M = 0.5 * (M + M.T)
        ev, V = np.linalg.eigh(M)
        w = (ev + np.sqrt(ev * ev + 2.0 * K * rho)) / (2.0 * rho)
        omega = (V * w) @ V.T
        omega = 0.5 * (omega + omega.T)
        Phi_old = Phi
        A = omega + U
        Phi = A.copy()
        Phi[off] = soft_threshold(A[off], lam / rho)
        U = U + omega - Phi
        r = float(np.linalg.norm(omega - Phi))
        s = float(rho * np.linalg.norm(Phi - Phi_old))
        if _residual_ok(r, s, np.linalg.norm(omega), np.linalg.norm(Phi),
                        rho * np.linalg.norm(U), K * K, st, s / rho):
            converged = True
            break
        if st.adapt_rho and it % 10 == 0:
            rho, U = _balance(rho, r, s, U)
    if not converged:
        log.warning("Omega-step ADMM stopped at max_admm=%d (r=%.3g, s=%.3g)", st.max_admm, r, s)
    info = StepInfo(it, converged, rho, r, s)
    return omega, info, _OState(Phi, U, rho)


# ------------------------------------------------------------------ alternation

@dataclass
class MsslResult:
    weights: WeightMatrix
    omega: np.ndarray
    lam: float
    gamma: float
    loss: str
    objective: list = field(default_factory=list)
    history: list = field(default_factory=list)
    converged: bool = False
    settings: SolverSettings = field(default_factory=SolverSettings)

    @property
    def flags(self) -> list:
        return sorted({f for h in self.history for f in h.get("flags", [])})

    def to_dict(self) -> dict:
        return {"weights": self.weights.to_dict(), "omega": self.omega.tolist(),
                "lam": self.lam, "gamma": self.gamma, "loss": self.loss,
                "objective": self.objective, "history": self.history,
                "converged": self.converged, "settings": self.settings.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "MsslResult":
        return cls(WeightMatrix.from_dict(d["weights"]), np.asarray(d["omega"], dtype=np.float64),
                   d["lam"], d["gamma"], d["loss"], list(d["objective"]), list(d["history"]),
                   d["converged"], SolverSettings(**d["settings"]))


def _outer_done(prev, cur, tol):
    return abs(prev - cur) <= tol * max(1.0, abs(prev))


def mssl_fit(X, Y, lam: float, gamma: float, settings: SolverSettings | None = None,
             loss: str = "squared") -> MsslResult:
    """Alternate W- and Omega-steps from W = 0, Omega = I.

    Squared loss: X and Y are centred internally, which is the same as an
    unpenalised constant column that is also kept out of the trace term; the
    intercepts are recovered afterwards. Logistic loss carries an explicit
    unpenalised intercept. A step that would raise the objective is rejected,
    so the recorded objective never increases.
    """
    st = settings or SolverSettings()
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or X.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise MsslError("X must be n x d and Y n x K with matching n")
    if lam <= 0:
        # log|Omega| is unbounded below the diagonal otherwise
        raise MsslError("lam must be > 0")
    if gamma < 0:
        raise MsslError("gamma must be >= 0")
    if loss not in ("squared", "logistic"):
        raise MsslError(f"unknown loss {loss!r}")
    n, d = X.shape
    K = Y.shape[1]
    if loss == "logistic" and not np.all((Y == 0) | (Y == 1)):
        raise MsslError("logistic MSSL needs binary targets")

    if loss == "squared":
        xm, ym = X.mean(axis=0), Y.mean(axis=0)
        Xc, Yc = X - xm, Y - ym
        a, P = np.linalg.eigh(Xc.T @ Xc)
        gram = (a, P, Xc.T @ Yc)
        b = None
    else:
        Xc, Yc = X, Y
        p = np.clip(Y.mean(axis=0), 1e-6, 1 - 1e-6)
        b = np.log(p / (1 - p))

    def objective(W, om, b_):
        return mssl_objective(Xc, Yc, W, om, lam, gamma, loss, intercept=b_)

    W = np.zeros((d, K))
    omega = np.eye(K)
    w_state = o_state = None
    f = objective(W, omega, b)
    objective_log = [f]
    history = []
    converged = False
    for t in range(1, st.max_outer + 1):
        flags = []
        if loss == "squared":
            W_new, w_info, w_state_new = w_step(Xc, Yc, omega, gamma, st, w_state, gram)
            b_new = None
        else:
            W_new, b_new, w_info = _w_step_logistic(Xc, Yc, omega, gamma, W, b, st)
            w_state_new = None
        if not w_info.converged:
            flags.append("w_step_max_iter")
        f_w = objective(W_new, omega, b_new)
        if f_w <= f + ACCEPT_SLACK:
            W, b, w_state, f = W_new, b_new, w_state_new, f_w
        else:
            flags.append("w_step_rejected")

        om_new, o_info, o_state_new = omega_step(W, lam, st, o_state, K)
        if not o_info.converged:
            flags.append("omega_step_max_iter")
        f_o = objective(W, om_new, b)
        if f_o <= f + ACCEPT_SLACK:
            omega, o_state, f = om_new, o_state_new, f_o
        else:
            flags.append("omega_step_rejected")

        min_eig = float(np.linalg.eigvalsh(omega)[0])
        history.append({"iter": t, "objective": f, "min_eig": min_eig,
                        "w_iters": w_info.iterations, "omega_iters": o_info.iterations,
                        "flags": flags})
        log.debug("mssl outer %d: objective %.10g, min eig %.3g", t, f, min_eig)
        prev = objective_log[-1]
        objective_log.append(f)
        if _outer_done(prev, f, st.outer_tol):
            converged = True
            break

    if loss == "squared":
        intercept = ym - xm @ W
    else:
        intercept = b
    return MsslResult(WeightMatrix(W, intercept), omega, float(lam), float(gamma), loss,
                      objective_log, history, converged, st)


def mssl_predict(result: MsslResult, X) -> np.ndarray:
    out = result.weights.predict(X)
    return expit(out) if result.loss == "logistic" else out
