"""Standardization, variance-truncated PCA and the flattened design matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridError, GridStack

VAR_TOL = 1e-12


def standardize_fit(X):
    """Column means and sample standard deviations (ddof=1).

    Zero-variance columns get scale 1 so they are only centred.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError("need at least two rows to standardize")
    means = X.mean(axis=0)
    scales = X.std(axis=0, ddof=1)
    scales = np.where(scales > VAR_TOL * np.maximum(1.0, np.abs(means)), scales, 1.0)
    return means, scales


def standardize_apply(X, means, scales):
    return (np.asarray(X, dtype=np.float64) - means) / scales


@dataclass(frozen=True)
class PcaBasis:
    means: np.ndarray
    scales: np.ndarray
    components: np.ndarray          # (d, p), orthonormal columns
    explained: np.ndarray           # variance fraction per retained component
    n_components: int

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "scales": self.scales.tolist(),
                "components": self.components.tolist(),
                "explained": self.explained.tolist(), "n_components": self.n_components}

    @classmethod
    def from_dict(cls, d: dict) -> "PcaBasis":
        comps = np.asarray(d["components"], dtype=np.float64)
        return cls(np.asarray(d["means"]), np.asarray(d["scales"]),
                   comps.reshape(len(d["means"]), -1), np.asarray(d["explained"]),
                   int(d["n_components"]))


def pca_fit(X, var_frac: float = 0.98, scale: bool = True) -> PcaBasis:
    """Principal components of ``X`` keeping the smallest count that reaches
    ``var_frac`` of the total variance.

    The covariance is eigendecomposed directly. Each component is signed so
    its largest-magnitude loading is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise ValueError("PCA needs at least two rows")
    if not 0 < var_frac <= 1:
        raise ValueError("var_frac must lie in (0, 1]")
    if scale:
        means, scales = standardize_fit(X)
    else:
        means, scales = X.mean(axis=0), np.ones(d)
    Z = (X - means) / scales
    cov = Z.T @ Z / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    if total <= 0:
        raise ValueError("PCA input has zero total variance")
    frac = evals / total
    cum = np.cumsum(frac)
    p = int(np.searchsorted(cum, var_frac - 1e-12) + 1)
    p = min(p, n, d)
    comps = evecs[:, :p].copy()
    big = np.argmax(np.abs(comps), axis=0)
    signs = np.sign(comps[big, np.arange(p)])
    comps *= np.where(signs == 0, 1.0, signs)
    return PcaBasis(means, scales, comps, frac[:p], p)


def pca_transform(X, basis: PcaBasis) -> np.ndarray:
    return standardize_apply(X, basis.means, basis.scales) @ basis.components


def pca_inverse(scores, basis: PcaBasis) -> np.ndarray:
    return np.asarray(scores) @ basis.components.T * basis.scales + basis.means


@dataclass(frozen=True)
class ColumnInfo:
    variable: str
    level: str
    lat: float
    lon: float

    def label(self) -> str:
        return f"{self.variable}@{self.level}[{self.lat:g},{self.lon:g}]"


@dataclass(frozen=True)
class DesignMatrix:
    """Covariates X (n x d) with one descriptor per column and the sample dates."""

    X: np.ndarray
    columns: tuple
    dates: np.ndarray

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape[1] != len(self.columns):
            raise ValueError("descriptor count must equal the number of columns")
        if self.X.shape[0] != len(self.dates):
            raise ValueError("one date per row is required")
        if np.isnan(self.X).any():
            raise ValueError("design matrix contains NaN")

    @property
    def shape(self):
        return self.X.shape

    def rows(self, mask) -> "DesignMatrix":
        return DesignMatrix(self.X[mask], self.columns, self.dates[mask])


def _in_bbox(coord, lo, hi):
    return (coord >= min(lo, hi)) & (coord <= max(lo, hi))


def build_design_matrix(covariates, bbox=None) -> DesignMatrix:
    """Flatten covariate stacks into a design matrix.

    Stacks are ordered by (variable, level); within a stack cells run
    lat-major, lon-minor. ``bbox`` is (lat_min, lat_max, lon_min, lon_max),
    inclusive; cells with any missing value are dropped with their
    descriptors.
    """
    covariates = sorted(covariates, key=lambda s: (s.name, s.level))
    if not covariates:
        raise GridError("no covariate stacks given")
    dates = covariates[0].dates
    blocks, columns = [], []
    for stack in covariates:
        if stack.dates.shape != dates.shape or np.any(stack.dates != dates):
            raise GridError(f"time axis of {stack.name}@{stack.level} is misaligned")
        if bbox is None:
            li = np.ones(stack.lats.size, bool)
            lj = np.ones(stack.lons.size, bool)
        else:
            li = _in_bbox(stack.lats, bbox[0], bbox[1])
            lj = _in_bbox(stack.lons, bbox[2], bbox[3])
        for i in np.flatnonzero(li):
            for j in np.flatnonzero(lj):
                col = stack.values[:, i, j]
                if np.isnan(col).any():
                    continue
                blocks.append(col)
                columns.append(ColumnInfo(stack.name, stack.level,
                                          float(stack.lats[i]), float(stack.lons[j])))
    if not columns:
        raise GridError("bounding box selects no usable covariate cells")
    return DesignMatrix(np.column_stack(blocks), tuple(columns), np.array(dates))
