"""Synthetic paired coarse/fine data with known generating weights.

Coarse covariates are smooth, spatially correlated fields with a seasonal
cycle and AR(1) day-to-day persistence. Fine-grid precipitation follows an
occurrence x amount structure: a logistic wet/dry draw and an amount that is
either ``exp(b + x'w) + noise`` or ``b + x'w + noise``, clipped at 0. A
drizzly, biased coarse "model" precipitation field is derived from the fine
expected precipitation so that BCSD has something to correct.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.optimize import brentq
from scipy.special import expit

from .grid import GridStack
from .linear import WeightMatrix
from .preprocess import build_design_matrix

VAR_NAMES = ("hus", "ta", "ua", "va", "zg", "psl")
LEVELS = ("850", "500", "250", "700")


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the generator.

    The fine grid has spacing ``1/refine`` of the coarse spacing and must fit
    inside the coarse footprint, i.e. ``fine_shape <= coarse_shape * refine``
    per axis.
    """

    coarse_shape: tuple = (5, 5)
    fine_shape: tuple = (3, 3)
    refine: int = 2
    lat0: float = 40.0
    lon0: float = 280.0
    spacing: float = 1.0
    start_year: int = 1985
    n_years: int = 20
    n_vars: int = 2
    n_levels: int = 1
    n_active: int = 3
    noise_sd: float = 0.5
    wet_prob: float = 0.4
    link: str = "exp"
    smooth_cells: float = 0.5
    persistence: float = 0.6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "coarse_shape", tuple(int(v) for v in self.coarse_shape))
        object.__setattr__(self, "fine_shape", tuple(int(v) for v in self.fine_shape))
        self.validate()

    def validate(self):
        if len(self.coarse_shape) != 2 or len(self.fine_shape) != 2:
            raise SynthConfigError("grid shapes must be (nlat, nlon)")
        if min(self.coarse_shape) < 2 or min(self.fine_shape) < 1:
            raise SynthConfigError("coarse grid needs >= 2 nodes per axis, fine >= 1")
        if not isinstance(self.refine, (int, np.integer)) or self.refine < 1:
            raise SynthConfigError("invalid grid ratio: refine must be a positive integer")
        for nf, nc in zip(self.fine_shape, self.coarse_shape):
            if nf > nc * self.refine:
                raise SynthConfigError(
                    f"invalid grid ratio: {nf} fine cells do not fit in {nc} coarse "
                    f"cells at refine={self.refine}")
        if self.noise_sd < 0:
            raise SynthConfigError("noise_sd must be >= 0")
        if not 0 < self.wet_prob <= 1:
            raise SynthConfigError("wet_prob must lie in (0, 1]")
        if self.link not in ("exp", "linear"):
            raise SynthConfigError(f"unknown link {self.link!r}")
        if self.n_years < 1 or self.n_vars < 1 or self.n_levels < 1:
            raise SynthConfigError("n_years, n_vars and n_levels must be >= 1")
        if self.n_vars > len(VAR_NAMES) or self.n_levels > len(LEVELS):
            raise SynthConfigError("too many variables or levels requested")
        d = self.n_vars * self.n_levels * self.coarse_shape[0] * self.coarse_shape[1]
        if not 1 <= self.n_active <= d:
            raise SynthConfigError(f"n_active must lie in 1..{d}")
        if not 0 <= self.persistence < 1:
            raise SynthConfigError("persistence must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


class SynthData(NamedTuple):
    covariates: list
    fine_obs: GridStack
    truth: WeightMatrix
    occurrence: WeightMatrix
    model_pr: GridStack


def coarse_coords(cfg: SynthConfig):
    lats = cfg.lat0 + cfg.spacing * np.arange(cfg.coarse_shape[0])
    lons = cfg.lon0 + cfg.spacing * np.arange(cfg.coarse_shape[1])
    return lats, lons


def fine_coords(cfg: SynthConfig):
    """Centres of a contiguous, centred window of the refined coarse grid."""
    out = []
    for nf, nc, origin in zip(cfg.fine_shape, cfg.coarse_shape, (cfg.lat0, cfg.lon0)):
        step = cfg.spacing / cfg.refine
        m0 = (nc * cfg.refine - nf) // 2
        out.append(origin - cfg.spacing / 2 + step * (m0 + np.arange(nf) + 0.5))
    return out[0], out[1]


def synth_dates(cfg: SynthConfig) -> np.ndarray:
    start = np.datetime64(f"{cfg.start_year:04d}-01-01")
    end = np.datetime64(f"{cfg.start_year + cfg.n_years:04d}-01-01")
    return np.arange(start, end, dtype="datetime64[D]")


def _smooth_noise(rng, shape, sigma):
    """Unit-variance, spatially smooth white noise per time step."""
    z = rng.standard_normal(shape)
    if sigma > 0:
        z = gaussian_filter(z, sigma=(0, sigma, sigma), mode="reflect")
    return z / z.reshape(shape[0], -1).std(axis=1).mean()


def _covariate_field(rng, n_days, shape, cfg, doy):
    eps = _smooth_noise(rng, (n_days,) + shape, cfg.smooth_cells)
    phi = cfg.persistence
    anom = np.empty_like(eps)
    anom[0] = eps[0]
    innov = math.sqrt(1 - phi * phi)
    for t in range(1, n_days):
        anom[t] = phi * anom[t - 1] + innov * eps[t]
    amp = rng.uniform(0.5, 1.5)
    phase = rng.uniform(0, 2 * np.pi)
    offset = rng.uniform(-2, 2)
    cycle = amp * np.cos(2 * np.pi * doy / 365.25 - phase)
    # float32 rounding here keeps in-memory data equal to the on-disk payload
    return (offset + cycle[:, None, None] + anom).astype(np.float32).astype(np.float64)


def _sparse_weights(rng, d, K, n_active, low, high):
    W = np.zeros((d, K))
    for k in range(K):
        idx = rng.choice(d, size=n_active, replace=False)
        W[idx, k] = rng.uniform(low, high, n_active) * rng.choice([-1.0, 1.0], n_active)
    return W


def _calibrate_intercept(score, target):
    """Intercept a with mean(sigmoid(a + score)) == target."""
    f = lambda a: expit(a + score).mean() - target
    return brentq(f, -50.0, 50.0, xtol=1e-12)


def _to_raw(W_std, b_std, means, scales):
    coef = W_std / scales[:, None]
    return WeightMatrix(coef, b_std - means @ coef)


def synth_dataset(cfg: SynthConfig) -> SynthData:
    """Generate every synthetic field for ``cfg`` (deterministic in the seed)."""
    rng = np.random.default_rng(cfg.seed)
    dates = synth_dates(cfg)
    n = dates.size
    doy = (dates - dates.astype("datetime64[Y]").astype("datetime64[D]")).astype(np.int64) + 1
    clats, clons = coarse_coords(cfg)
    flats, flons = fine_coords(cfg)
    K = cfg.fine_shape[0] * cfg.fine_shape[1]

    covariates = []
    for v in range(cfg.n_vars):
        for lv in range(cfg.n_levels):
            values = _covariate_field(rng, n, cfg.coarse_shape, cfg, doy)
            covariates.append(GridStack(values, clats, clons, dates, units="std",
                                        name=VAR_NAMES[v], level=LEVELS[lv]))
    dm = build_design_matrix(covariates)
    X = dm.X
    means = X.mean(axis=0)
    scales = X.std(axis=0, ddof=1)
    Z = (X - means) / scales
    d = X.shape[1]

    if cfg.link == "exp":
        W_amt = _sparse_weights(rng, d, K, cfg.n_active, 0.15, 0.35)
        b_amt = np.full(K, math.log(5.0)) + rng.uniform(-0.3, 0.3, K)
    else:
        W_amt = _sparse_weights(rng, d, K, cfg.n_active, 1.0, 2.0)
        b_amt = np.full(K, 10.0) + rng.uniform(-2, 2, K)
    W_occ = (W_amt != 0) * rng.uniform(0.5, 1.5, W_amt.shape) * rng.choice([-1.0, 1.0], W_amt.shape)

    lin = b_amt + Z @ W_amt
    expected_amt = np.exp(lin) if cfg.link == "exp" else lin
    occ_score = Z @ W_occ
    if cfg.wet_prob >= 1:
        b_occ = np.full(K, np.inf)
        prob = np.ones((n, K))
    else:
        b_occ = np.array([_calibrate_intercept(occ_score[:, k], cfg.wet_prob) for k in range(K)])
        prob = expit(b_occ + occ_score)
    wet = rng.random((n, K)) < prob
    noise = cfg.noise_sd * rng.standard_normal((n, K))
    amount = np.maximum(expected_amt + noise, 0.0)
    obs = np.where(wet, amount, 0.0).astype(np.float32).astype(np.float64)
    fine_obs = GridStack(obs.reshape((n,) + cfg.fine_shape), flats, flons, dates)

    # Coarse model precipitation: smoothed, biased, always-drizzling version of
    # the fine expected precipitation, so its distribution differs from obs.
    expected = prob * np.maximum(expected_amt, 0.0)
    glat, glon = np.meshgrid(clats, clons, indexing="ij")
    flat_lat, flat_lon = np.meshgrid(flats, flons, indexing="ij")
    dist2 = ((glat.ravel()[:, None] - flat_lat.ravel()[None, :]) ** 2
             + (glon.ravel()[:, None] - flat_lon.ravel()[None, :]) ** 2)
    kern = np.exp(-dist2 / (2 * (1.5 * cfg.spacing) ** 2))
    kern /= kern.sum(axis=1, keepdims=True)
    bias = rng.uniform(0.6, 0.9, kern.shape[0])
    drizzle = 0.1 * np.exp(0.3 * rng.standard_normal((n, kern.shape[0])))
    model = bias * (expected @ kern.T) ** 0.85 + drizzle
    model = model.astype(np.float32).astype(np.float64)
    model_pr = GridStack(model.reshape((n,) + cfg.coarse_shape), clats, clons, dates)

    truth = _to_raw(W_amt, b_amt, means, scales)
    occ_b = np.where(np.isfinite(b_occ), b_occ, 0.0)
    occurrence = _to_raw(W_occ, occ_b, means, scales)
    return SynthData(covariates, fine_obs, truth, occurrence, model_pr)


def synth_generate(cfg: SynthConfig):
    """(covariates, fine_obs, truth) where ``truth`` holds the amount weights in
    raw covariate units, ordered like :func:`build_design_matrix` columns."""
    data = synth_dataset(cfg)
    return data.covariates, data.fine_obs, data.truth
