"""Daily bias correction and spatial disaggregation (BCSD), and the BCSD-MSSL
error correction that regresses BCSD's residual error on covariates.

Step 1 maps each coarse model value through per-day-of-year empirical
quantile maps fitted on +/-15-day pools. Step 2 interpolates the corrected
field bilinearly to the fine grid and multiplies by the ratio of observed to
interpolated-corrected day-of-year climatology.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .grid import (N_SLOTS, GridError, GridStack, bilinear_interpolate, day_slots,
                   season_of, slot_window)
from .mssl import MsslResult, SolverSettings, mssl_fit
from .preprocess import standardize_apply, standardize_fit

CLIM_FLOOR = 0.1  # mm/day, floor on the interpolated climatology
WINDOW = 15
# Scaling factors use the calendar-day mean: any windowed climatology of the
# downscaled output then reproduces the observed one exactly (floor aside),
# which +/-15-day factors do not.
FACTOR_WINDOW = 0


def pool_mask(slots, doy: int, window: int = WINDOW) -> np.ndarray:
    """Days within +/-window of ``doy``, widened one day at a time until the
    pool holds at least 2*window + 1 samples.

    Widening only triggers around Feb 29 in short records (a single
    non-leap year has 30 samples in windows touching slot 60) and at the
    edges of season-restricted records.
    """
    slots = np.asarray(slots)
    need = min(2 * window + 1, slots.size)
    w = window
    mask = slot_window(slots, doy, w)
    while mask.sum() < need and w < N_SLOTS // 2:
        w += 1
        mask = slot_window(slots, doy, w)
    return mask


def _circular_nearest(targets, available):
    d = np.abs(np.asarray(targets)[:, None] - np.asarray(available)[None, :])
    d = np.minimum(d, N_SLOTS - d)
    return np.asarray(available)[np.argmin(d, axis=1)]


@dataclass(frozen=True)
class QuantileMapSet:
    """Sorted model and observed pools per fitted day-of-year slot.

    ``model[i]`` and ``obs[i]`` have shape (m_i, nlat*nlon) for slot
    ``doys[i]``; columns of cells without observations are NaN and ``valid``
    is False there.
    """

    doys: np.ndarray
    model: tuple
    obs: tuple
    valid: np.ndarray
    lats: np.ndarray
    lons: np.ndarray
    window: int = WINDOW

    def index_of(self, slots) -> np.ndarray:
        slots = _circular_nearest(slots, self.doys)
        return np.searchsorted(self.doys, slots)


def _check_aligned(a: GridStack, b: GridStack, what: str):
    if (a.lats.shape != b.lats.shape or a.lons.shape != b.lons.shape
            or not np.allclose(a.lats, b.lats) or not np.allclose(a.lons, b.lons)):
        raise GridError(f"{what}: grids are not aligned")
    if a.dates.shape != b.dates.shape or np.any(a.dates != b.dates):
        raise GridError(f"{what}: time axes are not aligned")


def _fit_slots(slots, doys):
    present = np.unique(slots)
    if doys is None:
        return present
    out = np.intersect1d(np.asarray(doys, dtype=np.int64), present)
    if out.size == 0:
        raise GridError("none of the requested day-of-year slots occur in the record")
    return out


def season_slots(season: str) -> np.ndarray:
    """Day-of-year slots (366-slot calendar) whose month lies in ``season``."""
    dates = np.arange(np.datetime64("2000-01-01"), np.datetime64("2001-01-01"))
    return day_slots(dates)[season_of(dates) == season]


def fit_quantile_maps(model_coarse: GridStack, obs_on_coarse: GridStack,
                      window: int = WINDOW, doys=None) -> QuantileMapSet:
    """Per-slot empirical quantiles of the model and observed pools.

    ``obs_on_coarse`` must already be remapped to the model grid. Cells with
    any missing observation in the period are excluded from mapping.
    ``doys`` restricts the fitted slots (e.g. to one season); pools still
    draw on the whole record.
    """
    _check_aligned(model_coarse, obs_on_coarse, "fit_quantile_maps")
    slots = day_slots(model_coarse.dates)
    m = model_coarse.flat()
    o = obs_on_coarse.flat()
    valid = ~np.isnan(o).any(axis=0) & ~np.isnan(m).any(axis=0)
    doys = _fit_slots(slots, doys)
    model_q, obs_q = [], []
    for doy in doys:
        sel = pool_mask(slots, int(doy), window)
        mq = np.sort(m[sel], axis=0)
        oq = np.sort(o[sel], axis=0)
        mq[:, ~valid] = np.nan
        oq[:, ~valid] = np.nan
        for arr in (mq, oq):
            arr.setflags(write=False)
        model_q.append(mq)
        obs_q.append(oq)
    return QuantileMapSet(doys, tuple(model_q), tuple(obs_q), valid,
                          model_coarse.lats, model_coarse.lons, window)


def map_values(x, model_sorted, obs_sorted) -> np.ndarray:
    """Quantile-map ``x`` from one sorted pool onto another.

    Positions use plotting positions i/(m+1), tied pool values share their
    mean position, and values outside the model pool receive the additive
    correction of the nearest tail. The result is clipped at 0.
    """
    x = np.asarray(x, dtype=np.float64)
    mq = np.asarray(model_sorted, dtype=np.float64)
    oq = np.asarray(obs_sorted, dtype=np.float64)
    M = mq.size
    pos = np.arange(1, M + 1) / (M + 1)
    uniq, inv = np.unique(mq, return_inverse=True)
    upos = np.bincount(inv, weights=pos) / np.bincount(inv)
    p = np.interp(x, uniq, upos)
    out = np.interp(p, pos, oq)
    lo = x < mq[0]
    hi = x > mq[-1]
    out[lo] = x[lo] + (oq[0] - mq[0])
    out[hi] = x[hi] + (oq[-1] - mq[-1])
    return np.maximum(out, 0.0)


def apply_bias_correction(model_coarse: GridStack, maps: QuantileMapSet) -> GridStack:
    """Map every value through the quantile map of its day-of-year slot.

    Slots absent from the fitted set use the circularly nearest fitted slot.
    Cells without a map come out NaN (they are filled before interpolation).
    """
    if (model_coarse.lats.shape != maps.lats.shape or model_coarse.lons.shape != maps.lons.shape
            or not np.allclose(model_coarse.lats, maps.lats)
            or not np.allclose(model_coarse.lons, maps.lons)):
        raise GridError("apply_bias_correction: maps were fitted on another grid")
    vals = model_coarse.flat()
    out = np.full_like(vals, np.nan)
    idx = maps.index_of(day_slots(model_coarse.dates))
    cells = np.flatnonzero(maps.valid)
    for i in np.unique(idx):
        rows = np.flatnonzero(idx == i)
        for c in cells:
            out[rows, c] = map_values(vals[rows, c], maps.model[i][:, c], maps.obs[i][:, c])
    return model_coarse.with_values(out.reshape(model_coarse.shape))


@dataclass(frozen=True)
class ScalingFactorSet:
    doys: np.ndarray          # fitted slots, ascending
    factors: np.ndarray       # (len(doys), nlat, nlon) on the fine grid
    lats: np.ndarray
    lons: np.ndarray
    window: int = FACTOR_WINDOW

    def for_slots(self, slots) -> np.ndarray:
        idx = np.searchsorted(self.doys, _circular_nearest(slots, self.doys))
        return self.factors[idx]


def window_climatology(stack: GridStack, window: int = WINDOW, doys=None):
    """(slots, mean over the +/-window pool of each slot present)."""
    slots = day_slots(stack.dates)
    doys = _fit_slots(slots, doys)
    clim = np.empty((doys.size,) + stack.shape[1:])
    for i, doy in enumerate(doys):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            clim[i] = np.nanmean(stack.values[slot_window(slots, int(doy), window)], axis=0)
    return doys, clim


def fit_scaling_factors(obs_fine: GridStack, corrected_coarse: GridStack,
                        window: int = FACTOR_WINDOW, floor: float = CLIM_FLOOR,
                        doys=None) -> ScalingFactorSet:
    """factor = obs climatology / max(interpolated corrected climatology, floor).

    Climatologies are means over the +/-``window`` pool of each slot; the
    default ``window=0`` is the plain day-of-year mean.
    """
    interp = bilinear_interpolate(corrected_coarse, obs_fine.lats, obs_fine.lons, edge="clamp")
    _check_aligned(interp, obs_fine, "fit_scaling_factors")
    doys, clim_obs = window_climatology(obs_fine, window, doys)
    _, clim_mod = window_climatology(interp, window, doys)
    factors = np.nan_to_num(clim_obs, nan=0.0) / np.maximum(clim_mod, floor)
    return ScalingFactorSet(doys, factors, obs_fine.lats, obs_fine.lons, window)


def bcsd_downscale(model_coarse: GridStack, maps: QuantileMapSet, factors: ScalingFactorSet,
                   fine_lats=None, fine_lons=None) -> GridStack:
    """Bias-correct, interpolate to the fine grid and rescale by day of year."""
    fine_lats = factors.lats if fine_lats is None else np.asarray(fine_lats)
    fine_lons = factors.lons if fine_lons is None else np.asarray(fine_lons)
    corrected = apply_bias_correction(model_coarse, maps)
    interp = bilinear_interpolate(corrected, fine_lats, fine_lons, edge="clamp")
    scale = factors.for_slots(day_slots(model_coarse.dates))
    return interp.with_values(np.maximum(interp.values * scale, 0.0))


# ------------------------------------------------------------------- BCSD-MSSL

@dataclass(frozen=True)
class ErrorModel:
    """MSSL fit of BCSD error (bcsd - obs) on standardised covariates."""

    means: np.ndarray
    scales: np.ndarray
    mssl: MsslResult


def bcsd_mssl_fit(bcsd_out: GridStack, obs_fine: GridStack, X, lam: float, gamma: float,
                  settings: SolverSettings | None = None, rows=None) -> ErrorModel:
    """Fit the expected BCSD error as a multi-task linear function of ``X``.

    ``X`` rows align with the stack dates and must not contain precipitation.
    ``rows`` (boolean mask) limits the fit to a subset of days, e.g. a season.
    ``gamma`` is on the summed-loss scale of :func:`mssl_fit`.
    """
    _check_aligned(bcsd_out, obs_fine, "bcsd_mssl_fit")
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != bcsd_out.shape[0]:
        raise ValueError("covariate rows must match the stack dates")
    err = bcsd_out.flat() - obs_fine.flat()
    ok = ~np.isnan(err).any(axis=1)
    if rows is not None:
        ok &= np.asarray(rows, dtype=bool)
    means, scales = standardize_fit(X[ok])
    Z = standardize_apply(X[ok], means, scales)
    res = mssl_fit(Z, err[ok], lam, gamma, settings)
    return ErrorModel(means, scales, res)


def bcsd_mssl_predict(bcsd_out: GridStack, X, model: ErrorModel) -> GridStack:
    Z = standardize_apply(X, model.means, model.scales)
    err = model.mssl.weights.predict(Z)
    out = np.maximum(bcsd_out.flat() - err, 0.0)
    return bcsd_out.with_values(out.reshape(bcsd_out.shape))
