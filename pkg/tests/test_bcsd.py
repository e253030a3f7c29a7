import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sdbench.bcsd import (CLIM_FLOOR, apply_bias_correction, bcsd_downscale, bcsd_mssl_fit,
                          bcsd_mssl_predict, fit_quantile_maps, fit_scaling_factors, map_values,
                          pool_mask, season_slots, window_climatology)
from sdbench.grid import GridError, GridStack, day_slots

pools = hnp.arrays(np.float64, st.integers(3, 40), elements=st.floats(0, 100))


def stack(values, lats, lons, start="2001-01-01"):
    values = np.asarray(values, dtype=float)
    return GridStack(values, np.asarray(lats, float), np.asarray(lons, float),
                     np.datetime64(start) + np.arange(values.shape[0]))


# ------------------------------------------------------------------ quantile map

def test_map_identity_on_same_pool():
    pool = np.array([0.5, 1.0, 2.0, 4.0, 9.0])
    x = np.array([0.5, 0.7, 3.0, 9.0])
    assert np.allclose(map_values(x, pool, pool), x, atol=1e-12)


def test_map_ties_share_mean_position():
    # zeros sit at positions 1/6..3/6, mean 2/6, which is obs[1]
    out = map_values(np.array([0.0]), [0.0, 0.0, 0.0, 1.0, 2.0], [0.0, 1.0, 2.0, 3.0, 4.0])
    assert out[0] == pytest.approx(1.0, abs=1e-12)


def test_map_tails_are_additive():
    mq, oq = [1.0, 2.0, 3.0], [2.0, 5.0, 7.0]
    assert map_values(np.array([10.0]), mq, oq)[0] == pytest.approx(14.0)
    assert map_values(np.array([0.5]), mq, oq)[0] == pytest.approx(1.5)
    # lower tail correction below zero is clipped
    assert map_values(np.array([0.5]), [1.0, 2.0], [0.0, 1.0])[0] == 0.0


@given(pools, pools, hnp.arrays(np.float64, 20, elements=st.floats(0, 150)))
def test_map_monotone_nonnegative(mq, oq, x):
    n = min(mq.size, oq.size)
    mq, oq = np.sort(mq[:n]), np.sort(oq[:n])
    xs = np.sort(x)
    out = map_values(xs, mq, oq)
    assert np.all(out >= 0)
    assert np.all(np.diff(out) >= -1e-9)


# ------------------------------------------------------------------------- pools

def test_pool_mask_counts():
    slots = day_slots(np.arange(np.datetime64("2001-01-01"), np.datetime64("2003-01-01")))
    assert pool_mask(slots, 100).sum() == 62
    # one non-leap year near Feb 29: 30 slots present; widening adds a day per side
    one = day_slots(np.arange(np.datetime64("2001-01-01"), np.datetime64("2002-01-01")))
    assert pool_mask(one, 60).sum() == 32


def test_season_slots_partition():
    sizes = {s: season_slots(s).size for s in ("DJF", "MAM", "JJA", "SON")}
    assert sizes == {"DJF": 91, "MAM": 92, "JJA": 92, "SON": 91}
    allslots = np.concatenate([season_slots(s) for s in sizes])
    assert np.array_equal(np.sort(allslots), np.arange(1, 367))


# ---------------------------------------------------------------- bias correction

def _coarse(rng, days=730, shift=0.0):
    obs = rng.gamma(0.8, 6.0, size=(days, 2, 2))
    return stack(obs, [0.0, 2.0], [0.0, 2.0]), stack(obs + shift, [0.0, 2.0], [0.0, 2.0])


def test_shifted_model_maps_back_to_obs(rng):
    obs, model = _coarse(rng, shift=3.0)
    maps = fit_quantile_maps(model, obs)
    out = apply_bias_correction(model, maps)
    assert np.abs(out.values - obs.values).max() < 1e-9


def test_identical_pools_ks_zero(rng):
    obs, model = _coarse(rng, shift=1.5)
    maps = fit_quantile_maps(model, obs)
    slots = day_slots(model.dates)
    for i in (0, 59, 200):
        doy = int(maps.doys[i])
        pool = pool_mask(slots, doy, maps.window)
        mapped = map_values(model.flat()[pool, 0], maps.model[i][:, 0], maps.obs[i][:, 0])
        assert np.array_equal(np.sort(mapped), np.sort(obs.flat()[pool, 0]))


def test_season_restricted_maps(rng):
    obs, model = _coarse(rng)
    maps = fit_quantile_maps(model, obs, doys=season_slots("JJA"))
    assert np.array_equal(maps.doys, season_slots("JJA"))
    # a short record without JJA days cannot fit JJA maps
    jan = stack(np.ones((20, 2, 2)), [0.0, 2.0], [0.0, 2.0])
    with pytest.raises(GridError):
        fit_quantile_maps(jan, jan, doys=season_slots("JJA"))


def test_missing_obs_cell_unmapped(rng):
    obs, model = _coarse(rng)
    v = obs.values.copy()
    v[5, 1, 1] = np.nan
    maps = fit_quantile_maps(model, obs.with_values(v))
    assert maps.valid.tolist() == [True, True, True, False]
    out = apply_bias_correction(model, maps)
    assert np.all(np.isnan(out.values[:, 1, 1]))
    assert not np.isnan(out.values[:, 0, 0]).any()


def test_grid_mismatch(rng):
    obs, model = _coarse(rng)
    other = stack(model.values, [0.0, 3.0], [0.0, 2.0])
    with pytest.raises(GridError, match="aligned"):
        fit_quantile_maps(other, obs)
    maps = fit_quantile_maps(model, obs)
    with pytest.raises(GridError, match="another grid"):
        apply_bias_correction(other, maps)
    with pytest.raises(GridError, match="time"):
        fit_quantile_maps(model, stack(obs.values, [0.0, 2.0], [0.0, 2.0], start="2001-01-02"))


# ------------------------------------------------------------------- downscaling

def _fine(rng, days=730):
    fine = rng.gamma(0.8, 6.0, size=(days, 4, 4))
    return stack(fine, [0.0, 0.5, 1.5, 2.0], [0.0, 0.5, 1.5, 2.0])


def test_downscale_reproduces_obs_climatology(rng):
    fine = _fine(rng)
    obs_c = stack(fine.values.reshape(730, 2, 2, 2, 2).mean(axis=(2, 4)), [0.0, 2.0], [0.0, 2.0])
    model = obs_c.with_values(obs_c.values * 1.7 + 0.5)
    maps = fit_quantile_maps(model, obs_c)
    corrected = apply_bias_correction(model, maps)
    factors = fit_scaling_factors(fine, corrected)
    out = bcsd_downscale(model, maps, factors)
    assert out.shape == fine.shape
    _, want = window_climatology(fine, 0)
    _, got = window_climatology(out, 0)
    ok = want >= 1.0
    assert ok.mean() > 0.5
    assert np.abs(got[ok] - want[ok]).max() < 1e-9


def test_scaling_floor(rng):
    fine = _fine(rng, days=366)
    dry = stack(np.zeros((366, 2, 2)), [0.0, 2.0], [0.0, 2.0])
    factors = fit_scaling_factors(fine, dry)
    _, clim = window_climatology(fine, 0)
    assert np.allclose(factors.factors, clim / CLIM_FLOOR)


# --------------------------------------------------------------------- BCSD-MSSL

def test_error_model_recovers_linear_error(rng):
    fine = _fine(rng, days=400)
    X = rng.standard_normal((400, 3))
    B = rng.standard_normal((3, 16))
    raw = fine.values + 5 + (X @ B).reshape(400, 4, 4)
    biased = fine.with_values(np.maximum(raw, 0))
    keep = ~np.any(raw < 0, axis=(1, 2))
    model = bcsd_mssl_fit(biased, fine, X, lam=1.0, gamma=0.0, rows=keep)
    out = bcsd_mssl_predict(biased, X, model)
    # the trace term shrinks like a ridge, so recovery is relative, not exact
    before = np.linalg.norm(biased.values[keep] - fine.values[keep])
    after = np.linalg.norm(out.values[keep] - fine.values[keep])
    assert after < 0.03 * before


def test_error_model_rows_must_match(rng):
    fine = _fine(rng, days=30)
    with pytest.raises(ValueError):
        bcsd_mssl_fit(fine, fine, np.ones((29, 2)), 1.0, 0.0)
