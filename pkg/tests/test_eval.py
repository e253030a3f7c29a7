import csv
import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sdbench.eval import (GAP, ClimdexReport, EvalError, aggregate, climdex_compare,
                          compare_summaries, cwd, daily_metrics, evaluate, large_scale_metrics,
                          metric_rows, pearson, r20, rx5day, sdii, skill_score, summary_dict,
                          write_compare, write_reports)
from sdbench.grid import GridError, GridStack


def _stack(values, start="2001-01-01", lats=None, lons=None):
    values = np.asarray(values, dtype=float)
    t, ny, nx = values.shape
    lats = np.arange(ny, dtype=float) if lats is None else lats
    lons = np.arange(nx, dtype=float) if lons is None else lons
    dates = np.datetime64(start) + np.arange(t)
    return GridStack(values, lats, lons, dates)


# ------------------------------------------------------------------ daily metrics

def test_perfect_prediction():
    obs = np.array([0.0, 3.0, 1.5, 7.0])
    m = daily_metrics(obs, obs)
    assert (m.bias, m.rmse, m.pearson, m.skill) == (0.0, 0.0, 1.0, 1.0)


def test_constant_offset():
    m = daily_metrics([2.0, 2.0], [1.0, 1.0])
    assert m.bias == 1.0 and m.rmse == 1.0
    assert math.isnan(m.pearson)


def test_linear_map_correlation():
    obs = np.array([1.0, 2.0, 3.0])
    m = daily_metrics(2 * obs, obs)
    assert m.pearson == pytest.approx(1.0, abs=1e-15)
    assert m.bias == pytest.approx(obs.mean())


def test_daily_metrics_errors():
    with pytest.raises(EvalError):
        daily_metrics([1.0], [1.0])
    with pytest.raises(EvalError):
        daily_metrics([1.0, 2.0], [1.0, 2.0, 3.0])


@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=2, max_size=40),
       st.integers(0, 2**31))
def test_rmse_bounds_bias(obs, seed):
    obs = np.array(obs)
    pred = np.random.default_rng(seed).uniform(0, 100, obs.size)
    m = daily_metrics(pred, obs)
    assert m.rmse >= abs(m.bias) - 1e-12
    assert m.rmse >= 0
    assert math.isnan(m.pearson) or -1 <= m.pearson <= 1
    assert 0 <= m.skill <= 1


# -------------------------------------------------------------------- skill score

def test_skill_identical_and_disjoint():
    a = np.array([0.2, 1.7, 3.3, 3.9])
    assert skill_score(a, a) == 1.0
    assert skill_score([0.1, 0.5], [5.0, 6.2]) == 0.0


def test_skill_direct_formula():
    # frequencies a = [0.5, 0.5, 0], b = [0, 0.5, 0.5]
    assert skill_score([0.5, 1.5], [1.5, 2.5]) == pytest.approx(0.5, abs=1e-15)


def test_skill_bin_width():
    # width 2 puts 0.5 and 1.5 in one bin
    assert skill_score([0.5, 1.5], [1.5, 0.7], bin_width=2.0) == 1.0
    with pytest.raises(EvalError):
        skill_score([], [1.0])
    with pytest.raises(EvalError):
        skill_score([1.0], [1.0], bin_width=0)


samples = st.lists(st.floats(0, 60, allow_nan=False), min_size=1, max_size=50)


@given(samples, samples)
def test_skill_symmetric_and_bounded(a, b):
    s = skill_score(a, b)
    assert s == pytest.approx(skill_score(b, a), abs=1e-15)
    assert 0.0 <= s <= 1.0


@given(samples, samples, st.randoms(use_true_random=False))
def test_skill_order_invariant(a, b, r):
    a2, b2 = list(a), list(b)
    r.shuffle(a2)
    r.shuffle(b2)
    assert skill_score(a, b) == pytest.approx(skill_score(a2, b2), abs=1e-15)


# -------------------------------------------------------------------- aggregation

def test_aggregate_month_total():
    dates = np.datetime64("2001-04-01") + np.arange(30)
    totals, labels = aggregate(np.ones(30), dates, "monthly")
    assert totals.tolist() == [30.0]
    assert str(labels[0]) == "2001-04"


def test_aggregate_partial_unit_warns():
    dates = np.datetime64("2001-04-01") + np.arange(40)
    with pytest.warns(UserWarning, match="partial"):
        totals, labels = aggregate(np.ones(40), dates, "monthly")
    assert totals.tolist() == [30.0]


@given(st.integers(0, 2**31))
def test_annual_equals_sum_of_months(seed):
    rng = np.random.default_rng(seed)
    dates = np.datetime64("2003-01-01") + np.arange(365)
    # dyadic values keep every partial sum exact
    x = rng.integers(0, 400, size=(365, 2)) / 8.0
    months, _ = aggregate(x, dates, "monthly")
    years, _ = aggregate(x, dates, "annual")
    assert np.array_equal(months.sum(axis=0), years[0])


def test_large_scale_hand_case():
    # two locations x two years; daily values constant within a year
    d = np.arange(np.datetime64("2001-01-01"), np.datetime64("2003-01-01"))
    y1 = d < np.datetime64("2002-01-01")
    obs = np.zeros((d.size, 1, 2))
    pred = np.zeros_like(obs)
    obs[:, 0, 0] = np.where(y1, 1, 2)
    obs[:, 0, 1] = np.where(y1, 3, 0)
    pred[:, 0, 0] = 2
    pred[:, 0, 1] = np.where(y1, 3, 1)
    # annual totals: obs [365, 730, 1095, 0], pred [730, 730, 1095, 365]
    m = large_scale_metrics(_stack(pred), _stack(obs), "annual")
    assert m["rmse"] == pytest.approx(365 / math.sqrt(2), rel=1e-14)
    assert m["bias"] == pytest.approx(182.5, rel=1e-14)
    ref = np.corrcoef([730, 730, 1095, 365], [365, 730, 1095, 0])[0, 1]
    assert m["pearson"] == pytest.approx(ref, rel=1e-12)


def test_large_scale_perfect():
    rng = np.random.default_rng(1)
    d = np.arange(np.datetime64("2001-01-01"), np.datetime64("2003-01-01"))
    s = _stack(rng.gamma(0.5, 4.0, size=(d.size, 2, 2)))
    for scale in ("monthly", "annual"):
        m = large_scale_metrics(s, s, scale)
        assert m["rmse"] == 0.0 and m["skill"] == 1.0


# ------------------------------------------------------------------------ ClimDEX

def test_climdex_hand_cases():
    assert cwd([0, 2, 3, 4, 0.5, 1]) == 3
    assert r20([25, 19, 20, 3]) == 2
    assert rx5day([1, 2, 3, 4, 5, 6]) == 20
    series = np.zeros(365)
    series[:10] = 10.0          # 100 mm over 10 wet days
    series[20:25] = 0.5         # sub-threshold drizzle does not count as wet
    assert sdii(series) == pytest.approx((100 + 2.5) / 10)
    series[20:25] = 0.0
    assert sdii(series) == 10.0


def test_climdex_edge_cases():
    assert math.isnan(sdii([0.0, 0.5, 0.9]))
    assert rx5day([1.0, 2.0]) == 3.0
    assert cwd([0.0]) == 0
    for f in (cwd, r20, rx5day, sdii):
        with pytest.raises(EvalError):
            f([])


def _brute(x):
    runs = [len(list(g)) for k, g in itertools.groupby(v >= 1.0 for v in x) if k]
    c = max(runs, default=0)
    r = sum(1 for v in x if v >= 20.0)
    if len(x) < 5:
        rx = sum(x)
    else:
        rx = max(x[i] + x[i + 1] + x[i + 2] + x[i + 3] + x[i + 4] for i in range(len(x) - 4))
    wet = [v for v in x if v >= 1.0]
    s = sum(x) / len(wet) if wet else float("nan")
    return c, r, rx, s


def test_climdex_brute_force_dyadic():
    # values on a 1/8 grid make every sum exact, so equality is exact too
    rng = np.random.default_rng(7)
    for _ in range(300):
        n = int(rng.integers(1, 400))
        x = (rng.integers(0, 320, n) * (rng.random(n) < 0.5) / 8.0).tolist()
        c, r, rx, s = _brute(x)
        assert cwd(x) == c and r20(x) == r and rx5day(x) == rx
        assert (math.isnan(s) and math.isnan(sdii(x))) or sdii(x) == s


@given(st.lists(st.floats(0, 80, allow_nan=False), min_size=1, max_size=60))
def test_climdex_properties(x):
    assert 0 <= cwd(x) <= len(x)
    assert 0 <= r20(x) <= len(x)
    if len(x) >= 5:
        assert rx5day(x) >= max(x)
    s = sdii(x)
    assert math.isnan(s) or s >= 0


def _two_year_stacks(seed=0):
    rng = np.random.default_rng(seed)
    d = np.arange(np.datetime64("2001-01-01"), np.datetime64("2004-01-01"))
    obs = rng.gamma(0.4, 8.0, size=(d.size, 1, 2))
    return _stack(obs), d


def test_climdex_compare_identical():
    s, _ = _two_year_stacks()
    rep = climdex_compare(s, s)
    for index in ("cwd", "r20", "rx5day", "sdii"):
        assert rep.summary[index]["pearson"] == pytest.approx(1.0, abs=1e-12)
        assert rep.summary[index]["skill"] == 1.0


def test_climdex_compare_constant_flags_missing():
    s, _ = _two_year_stacks()
    const = s.with_values(np.full(s.shape, 2.0))
    rep = climdex_compare(const, s)
    assert math.isnan(rep.summary["cwd"]["pearson"])
    assert rep.summary["cwd"]["flag"] == "zero_variance"


def test_climdex_compare_hand_case():
    # two locations x three years, values chosen so the indices are obvious
    d = np.arange(np.datetime64("2001-01-01"), np.datetime64("2004-01-01"))
    yr = d.astype("datetime64[Y]").astype(int) + 1970
    obs = np.zeros((d.size, 1, 2))
    pred = np.zeros_like(obs)
    for k, y in enumerate((2001, 2002, 2003)):
        start = np.flatnonzero(yr == y)[0]
        obs[start:start + k + 1, 0, 0] = 25.0     # CWD k+1, R20 k+1
        pred[start:start + k + 2, 0, 0] = 25.0    # CWD k+2
        obs[start + 100, 0, 1] = 2.0 * (k + 1)    # one wet day
        pred[start + 100, 0, 1] = 2.0 * (k + 1)
    rep = climdex_compare(_stack(pred), _stack(obs))
    rows = [r for r in rep.rows if r["index"] == "cwd"]
    assert [(r["cell"], r["obs"], r["pred"]) for r in rows] == [
        (0, 1, 2), (1, 1, 1), (0, 2, 3), (1, 1, 1), (0, 3, 4), (1, 1, 1)]
    # pooled pairs (pred, obs): (2,1),(1,1),(3,2),(1,1),(4,3),(1,1)
    ref = np.corrcoef([2, 1, 3, 1, 4, 1], [1, 1, 2, 1, 3, 1])[0, 1]
    assert rep.summary["cwd"]["pearson"] == pytest.approx(ref, rel=1e-12)
    # obs bins (lo=1): {0: 4/6, 1: 1/6, 2: 1/6}; pred {0: 3/6, 1: 1/6, 2: 1/6, 3: 1/6}
    assert rep.summary["cwd"]["skill"] == pytest.approx(5 / 6, abs=1e-15)
    sd = [r for r in rep.rows if r["index"] == "sdii" and r["cell"] == 1]
    assert [r["obs"] for r in sd] == [2.0, 4.0, 6.0]
    assert len([r for r in rep.rows if r["index"] == "rx5day"]) == 2 * 36


def test_climdex_needs_two_years():
    d = np.arange(np.datetime64("2001-01-01"), np.datetime64("2002-01-01"))
    s = _stack(np.ones((d.size, 1, 1)))
    with pytest.raises(EvalError):
        climdex_compare(s, s)


def test_misaligned_stacks_rejected():
    s, _ = _two_year_stacks()
    other = _stack(s.values, start="2001-01-02")
    with pytest.raises(GridError):
        climdex_compare(other, s)


# ------------------------------------------------------------------------ reports

HAND_OBS = np.array([[[0, 1], [0, 1]], [[1, 1], [2, 0]], [[2, 1], [4, 0]], [[3, 1], [6, 1]]],
                    dtype=float)
HAND_PRED = np.array([[[0, 2], [0, 0]], [[1, 2], [4, 1]], [[2, 2], [8, 1]], [[3, 2], [12, 0]]],
                     dtype=float)


def test_hand_built_report_csv(tmp_path):
    rep = evaluate(_stack(HAND_PRED), _stack(HAND_OBS), "hand")
    paths = write_reports(rep, ClimdexReport(), tmp_path)
    with open(paths["metrics"]) as fh:
        rows = list(csv.DictReader(fh))
    got = {(r["location"], r["metric"]): r["value"] for r in rows
           if r["scale"] == "daily" and r["season"] == "ALL"}
    # cell 0: pred == obs; cell 1: +1 constant; cell 2: pred = 2 obs; cell 3: swapped 0/1
    expect = {("0", "bias"): 0.0, ("0", "rmse"): 0.0, ("0", "pearson"): 1.0, ("0", "skill"): 1.0,
              ("1", "bias"): 1.0, ("1", "rmse"): 1.0, ("1", "pearson"): "nan", ("1", "skill"): 0.0,
              ("2", "bias"): 3.0, ("2", "rmse"): math.sqrt(14), ("2", "pearson"): 1.0,
              ("2", "skill"): 0.5,
              ("3", "bias"): 0.0, ("3", "rmse"): 1.0, ("3", "pearson"): -1.0, ("3", "skill"): 1.0,
              ("mean", "bias"): 1.0, ("mean", "rmse"): (2 + math.sqrt(14)) / 4,
              ("mean", "pearson"): 1 / 3, ("mean", "skill"): 0.625}
    for key, val in expect.items():
        if val == "nan":
            assert got[key] == "nan"
        else:
            assert float(got[key]) == pytest.approx(val, abs=1e-14), key
    # only DJF has data among the seasons
    assert {r["season"] for r in rows if r["scale"] == "daily"} == {"ALL", "DJF"}
    summary = json.loads(paths["summary"].read_text())
    assert summary["large_scale"]["monthly"]["rmse"] is None


def test_perfect_report_and_identical_keys(tmp_path):
    s, _ = _two_year_stacks()
    noisy = s.with_values(s.values * 1.1)
    perfect = evaluate(s, s, "a")
    other = evaluate(noisy, s, "b")
    assert all(v == 0 for v in perfect.daily["ALL"]["rmse"])
    assert perfect.daily_mean["ALL"]["skill"] == 1.0
    assert perfect.large_scale["annual"]["rmse"] == 0.0
    keys = lambda r: [row[1:7] for row in metric_rows(r)]
    assert keys(perfect) == keys(other)


def test_compare_gap_marker_and_blocks(tmp_path):
    s, _ = _two_year_stacks()
    summaries = []
    for name, scale in (("a", 1.0), ("b", 1.2)):
        pred = s.with_values(s.values * scale)
        summaries.append(summary_dict(evaluate(pred, s, name), climdex_compare(pred, s)))
    del summaries[1]["large_scale"]["annual"]["skill"]
    rows = compare_summaries(summaries)
    gap = [r for r in rows if r[:3] == ("large_scale", "skill", "annual")]
    assert [(r[3], r[4] == GAP) for r in gap] == [("a", False), ("b", True)]
    # every key appears once per method
    keys = {}
    for r in rows:
        keys.setdefault(r[:3], []).append(r[3])
    assert all(v == ["a", "b"] for v in keys.values())
    same = compare_summaries([summaries[0], {**summaries[0], "method": "c"}])
    vals = {}
    for r in same:
        vals.setdefault(r[:3], []).append(r[4])
    assert all(v[0] == v[1] for v in vals.values())
    path = write_compare(rows, tmp_path / "c.csv")
    assert path.read_text().startswith("table,metric,scope,method,value\n")


def test_compare_errors():
    with pytest.raises(EvalError):
        compare_summaries([{"method": "a", "daily": {}, "large_scale": {}, "climdex": {}}])
    with pytest.raises(EvalError, match="lacks"):
        compare_summaries([{"method": "a"}, {"method": "b"}])


def test_pearson_zero_variance():
    assert math.isnan(pearson([1, 1, 1], [1, 2, 3]))
