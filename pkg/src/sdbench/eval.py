"""Evaluation metrics, ClimDEX indices and report writers.

Daily metrics (bias, RMSE, Pearson r, Perkins skill score) are computed per
location and then averaged over space. Monthly and annual metrics pool every
(location, unit) pair. The four extreme-precipitation indices are computed
per location-year (RX5day per location-month) on both series and compared
by correlation and skill score across all pairs.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import SEASONS, GridError, GridStack, season_of

WET_DAY = 1.0        # mm/day
HEAVY_DAY = 20.0     # mm/day, R20 threshold
RX_WINDOW = 5
DAILY_METRICS = ("bias", "rmse", "pearson", "skill")
LARGE_METRICS = ("bias", "rmse", "pearson", "skill")
INDICES = ("cwd", "r20", "rx5day", "sdii")
# Skill-score bin widths per aggregation scale: 1 mm/day expressed per unit.
SCALE_BIN = {"daily": 1.0, "monthly": 30.0, "annual": 365.0}
INDEX_BIN = {"cwd": 1.0, "r20": 1.0, "rx5day": 5.0, "sdii": 1.0}


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------- basic metrics

def pearson(a, b) -> float:
    """Pearson correlation; NaN when either series has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(da @ da), float(db @ db)
    if saa <= 0 or sbb <= 0:
        return float("nan")
    return float(np.clip((da @ db) / math.sqrt(saa * sbb), -1.0, 1.0))


def skill_score(a, b, bin_width: float = 1.0) -> float:
    """Perkins skill score: the overlap of two normalised histograms.

    Bins have fixed width, start at the smallest value of either sample and
    a value x falls in bin floor((x - lo) / width).
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise EvalError("skill_score needs two non-empty samples")
    if bin_width <= 0:
        raise EvalError("bin width must be > 0")
    lo = min(a.min(), b.min())
    ia = np.floor((a - lo) / bin_width).astype(np.int64)
    ib = np.floor((b - lo) / bin_width).astype(np.int64)
    nb = int(max(ia.max(), ib.max())) + 1
    ca = np.bincount(ia, minlength=nb)
    cb = np.bincount(ib, minlength=nb)
    # integer cross-multiplied counts: identical samples give exactly 1
    overlap = int(np.minimum(ca * b.size, cb * a.size).sum())
    return overlap / (a.size * b.size)


@dataclass(frozen=True)
class DailyMetrics:
    bias: float
    rmse: float
    pearson: float
    skill: float

    def as_dict(self) -> dict:
        return {"bias": self.bias, "rmse": self.rmse, "pearson": self.pearson,
                "skill": self.skill}


def daily_metrics(pred, obs, bin_width: float = 1.0) -> DailyMetrics:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    obs = np.asarray(obs, dtype=np.float64).ravel()
    if pred.shape != obs.shape:
        raise EvalError(f"series lengths differ: {pred.size} vs {obs.size}")
    if pred.size < 2:
        raise EvalError("need at least 2 aligned values")
    r = pred - obs
    return DailyMetrics(float(pred.mean() - obs.mean()), float(np.sqrt(np.mean(r * r))),
                        pearson(pred, obs), skill_score(pred, obs, bin_width))


def _check_pair(pred: GridStack, obs: GridStack):
    if pred.values.shape != obs.values.shape:
        raise GridError(f"stack shapes differ: {pred.values.shape} vs {obs.values.shape}")
    if np.any(pred.dates != obs.dates):
        raise GridError("stacks cover different dates")
    if not (np.allclose(pred.lats, obs.lats) and np.allclose(pred.lons, obs.lons)):
        raise GridError("stacks are on different grids")


# ------------------------------------------------------------------ aggregation

def _unit_keys(dates, scale):
    dates = np.asarray(dates, dtype="datetime64[D]")
    if scale == "monthly":
        units = dates.astype("datetime64[M]")
        starts = units.astype("datetime64[D]")
        ends = (units + 1).astype("datetime64[D]")
    elif scale == "annual":
        units = dates.astype("datetime64[Y]")
        starts = units.astype("datetime64[D]")
        ends = (units + 1).astype("datetime64[D]")
    else:
        raise EvalError(f"unknown scale {scale!r}")
    return units, (ends - starts).astype(np.int64)


def aggregate(values, dates, scale: str = "monthly"):
    """Sum daily values over calendar months or years.

    ``values`` is (time, ...). Returns (totals, unit labels); units not
    fully covered by ``dates`` are dropped with a warning.
    """
    values = np.asarray(values, dtype=np.float64)
    units, length = _unit_keys(dates, scale)
    if values.shape[0] != units.size:
        raise EvalError("values and dates disagree in length")
    labels, first, counts = np.unique(units, return_index=True, return_counts=True)
    full = counts == length[first]
    if not full.all():
        warnings.warn(f"{int((~full).sum())} partial {scale} unit(s) excluded: "
                      f"{', '.join(str(u) for u in labels[~full])}", stacklevel=2)
    out = np.stack([values[units == u].sum(axis=0) for u in labels[full]]) if full.any() \
        else np.empty((0,) + values.shape[1:])
    return out, labels[full]


def large_scale_metrics(pred: GridStack, obs: GridStack, scale: str) -> dict:
    """Metrics over all (location, unit) pairs pooled together."""
    _check_pair(pred, obs)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        p, _ = aggregate(pred.flat(), pred.dates, scale)
        o, _ = aggregate(obs.flat(), obs.dates, scale)
    if p.size < 2:
        raise EvalError(f"fewer than 2 complete {scale} values")
    m = daily_metrics(p.ravel(), o.ravel(), SCALE_BIN[scale])
    return m.as_dict()


# --------------------------------------------------------------------- ClimDEX

def _series(x):
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise EvalError("empty series")
    return x


def cwd(x) -> int:
    """Longest run of consecutive days with at least 1 mm."""
    wet = _series(x) >= WET_DAY
    best = run = 0
    for w in wet:
        run = run + 1 if w else 0
        best = max(best, run)
    return best


def r20(x) -> int:
    """Number of days with at least 20 mm."""
    return int(np.count_nonzero(_series(x) >= HEAVY_DAY))


def rx5day(x) -> float:
    """Largest 5-day running total; the whole-series total if shorter."""
    x = _series(x)
    if x.size < RX_WINDOW:
        return float(x.sum())
    m = x.size - RX_WINDOW + 1
    # left-to-right window sums; cumsum differences would add rounding noise
    total = x[:m].copy()
    for i in range(1, RX_WINDOW):
        total += x[i:i + m]
    return float(total.max())


def sdii(x) -> float:
    """Total precipitation divided by the number of wet days (>= 1 mm); NaN
    without wet days."""
    x = _series(x)
    n_wet = int(np.count_nonzero(x >= WET_DAY))
    if n_wet == 0:
        return float("nan")
    return float(x.sum() / n_wet)


INDEX_FUNCS = {"cwd": cwd, "r20": r20, "rx5day": rx5day, "sdii": sdii}


def _complete_units(dates, scale):
    units, length = _unit_keys(dates, scale)
    labels, first, counts = np.unique(units, return_index=True, return_counts=True)
    return units, labels[counts == length[first]]


def climdex_table(stack: GridStack, index: str):
    """Index values per complete period, shape (periods, cells), with labels.

    Periods are calendar years, or calendar months for RX5day.
    """
    scale = "monthly" if index == "rx5day" else "annual"
    func = INDEX_FUNCS[index]
    units, labels = _complete_units(stack.dates, scale)
    flat = stack.flat()
    out = np.empty((labels.size, flat.shape[1]))
    for i, u in enumerate(labels):
        sel = units == u
        for c in range(flat.shape[1]):
            out[i, c] = func(flat[sel, c])
    return out, labels


@dataclass
class ClimdexReport:
    """Index values per location-period for both stacks, plus the summary
    correlation and skill score of each index over all pairs."""

    rows: list = field(default_factory=list)       # dicts: index, cell, lat, lon, period, obs, pred
    summary: dict = field(default_factory=dict)    # index -> {"pearson", "skill", "n", "flag"}


def climdex_compare(pred: GridStack, obs: GridStack) -> ClimdexReport:
    _check_pair(pred, obs)
    _, years = _complete_units(obs.dates, "annual")
    if years.size < 2:
        raise EvalError("climdex_compare needs at least 2 complete years")
    lat_idx, lon_idx = np.meshgrid(np.arange(obs.lats.size), np.arange(obs.lons.size),
                                   indexing="ij")
    lat_of = obs.lats[lat_idx.ravel()]
    lon_of = obs.lons[lon_idx.ravel()]
    report = ClimdexReport()
    for index in INDICES:
        po, labels = climdex_table(obs, index)
        pp, _ = climdex_table(pred, index)
        for i, lab in enumerate(labels):
            for c in range(po.shape[1]):
                report.rows.append({"index": index, "cell": c, "lat": float(lat_of[c]),
                                    "lon": float(lon_of[c]), "period": str(lab),
                                    "obs": float(po[i, c]), "pred": float(pp[i, c])})
        ok = ~(np.isnan(po) | np.isnan(pp))
        a, b = pp[ok], po[ok]
        if a.size >= 2:
            r = pearson(a, b)
            s = skill_score(a, b, INDEX_BIN[index])
        else:
            r = s = float("nan")
        flag = "zero_variance" if a.size >= 2 and math.isnan(r) else ""
        if a.size < 2:
            flag = "too_few_values"
        report.summary[index] = {"pearson": r, "skill": s, "n": int(a.size), "flag": flag}
    return report


# ---------------------------------------------------------------------- reports

@dataclass
class EvalReport:
    """Per-location daily metrics by season plus pooled large-scale metrics."""

    method: str
    locations: list                                 # (lat, lon) per cell
    daily: dict = field(default_factory=dict)       # season -> metric -> per-cell list
    daily_mean: dict = field(default_factory=dict)  # season -> metric -> spatial mean
    large_scale: dict = field(default_factory=dict) # scale -> metric -> value


def _nanmean(values):
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else float("nan")


def evaluate(pred: GridStack, obs: GridStack, method: str = "") -> EvalReport:
    """Daily metrics per cell for the whole period and each season, spatial
    means that skip missing correlations, and pooled monthly/annual metrics."""
    _check_pair(pred, obs)
    if np.isnan(pred.values).any() or np.isnan(obs.values).any():
        raise EvalError("stacks contain missing values")
    lat_idx, lon_idx = np.meshgrid(np.arange(obs.lats.size), np.arange(obs.lons.size),
                                   indexing="ij")
    locations = [(float(obs.lats[i]), float(obs.lons[j]))
                 for i, j in zip(lat_idx.ravel(), lon_idx.ravel())]
    report = EvalReport(method, locations)
    seasons = season_of(obs.dates)
    P, O = pred.flat(), obs.flat()
    for label in ("ALL",) + SEASONS:
        sel = np.ones(seasons.size, bool) if label == "ALL" else seasons == label
        if sel.sum() < 2:
            continue
        per = [daily_metrics(P[sel, c], O[sel, c]).as_dict() for c in range(P.shape[1])]
        report.daily[label] = {m: [p[m] for p in per] for m in DAILY_METRICS}
        report.daily_mean[label] = {m: _nanmean(report.daily[label][m]) for m in DAILY_METRICS}
    for scale in ("monthly", "annual"):
        try:
            report.large_scale[scale] = large_scale_metrics(pred, obs, scale)
        except EvalError:
            report.large_scale[scale] = {m: float("nan") for m in LARGE_METRICS}
    return report


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_json_safe(obj), indent=1, sort_keys=True) + "\n")
    return path


METRIC_COLUMNS = ("method", "scale", "season", "location", "lat", "lon", "metric", "value")
CLIMDEX_COLUMNS = ("method", "index", "location", "lat", "lon", "period", "obs", "pred")


def metric_rows(report: EvalReport) -> list:
    rows = []
    for season, metrics in report.daily.items():
        for c, (la, lo) in enumerate(report.locations):
            for m in DAILY_METRICS:
                rows.append((report.method, "daily", season, str(c), la, lo, m, metrics[m][c]))
        for m in DAILY_METRICS:
            rows.append((report.method, "daily", season, "mean", "", "", m,
                         report.daily_mean[season][m]))
    for scale, metrics in report.large_scale.items():
        for m in LARGE_METRICS:
            rows.append((report.method, scale, "ALL", "pooled", "", "", m, metrics[m]))
    return rows


def write_reports(report: EvalReport, climdex: ClimdexReport, outdir) -> dict:
    """metrics.csv, climdex.csv and summary.json under ``outdir``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": outdir / "metrics.csv", "climdex": outdir / "climdex.csv",
             "summary": outdir / "summary.json"}
    with open(paths["metrics"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in metric_rows(report):
            w.writerow([_fmt(v) for v in row])
    with open(paths["climdex"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CLIMDEX_COLUMNS)
        for r in climdex.rows:
            w.writerow([report.method, r["index"], str(r["cell"]), _fmt(r["lat"]), _fmt(r["lon"]),
                        r["period"], _fmt(r["obs"]), _fmt(r["pred"])])
    write_json(summary_dict(report, climdex), paths["summary"])
    return paths


def summary_dict(report: EvalReport, climdex: ClimdexReport) -> dict:
    return {"method": report.method, "daily": report.daily_mean,
            "large_scale": report.large_scale,
            "climdex": {k: {"pearson": v["pearson"], "skill": v["skill"], "n": v["n"],
                            "flag": v["flag"]} for k, v in climdex.summary.items()}}


# ---------------------------------------------------------------------- compare

GAP = "NA"
SUMMARY_KEYS = ("method", "daily", "large_scale", "climdex")


def summary_entries(summary: dict) -> dict:
    """Flatten a summary into {(table, metric, scope): value}."""
    missing = [k for k in SUMMARY_KEYS if k not in summary]
    if missing:
        raise EvalError(f"summary for {summary.get('method', '?')!r} lacks {missing}")
    out = {}
    for season, metrics in summary["daily"].items():
        for m, v in metrics.items():
            out[("daily", m, season)] = v
    for scale, metrics in summary["large_scale"].items():
        for m, v in metrics.items():
            out[("large_scale", m, scale)] = v
    for index, metrics in summary["climdex"].items():
        for m in ("pearson", "skill"):
            if m in metrics:
                out[("climdex", m, index)] = metrics[m]
    return out


def compare_summaries(summaries) -> list:
    """Rows (table, metric, scope, method, value) over the union of keys,
    grouped per key with one row per method. Missing values become ``GAP``."""
    summaries = list(summaries)
    if len(summaries) < 2:
        raise EvalError("compare needs at least 2 evaluated methods")
    entries = [(s["method"] if "method" in s else "?", summary_entries(s)) for s in summaries]
    methods = [m for m, _ in entries]
    if len(set(methods)) != len(methods):
        raise EvalError(f"duplicate methods in compare: {methods}")
    keys = sorted(set().union(*(e.keys() for _, e in entries)))
    rows = []
    for key in keys:
        for method, e in entries:
            v = e.get(key)
            rows.append(key + (method, GAP if v is None else _fmt(v)))
    return rows


def write_compare(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("table", "metric", "scope", "method", "value"))
        w.writerows(rows)
    return path
