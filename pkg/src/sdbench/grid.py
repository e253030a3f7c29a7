"""Gridded daily fields, the GSF on-disk format, calendar bookkeeping and
regridding primitives (block-mean upscaling, footprint remapping,
nearest-neighbour gap filling and bilinear interpolation).
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

SEASONS = ("DJF", "MAM", "JJA", "SON")
_SEASON_OF_MONTH = {12: "DJF", 1: "DJF", 2: "DJF", 3: "MAM", 4: "MAM", 5: "MAM",
                    6: "JJA", 7: "JJA", 8: "JJA", 9: "SON", 10: "SON", 11: "SON"}
N_SLOTS = 366
PRECIP_NAMES = ("pr", "precip")


class GridError(ValueError):
    """Raised for malformed stacks, files or incompatible grids."""


def _as_dates(dates) -> np.ndarray:
    return np.asarray(dates, dtype="datetime64[D]")


def _check_monotone(coord: np.ndarray, label: str) -> None:
    if coord.ndim != 1 or coord.size == 0:
        raise GridError(f"{label} must be a non-empty 1-D vector")
    if not np.all(np.isfinite(coord)):
        raise GridError(f"{label} contains non-finite values")
    if coord.size > 1:
        d = np.diff(coord)
        if not (np.all(d > 0) or np.all(d < 0)):
            raise GridError(f"{label} is not strictly monotone")


@dataclass(frozen=True)
class GridStack:
    """Daily gridded field with shape (time, lat, lon).

    Missing cells are NaN. ``name``/``level`` identify the variable for
    design-matrix bookkeeping; stacks named ``pr`` are precipitation and must
    be non-negative.
    """

    values: np.ndarray
    lats: np.ndarray
    lons: np.ndarray
    dates: np.ndarray
    units: str = "mm/day"
    name: str = "pr"
    level: str = "sfc"

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        lats = np.array(self.lats, dtype=np.float64)
        lons = np.array(self.lons, dtype=np.float64)
        dates = np.array(_as_dates(self.dates))
        _check_monotone(lats, "lats")
        _check_monotone(lons, "lons")
        if dates.ndim != 1 or dates.size == 0:
            raise GridError("dates must be a non-empty 1-D vector")
        if dates.size > 1 and np.any(np.diff(dates).astype(np.int64) != 1):
            raise GridError("dates must be strictly increasing with a daily step")
        if values.shape != (dates.size, lats.size, lons.size):
            raise GridError(
                f"values shape {values.shape} does not match "
                f"(dates, lats, lons) = {(dates.size, lats.size, lons.size)}")
        if self.name in PRECIP_NAMES and np.any(values[np.isfinite(values)] < 0):
            raise GridError("precipitation stack contains negative values")
        for arr in (values, lats, lons, dates):
            arr.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "lats", lats)
        object.__setattr__(self, "lons", lons)
        object.__setattr__(self, "dates", dates)

    @property
    def shape(self):
        return self.values.shape

    @property
    def ncells(self) -> int:
        return self.lats.size * self.lons.size

    def with_values(self, values, **changes) -> "GridStack":
        kw = dict(lats=self.lats, lons=self.lons, dates=self.dates, units=self.units,
                  name=self.name, level=self.level)
        kw.update(changes)
        return GridStack(values=values, **kw)

    def between(self, start, end) -> "GridStack":
        """Contiguous sub-period, both ends inclusive."""
        sel = (self.dates >= np.datetime64(start, "D")) & (self.dates <= np.datetime64(end, "D"))
        if not sel.any():
            raise GridError(f"no dates between {start} and {end}")
        return GridStack(self.values[sel], self.lats, self.lons, self.dates[sel],
                         self.units, self.name, self.level)

    def flat(self) -> np.ndarray:
        """Values as (time, cells) in lat-major order."""
        return self.values.reshape(self.values.shape[0], -1)


# --------------------------------------------------------------------- calendar

def day_slots(dates) -> np.ndarray:
    """Map dates onto a 366-slot year in which Feb 29 is slot 60.

    Non-leap years skip slot 60, so Mar 1 is always slot 61 and Dec 31 is
    always slot 366.
    """
    dates = _as_dates(dates)
    years = dates.astype("datetime64[Y]")
    doy = (dates - years.astype("datetime64[D]")).astype(np.int64) + 1
    y = years.astype(np.int64) + 1970
    leap = (y % 4 == 0) & ((y % 100 != 0) | (y % 400 == 0))
    return np.where(~leap & (doy >= 60), doy + 1, doy)


def slot_window(slots, doy: int, window_days: int = 15) -> np.ndarray:
    """Boolean mask of slots within +/- window of ``doy`` on the circular year."""
    if not 1 <= doy <= N_SLOTS:
        raise GridError(f"doy must lie in 1..{N_SLOTS}, got {doy}")
    d = np.abs(np.asarray(slots) - doy)
    return np.minimum(d, N_SLOTS - d) <= window_days


def day_of_year_pool(stack: GridStack, doy: int, window_days: int = 15) -> np.ndarray:
    """All values whose slot lies within the window, shape (samples, lat, lon)."""
    return stack.values[slot_window(day_slots(stack.dates), doy, window_days)]


class SeasonMask(NamedTuple):
    label: str
    mask: np.ndarray


def season_of(dates) -> np.ndarray:
    months = _as_dates(dates).astype("datetime64[M]").astype(np.int64) % 12 + 1
    return np.array([_SEASON_OF_MONTH[m] for m in months])


def season_split(dates) -> tuple[SeasonMask, ...]:
    labels = season_of(dates)
    return tuple(SeasonMask(s, labels == s) for s in SEASONS)


def years_of(dates) -> np.ndarray:
    return _as_dates(dates).astype("datetime64[Y]").astype(np.int64) + 1970


def months_of(dates) -> np.ndarray:
    return _as_dates(dates).astype("datetime64[M]").astype(np.int64) % 12 + 1


# --------------------------------------------------------------------- file i/o

def save_grid_stack(stack: GridStack, path) -> Path:
    """Write ``stack`` as a GSF metadata file plus a little-endian float32 payload."""
    path = Path(path)
    if path.suffix == ".csv":
        return save_grid_csv(stack, path)
    payload = path.with_suffix(".f32")
    meta = {
        "dims": list(stack.values.shape),
        "lats": [float(v) for v in stack.lats],
        "lons": [float(v) for v in stack.lons],
        "start_date": str(stack.dates[0]),
        "units": stack.units,
        "variable": stack.name,
        "level": stack.level,
        "payload": payload.name,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    stack.values.astype("<f4").tofile(payload)
    path.write_text(json.dumps(meta, indent=1) + "\n")
    return path


def load_grid_stack(path) -> GridStack:
    path = Path(path)
    if path.suffix == ".csv":
        return load_grid_csv(path)
    try:
        meta = json.loads(path.read_text())
        dims = [int(v) for v in meta["dims"]]
        lats = np.asarray(meta["lats"], dtype=np.float64)
        lons = np.asarray(meta["lons"], dtype=np.float64)
        start = np.datetime64(meta["start_date"], "D")
        payload = path.parent / meta["payload"]
    except (KeyError, TypeError, ValueError) as exc:
        raise GridError(f"malformed GSF metadata in {path}: {exc}") from exc
    if len(dims) != 3 or dims[1] != lats.size or dims[2] != lons.size:
        raise GridError(f"dims {dims} disagree with coordinate lengths "
                        f"({lats.size}, {lons.size})")
    raw = np.fromfile(payload, dtype="<f4")
    if raw.size != int(np.prod(dims)):
        raise GridError(f"payload holds {raw.size} values, dims imply {int(np.prod(dims))}")
    dates = start + np.arange(dims[0])
    return GridStack(raw.reshape(dims).astype(np.float64), lats, lons, dates,
                     units=meta.get("units", ""), name=meta.get("variable", "pr"),
                     level=str(meta.get("level", "sfc")))


CSV_MAX_CELLS = 10**6


def save_grid_csv(stack: GridStack, path) -> Path:
    if stack.values.size > CSV_MAX_CELLS:
        raise GridError("CSV format is limited to 1e6 cells")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "lat", "lon", "value"])
        for t, d in enumerate(stack.dates):
            for i, la in enumerate(stack.lats):
                for j, lo in enumerate(stack.lons):
                    w.writerow([str(d), repr(float(la)), repr(float(lo)),
                                repr(float(stack.values[t, i, j]))])
    return path


def load_grid_csv(path, units: str = "mm/day", name: str = "pr", level: str = "sfc") -> GridStack:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"date", "lat", "lon", "value"}:
            raise GridError(f"{path}: expected columns date,lat,lon,value")
        for r in reader:
            rows.append((np.datetime64(r["date"], "D"), float(r["lat"]),
                         float(r["lon"]), float(r["value"])))
    if not rows:
        raise GridError(f"{path}: no rows")
    if len(rows) > CSV_MAX_CELLS:
        raise GridError("CSV format is limited to 1e6 cells")
    dates = np.unique(np.array([r[0] for r in rows]))
    lats = np.unique([r[1] for r in rows])
    lons = np.unique([r[2] for r in rows])
    values = np.full((dates.size, lats.size, lons.size), np.nan)
    seen = np.zeros(values.shape, dtype=bool)
    for d, la, lo, v in rows:
        idx = (np.searchsorted(dates, d), np.searchsorted(lats, la), np.searchsorted(lons, lo))
        values[idx] = v
        seen[idx] = True
    if not seen.all():
        raise GridError(f"{path}: rows do not cover the full date x lat x lon grid")
    return GridStack(values, lats, lons, dates, units=units, name=name, level=level)


# ------------------------------------------------------------------ regridding

def upscale_block_mean(fine: GridStack, factor_lat: int, factor_lon: int) -> GridStack:
    """Coarsen by averaging non-missing cells of each factor_lat x factor_lon block."""
    if factor_lat < 1 or factor_lon < 1:
        raise GridError("upscaling factors must be >= 1")
    t, ny, nx = fine.shape
    if ny % factor_lat or nx % factor_lon:
        raise GridError(f"grid {ny}x{nx} is not divisible by ({factor_lat}, {factor_lon})")
    blocks = fine.values.reshape(t, ny // factor_lat, factor_lat, nx // factor_lon, factor_lon)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        coarse = np.nanmean(blocks, axis=(2, 4))
    lats = fine.lats.reshape(-1, factor_lat).mean(axis=1)
    lons = fine.lons.reshape(-1, factor_lon).mean(axis=1)
    return fine.with_values(coarse, lats=lats, lons=lons)


def _nearest_index(coord: np.ndarray, targets: np.ndarray) -> np.ndarray:
    # ties go to the lower index
    dist = np.abs(targets[:, None] - coord[None, :])
    return np.argmin(dist, axis=1)


def remap_to_grid(fine: GridStack, lats, lons) -> GridStack:
    """Average fine cells into the coarse cell whose centre is nearest.

    Coarse cells receiving no fine cell are NaN. For aligned grids whose
    dimensions are integer multiples this equals :func:`upscale_block_mean`.
    """
    lats = np.asarray(lats, dtype=np.float64)
    lons = np.asarray(lons, dtype=np.float64)
    ii = _nearest_index(lats, fine.lats)
    jj = _nearest_index(lons, fine.lons)
    out = np.full((fine.shape[0], lats.size, lons.size), np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for i in np.unique(ii):
            for j in np.unique(jj):
                block = fine.values[:, ii == i][:, :, jj == j]
                if block.size:
                    out[:, i, j] = np.nanmean(block.reshape(block.shape[0], -1), axis=1)
    return fine.with_values(out, lats=lats, lons=lons)


def nearest_fill_index(missing: np.ndarray) -> np.ndarray:
    """For each cell, the flat index of the nearest non-missing cell.

    Distance is Euclidean in grid-index space; ties resolve to the
    lexicographically smallest (lat index, lon index).
    """
    ny, nx = missing.shape
    ok = np.flatnonzero(~missing.ravel())
    if ok.size == 0:
        raise GridError("cannot fill an all-missing field")
    gi, gj = np.divmod(np.arange(ny * nx), nx)
    oi, oj = np.divmod(ok, nx)
    d2 = (gi[:, None] - oi[None, :]) ** 2 + (gj[:, None] - oj[None, :]) ** 2
    return ok[np.argmin(d2, axis=1)]


def fill_missing_nearest(values: np.ndarray) -> np.ndarray:
    """Nearest-neighbour fill of NaN cells in a (time, lat, lon) array."""
    values = np.asarray(values, dtype=np.float64)
    t, ny, nx = values.shape
    flat = values.reshape(t, -1)
    miss = np.isnan(flat)
    if not miss.any():
        return values.copy()
    out = flat.copy()
    patterns, inverse = np.unique(miss, axis=0, return_inverse=True)
    inverse = np.ravel(inverse)
    for p, pattern in enumerate(patterns):
        if not pattern.any():
            continue
        rows = np.flatnonzero(inverse == p)
        src = nearest_fill_index(pattern.reshape(ny, nx))
        out[rows] = flat[rows][:, src]
    return out.reshape(t, ny, nx)


def _axis_weights(coord: np.ndarray, targets: np.ndarray, edge: str, label: str):
    """Lower/upper node indices and fractional weight along one axis."""
    order = np.argsort(coord)
    c = coord[order]
    targets = np.asarray(targets, dtype=np.float64)
    if c.size == 1:
        if edge == "raise" and np.any(np.abs(targets - c[0]) > 1e-9):
            raise GridError(f"target {label} outside the single-node coarse axis")
        zeros = np.zeros(targets.size, dtype=np.int64)
        return order[zeros], order[zeros], np.zeros(targets.size)
    tol = 1e-9 * max(1.0, float(np.abs(c).max()))
    outside = (targets < c[0] - tol) | (targets > c[-1] + tol)
    if edge == "raise" and outside.any():
        raise GridError(f"target {label} outside the coarse bounding box "
                        f"[{c[0]}, {c[-1]}]")
    k = np.clip(np.searchsorted(c, targets, side="right") - 1, 0, c.size - 2)
    frac = (targets - c[k]) / (c[k + 1] - c[k])
    if edge == "clamp":
        frac = np.clip(frac, 0.0, 1.0)
    elif edge == "raise":
        frac = np.clip(frac, 0.0, 1.0)  # only absorbs the tolerance band
    return order[k], order[k + 1], frac


def bilinear_interpolate(coarse: GridStack, target_lats, target_lons,
                         edge: str = "raise") -> GridStack:
    """Bilinear interpolation onto a rectilinear target grid.

    NaN coarse cells are first filled from the nearest non-missing cell.
    ``edge`` controls targets outside the coarse node box: ``"raise"``,
    ``"clamp"`` (hold the edge value) or ``"linear"`` (extrapolate).
    """
    if edge not in ("raise", "clamp", "linear"):
        raise ValueError(f"unknown edge mode {edge!r}")
    target_lats = np.asarray(target_lats, dtype=np.float64)
    target_lons = np.asarray(target_lons, dtype=np.float64)
    values = fill_missing_nearest(coarse.values)
    i0, i1, ty = _axis_weights(coarse.lats, target_lats, edge, "latitude")
    j0, j1, tx = _axis_weights(coarse.lons, target_lons, edge, "longitude")
    ty = ty[None, :, None]
    tx = tx[None, None, :]
    v00 = values[:, i0][:, :, j0]
    v01 = values[:, i0][:, :, j1]
    v10 = values[:, i1][:, :, j0]
    v11 = values[:, i1][:, :, j1]
    out = ((1 - ty) * (1 - tx) * v00 + (1 - ty) * tx * v01
           + ty * (1 - tx) * v10 + ty * tx * v11)
    return coarse.with_values(out, lats=target_lats, lons=target_lons)
