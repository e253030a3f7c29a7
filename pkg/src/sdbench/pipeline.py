"""Experiment orchestration: configuration, data split, seasonal training,
downscaling with provenance, evaluation and comparison.

Directory layout under ``out_dir``::

    data/        manifest.json, covariates/*.json, obs/pr.json, model/pr.json, truth.json
    models/<method>/<season>.json   one bundle per season, plus train_log.json
    projections/<method>/pr.json    GSF stack over the test years, plus provenance.csv
    reports/<method>/               metrics.csv, climdex.csv, summary.json
    compare.csv
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import cnn
from .audit import DateAudit
from .bcsd import (ErrorModel, QuantileMapSet, ScalingFactorSet, apply_bias_correction,
                   bcsd_downscale, bcsd_mssl_fit, fit_quantile_maps, fit_scaling_factors,
                   season_slots)
from .eval import climdex_compare, compare_summaries, evaluate, write_compare, write_reports
from .grid import (SEASONS, GridError, GridStack, load_grid_stack, remap_to_grid,
                   save_grid_stack, season_of, years_of)
from .linear import (AsdModel, HyperParams, WeightMatrix, asd_fit, asd_predict,
                     combine_occurrence_amount, ebic_select, elasticnet_fit, grid_search_cv,
                     l1_logistic_fit, predict_proba)
from .mssl import MsslResult, SolverSettings, mssl_fit, mssl_predict
from .preprocess import build_design_matrix, standardize_apply, standardize_fit
from .store import load_bundle, save_bundle
from .synth import SynthConfig, synth_dataset

log = logging.getLogger(__name__)

METHODS = ("bcsd", "pcaols", "pcasvr", "elnet", "mssl", "bcsd-mssl", "cnn")
_LOG_GRID = [float(v) for v in np.logspace(-3, 1, 7)]


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    """Everything a run needs; JSON keys match the field names.

    ``data_dir`` defaults to ``<out_dir>/data``. MSSL penalties ``*_frac``
    are multiplied by the number of training days, since the MSSL loss is a
    sum rather than a mean over days.
    """

    out_dir: str = "sdbench-run"
    data_dir: str | None = None
    method: str = "bcsd"
    methods: list = field(default_factory=lambda: list(METHODS))
    seed: int = 0
    train_years: list = field(default_factory=lambda: [1985, 1999])
    test_years: list = field(default_factory=lambda: [2000, 2004])
    synth: dict = field(default_factory=dict)
    folds: int = 5
    pca_frac: float = 0.98
    elnet_grid: dict = field(default_factory=lambda: {"lam1": list(_LOG_GRID),
                                                      "lam2": list(_LOG_GRID)})
    clf_grid: dict = field(default_factory=lambda: {"clf_lam1": [1e-3, 1e-2, 1e-1]})
    svr_C: float = 1.0
    svr_eps: float = 0.1
    mssl_lam: list = field(default_factory=lambda: [1.0])
    mssl_gamma_frac: list = field(default_factory=lambda: list(_LOG_GRID))
    mssl_clf_lam: float = 1.0
    mssl_clf_gamma_frac: float = 0.01
    cnn: dict = field(default_factory=lambda: {"epochs": 50, "lr": 1e-3, "halve_every": 50,
                                               "batch_size": 32})

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}")
        for name in ("train_years", "test_years"):
            r = getattr(self, name)
            if len(r) != 2 or int(r[0]) > int(r[1]):
                raise ConfigError(f"{name} must be [first, last], got {r}")
        (a, b), (c, d) = self.train_years, self.test_years
        if not (b < c or d < a):
            raise ConfigError(f"train years {a}-{b} overlap test years {c}-{d}")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        SynthConfig(**{"seed": self.seed, **self.synth})

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir) if self.data_dir else Path(self.out_dir) / "data"

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**{"seed": self.seed, **self.synth})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path=None, **overrides) -> "ExperimentConfig":
        d = {}
        if path is not None:
            try:
                d = json.loads(Path(path).read_text())
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(d, dict):
                raise ConfigError("config must be a JSON object")
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)


# ------------------------------------------------------------------------ data

@dataclass
class Dataset:
    covariates: list
    obs: GridStack
    model_pr: GridStack
    manifest: dict


def _cov_file(stack: GridStack) -> str:
    return f"covariates/{stack.name}_{stack.level}.json"


def cmd_synth(cfg: ExperimentConfig) -> Path:
    """Write the synthetic dataset for ``cfg`` under ``cfg.data_path``."""
    scfg = cfg.synth_config()
    data = synth_dataset(scfg)
    root = cfg.data_path
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PipelineError(f"cannot create {root}: {exc}") from exc
    files = []
    for stack in data.covariates:
        save_grid_stack(stack, root / _cov_file(stack))
        files.append(_cov_file(stack))
    save_grid_stack(data.fine_obs, root / "obs" / "pr.json")
    save_grid_stack(data.model_pr, root / "model" / "pr.json")
    dm = build_design_matrix(data.covariates)
    save_bundle({"amount": data.truth.to_dict(), "occurrence": data.occurrence.to_dict(),
                 "columns": [c.label() for c in dm.columns]}, root / "truth.json")
    manifest = {"synth": scfg.to_dict(), "covariates": files, "obs": "obs/pr.json",
                "model_pr": "model/pr.json", "truth": "truth.json"}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise PipelineError(f"no dataset at {root} (run 'sdbench synth' first): {exc}") from exc
    covs = [load_grid_stack(root / f) for f in manifest["covariates"]]
    return Dataset(covs, load_grid_stack(root / manifest["obs"]),
                   load_grid_stack(root / manifest["model_pr"]), manifest)


def _year_mask(dates, years):
    y = years_of(dates)
    return (y >= int(years[0])) & (y <= int(years[1]))


def _period(stack: GridStack, years) -> GridStack:
    return stack.between(f"{int(years[0]):04d}-01-01", f"{int(years[1]):04d}-12-31")


def covariate_grids(covariates) -> np.ndarray:
    """(time, channels, lat, lon) with channels in design-matrix order."""
    covs = sorted(covariates, key=lambda s: (s.name, s.level))
    return np.stack([c.values for c in covs], axis=1)


# ----------------------------------------------------------------- method fits

def _as_state(model) -> dict:
    return model.to_dict()


def _fit_asd(method, X, Y, dates, cfg, audit, season):
    ctx = f"{method}/{season}"
    audit.record(f"{ctx}/fit+pca", dates)
    info = {}
    if method == "pcaols":
        model = asd_fit(X, Y, "logistic", "ols", pca_frac=cfg.pca_frac, season=season)
    elif method == "pcasvr":
        hp = HyperParams(C=cfg.svr_C, eps=cfg.svr_eps)
        model = asd_fit(X, Y, "svc", "svr", hp, pca_frac=cfg.pca_frac, season=season)
    else:
        means, scales = standardize_fit(X)
        Z = standardize_apply(X, means, scales)
        hypers = []
        for k in range(Y.shape[1]):
            wet = Y[:, k] >= HyperParams().wet_cutoff
            reg = grid_search_cv(
                lambda A, y, lam1, lam2: elasticnet_fit(A, y, lam1, lam2),
                lambda m, A: m.predict(A), Z[wet], Y[wet, k], cfg.elnet_grid, cfg.folds,
                dates=dates[wet], on_fold=audit.fold_hook(f"{ctx}/reg{k}"))
            clf = grid_search_cv(
                lambda A, y, clf_lam1: l1_logistic_fit(A, y, clf_lam1),
                lambda m, A: predict_proba(A, m), Z, wet.astype(float), cfg.clf_grid,
                cfg.folds, loss="logloss", dates=dates, on_fold=audit.fold_hook(f"{ctx}/clf{k}"))
            hypers.append(HyperParams(lam1=reg.best["lam1"], lam2=reg.best["lam2"],
                                      clf_lam1=clf.best["clf_lam1"]))
        info["hyper"] = [h.to_dict() for h in hypers]
        model = asd_fit(X, Y, "l1-logistic", "elasticnet", hypers, season=season)
    return _as_state(model), info


def _predict_asd(state, X):
    return asd_predict(AsdModel.from_dict(state), X)


def _mssl_settings():
    return SolverSettings()


def _select_mssl(Z, Y, lams, gamma_fracs, settings):
    n = Z.shape[0]
    grid = {"lam": [float(v) for v in lams], "gamma": [float(f * n) for f in gamma_fracs]}
    sel = ebic_select(lambda A, B, lam, gamma: mssl_fit(A, B, lam, gamma, settings),
                      lambda r: r.weights.coef != 0, Z, Y, grid)
    return mssl_fit(Z, Y, sel.best["lam"], sel.best["gamma"], settings), sel


def _flags_of(res: MsslResult) -> dict:
    return {"converged": res.converged, "outer_iterations": len(res.history), "flags": res.flags}


def _fit_mssl(X, Y, dates, cfg, audit, season):
    audit.record(f"mssl/{season}/fit", dates)
    st = _mssl_settings()
    means, scales = standardize_fit(X)
    Z = standardize_apply(X, means, scales)
    wet = (Y >= HyperParams().wet_cutoff).astype(float)
    # Tasks share one design matrix, so the amount model sees every day and
    # learns E[Y 1{wet} | x]; prediction divides by P(wet | x) on gated days.
    reg, sel = _select_mssl(Z, Y * wet, cfg.mssl_lam, cfg.mssl_gamma_frac, st)
    clf = mssl_fit(Z, wet, cfg.mssl_clf_lam, cfg.mssl_clf_gamma_frac * Z.shape[0], st,
                   loss="logistic")
    info = {"reg": {**_flags_of(reg), "lam": reg.lam, "gamma": reg.gamma},
            "clf": {**_flags_of(clf), "lam": clf.lam, "gamma": clf.gamma}}
    state = {"means": means, "scales": scales, "reg": reg.to_dict(), "clf": clf.to_dict()}
    return state, info


def _predict_mssl(state, X):
    Z = standardize_apply(X, state["means"], state["scales"])
    prob = mssl_predict(MsslResult.from_dict(state["clf"]), Z)
    wet_part = mssl_predict(MsslResult.from_dict(state["reg"]), Z)
    # gated days have prob >= 0.5, so the division at most doubles
    amount = wet_part / np.maximum(prob, 0.5)
    return combine_occurrence_amount(prob, amount)[0]


def _maps_state(maps: QuantileMapSet) -> dict:
    return {"doys": [int(v) for v in maps.doys], "model": list(maps.model), "obs": list(maps.obs),
            "valid": [bool(v) for v in maps.valid], "lats": maps.lats, "lons": maps.lons,
            "window": maps.window}


def _maps_from(d) -> QuantileMapSet:
    return QuantileMapSet(np.asarray(d["doys"], dtype=np.int64), tuple(d["model"]),
                          tuple(d["obs"]), np.asarray(d["valid"], dtype=bool),
                          d["lats"], d["lons"], int(d["window"]))


def _factors_state(f: ScalingFactorSet) -> dict:
    return {"doys": [int(v) for v in f.doys], "factors": f.factors, "lats": f.lats,
            "lons": f.lons, "window": f.window}


def _factors_from(d) -> ScalingFactorSet:
    return ScalingFactorSet(np.asarray(d["doys"], dtype=np.int64), d["factors"], d["lats"],
                            d["lons"], int(d["window"]))


def _fit_bcsd_season(model_tr: GridStack, obs_tr: GridStack, season, audit, ctx):
    audit.record(f"{ctx}/quantile-pools", model_tr.dates)
    slots = season_slots(season)
    obs_coarse = remap_to_grid(obs_tr, model_tr.lats, model_tr.lons)
    maps = fit_quantile_maps(model_tr, obs_coarse, doys=slots)
    corrected = apply_bias_correction(model_tr, maps)
    factors = fit_scaling_factors(obs_tr, corrected, doys=slots)
    return maps, factors


def _fit_bcsd(model_tr, obs_tr, cfg, audit, season):
    maps, factors = _fit_bcsd_season(model_tr, obs_tr, season, audit, f"bcsd/{season}")
    info = {"slots": len(maps.doys), "valid_cells": int(maps.valid.sum())}
    return {"maps": _maps_state(maps), "factors": _factors_state(factors)}, info


def _fit_bcsd_mssl(model_tr, obs_tr, X, dates, cfg, audit, season):
    ctx = f"bcsd-mssl/{season}"
    maps, factors = _fit_bcsd_season(model_tr, obs_tr, season, audit, ctx)
    rows = season_of(model_tr.dates) == season
    audit.record(f"{ctx}/error-fit", model_tr.dates[rows])
    bc = bcsd_downscale(model_tr, maps, factors)
    st = _mssl_settings()
    err = bc.flat()[rows] - obs_tr.flat()[rows]
    means, scales = standardize_fit(X[rows])
    Z = standardize_apply(X[rows], means, scales)
    _, sel = _select_mssl(Z, err, cfg.mssl_lam, cfg.mssl_gamma_frac, st)
    em = bcsd_mssl_fit(bc, obs_tr, X, sel.best["lam"], sel.best["gamma"], st, rows=rows)
    info = {"error_model": {**_flags_of(em.mssl), "lam": em.mssl.lam, "gamma": em.mssl.gamma}}
    return {"maps": _maps_state(maps), "factors": _factors_state(factors),
            "means": em.means, "scales": em.scales, "mssl": em.mssl.to_dict()}, info


CNN_HEADS = (("clf", "sigmoid", "logloss"), ("reg", "linear", "mse"))


def _wet_moments(Y, wet):
    n = np.maximum(wet.sum(axis=0), 1.0)
    mean = (Y * wet).sum(axis=0) / n
    var = (((Y - mean) ** 2) * wet).sum(axis=0) / np.maximum(n - 1, 1.0)
    return mean, np.where(var > 1e-12, np.sqrt(var), 1.0)


def _fit_cnn(grids, Y, dates, cfg, audit, season):
    audit.record(f"cnn/{season}/fit", dates)
    means = grids.mean(axis=0)
    scales = grids.std(axis=0, ddof=1)
    scales = np.where(scales > 1e-12, scales, 1.0)
    x = (grids - means) / scales
    wet = (Y >= HyperParams().wet_cutoff).astype(float)
    _, C, H, W = grids.shape
    state = {"means": means, "scales": scales}
    info = {}
    for i, (name, head, loss) in enumerate(CNN_HEADS):
        spec = cnn.CnnSpec(H, W, C, Y.shape[1], head=head)
        settings = cnn.TrainSettings(seed=cfg.seed * 1000 + SEASONS.index(season) * 10 + i,
                                     **cfg.cnn)
        if name == "clf":
            res = cnn.train(spec, x, wet, settings, loss=loss)
        else:
            # wet-day amounts standardised per location so the linear head
            # starts near the right scale
            y_mean, y_scale = _wet_moments(Y, wet)
            state["y_mean"], state["y_scale"] = y_mean, y_scale
            res = cnn.train(spec, x, (Y - y_mean) / y_scale, settings, loss=loss, weight=wet)
        state[name] = {"spec": spec.to_dict(), "params": res.params, "settings": settings.to_dict()}
        info[name] = {"final_loss": res.losses[-1], "epochs": len(res.losses)}
    return state, info


def _predict_cnn(state, grids):
    x = (grids - state["means"]) / state["scales"]
    out = {}
    for name, _, _ in CNN_HEADS:
        spec = cnn.CnnSpec(**state[name]["spec"])
        out[name] = cnn.predict(spec, state[name]["params"], x)
    amount = out["reg"] * state["y_scale"] + state["y_mean"]
    return combine_occurrence_amount(out["clf"], amount)[0]


# ----------------------------------------------------------------- commands

def _model_dir(cfg, method) -> Path:
    return cfg.out_path / "models" / method


def cmd_train(cfg: ExperimentConfig, data: Dataset | None = None,
              audit: DateAudit | None = None) -> dict:
    """Fit one model per season on the training years and persist them."""
    data = data or load_dataset(cfg.data_path)
    audit = audit or DateAudit(tuple(cfg.test_years))
    method = cfg.method
    obs_tr = _period(data.obs, cfg.train_years)
    train_dates = obs_tr.dates
    dm = build_design_matrix(data.covariates)
    rows = _year_mask(dm.dates, cfg.train_years)
    if np.any(dm.dates[rows] != train_dates):
        raise GridError("covariates and observations cover different training days")
    X_all = dm.X[rows]
    Y_all = obs_tr.flat()
    seasons = season_of(train_dates)
    outdir = _model_dir(cfg, method)
    outdir.mkdir(parents=True, exist_ok=True)
    train_log = {"method": method, "train_years": list(cfg.train_years), "seasons": {}}
    if method in ("bcsd", "bcsd-mssl"):
        model_tr = _period(data.model_pr, cfg.train_years)
    if method == "cnn":
        grids_all = covariate_grids(data.covariates)[rows]
    for season in SEASONS:
        sel = seasons == season
        if not sel.any():
            raise PipelineError(f"no training days in season {season}")
        X, Y, dates = X_all[sel], Y_all[sel], train_dates[sel]
        if method in ("pcaols", "pcasvr", "elnet"):
            state, info = _fit_asd(method, X, Y, dates, cfg, audit, season)
        elif method == "mssl":
            state, info = _fit_mssl(X, Y, dates, cfg, audit, season)
        elif method == "bcsd":
            state, info = _fit_bcsd(model_tr, obs_tr, cfg, audit, season)
        elif method == "bcsd-mssl":
            state, info = _fit_bcsd_mssl(model_tr, obs_tr, X_all, train_dates, cfg, audit, season)
        else:
            state, info = _fit_cnn(grids_all[sel], Y, dates, cfg, audit, season)
        save_bundle({"method": method, "season": season, "state": state}, outdir / f"{season}.json")
        info["train_days"] = int(sel.sum())
        train_log["seasons"][season] = info
        log.info("trained %s/%s on %d days", method, season, int(sel.sum()))
    train_log["audit"] = audit.summary()
    (outdir / "train_log.json").write_text(json.dumps(train_log, indent=1, sort_keys=True) + "\n")
    return train_log


def load_models(cfg: ExperimentConfig, method: str) -> dict:
    out = {}
    for season in SEASONS:
        path = _model_dir(cfg, method) / f"{season}.json"
        if not path.exists():
            raise PipelineError(f"missing seasonal model {path} (run 'sdbench train' first)")
        bundle = load_bundle(path)
        if bundle["method"] != method or bundle["season"] != season:
            raise PipelineError(f"{path} holds {bundle['method']}/{bundle['season']}")
        out[season] = bundle["state"]
    return out


def _projection_dir(cfg, method) -> Path:
    return cfg.out_path / "projections" / method


def downscale(cfg: ExperimentConfig, data: Dataset, models: dict, method: str):
    """(projected fine stack over the test years, provenance rows)."""
    obs_te = _period(data.obs, cfg.test_years)
    dates = obs_te.dates
    dm = build_design_matrix(data.covariates)
    rows = _year_mask(dm.dates, cfg.test_years)
    if np.any(dm.dates[rows] != dates):
        raise GridError("covariates and observations cover different test days")
    X_all = dm.X[rows]
    seasons = season_of(dates)
    out = np.full((dates.size, obs_te.ncells), np.nan)
    if method in ("bcsd", "bcsd-mssl"):
        model_te = _period(data.model_pr, cfg.test_years)
    if method == "cnn":
        grids_all = covariate_grids(data.covariates)[rows]
    for season in SEASONS:
        sel = seasons == season
        if not sel.any():
            continue
        state = models[season]
        if method in ("pcaols", "pcasvr", "elnet"):
            pred = _predict_asd(state, X_all[sel])
        elif method == "mssl":
            pred = _predict_mssl(state, X_all[sel])
        elif method == "cnn":
            pred = _predict_cnn(state, grids_all[sel])
        else:
            maps, factors = _maps_from(state["maps"]), _factors_from(state["factors"])
            bc = bcsd_downscale(model_te, maps, factors, obs_te.lats, obs_te.lons).flat()[sel]
            if method == "bcsd-mssl":
                em = ErrorModel(state["means"], state["scales"],
                                MsslResult.from_dict(state["mssl"]))
                Z = standardize_apply(X_all[sel], em.means, em.scales)
                bc = bc - em.mssl.weights.predict(Z)
            pred = bc
        out[sel] = np.maximum(pred, 0.0)
    if np.isnan(out).any():
        raise PipelineError("projection has undefined days")
    proj = obs_te.with_values(out.reshape(obs_te.shape))
    provenance = [(str(d), s, f"models/{method}/{s}.json") for d, s in zip(dates, seasons)]
    return proj, provenance


def cmd_downscale(cfg: ExperimentConfig, data: Dataset | None = None) -> Path:
    data = data or load_dataset(cfg.data_path)
    models = load_models(cfg, cfg.method)
    proj, provenance = downscale(cfg, data, models, cfg.method)
    outdir = _projection_dir(cfg, cfg.method)
    path = save_grid_stack(proj, outdir / "pr.json")
    with open(outdir / "provenance.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("date", "season", "model"))
        w.writerows(provenance)
    return path


def _report_dir(cfg, method) -> Path:
    return cfg.out_path / "reports" / method


def cmd_evaluate(cfg: ExperimentConfig, data: Dataset | None = None) -> dict:
    data = data or load_dataset(cfg.data_path)
    path = _projection_dir(cfg, cfg.method) / "pr.json"
    if not path.exists():
        raise PipelineError(f"no projection at {path} (run 'sdbench downscale' first)")
    proj = load_grid_stack(path)
    obs = _period(data.obs, cfg.test_years)
    report = evaluate(proj, obs, cfg.method)
    climdex = climdex_compare(proj, obs)
    return write_reports(report, climdex, _report_dir(cfg, cfg.method))


def cmd_compare(cfg: ExperimentConfig) -> Path:
    summaries = []
    for method in cfg.methods:
        path = _report_dir(cfg, method) / "summary.json"
        if not path.exists():
            log.warning("no report for %s; skipped", method)
            continue
        summaries.append(json.loads(path.read_text()))
    rows = compare_summaries(summaries)
    return write_compare(rows, cfg.out_path / "compare.csv")


def run_all(cfg: ExperimentConfig, audit: DateAudit | None = None) -> dict:
    """synth (if needed), then train/downscale/evaluate every method in
    ``cfg.methods`` and compare. Returns the audit summary."""
    if not (cfg.data_path / "manifest.json").exists():
        cmd_synth(cfg)
    data = load_dataset(cfg.data_path)
    audit = audit or DateAudit(tuple(cfg.test_years))
    for method in cfg.methods:
        mcfg = replace(cfg, method=method)
        cmd_train(mcfg, data, audit)
        cmd_downscale(mcfg, data)
        cmd_evaluate(mcfg, data)
    cmd_compare(cfg)
    return audit.summary()
