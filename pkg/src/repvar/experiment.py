"""Twin experiments: truth runs, perturbed first guesses, ensembles.

Four standard configurations vary the boundary condition, the second
emission source, the observation noise level, and the first-guess
parameter perturbations; the harness generates the filtered observation
dataset, runs per-column hyperparameter selection, applies the
experiment-specific outlier bands, and reports RMSE tables.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict

import numpy as np

from . import param_select as sel_mod
from .covariance import Isotropic, NonIsotropic
from .observation import (
    CalibrationResult,
    ObservationSet,
    calibrate_and_filter,
    sample_locations,
)
from .representer import AssimilationProblem, optimal_estimate
from .transport import (
    AdvectionModel,
    BoundaryKind,
    FieldST,
    Grid,
    SourceParams,
    solve_forward,
)

__all__ = [
    "ExperimentConfig",
    "ExperimentData",
    "MethodStats",
    "EnsembleReport",
    "ConfigError",
    "build_experiment",
    "run_ensemble",
    "rmse_report",
    "rmse",
]

# Shared first-source parameters; the second source and the noise /
# perturbation levels are experiment-specific.
_COMMON = dict(s0=100.0, x0=33.0, alpha0=10.0, k0=0.5, x1=40.0)
_WIND = 1.0

_TABLE1 = {
    1: dict(bc="periodic", s1=0.0, k1=0.0, alpha1=0.0, noise_level=0.7,
            sd_k0=0.2, sd_k1=0.0, sd_alpha0=0.2, sd_alpha1=0.0),
    2: dict(bc="no_flux", s1=50.0, k1=0.25, alpha1=5.0, noise_level=0.6,
            sd_k0=0.2, sd_k1=0.2, sd_alpha0=0.2, sd_alpha1=0.2),
    3: dict(bc="periodic", s1=0.0, k1=0.0, alpha1=0.0, noise_level=0.3,
            sd_k0=0.5, sd_k1=0.0, sd_alpha0=0.7, sd_alpha1=0.0),
    4: dict(bc="no_flux", s1=50.0, k1=0.25, alpha1=5.0, noise_level=0.2,
            sd_k0=0.6, sd_k1=0.5, sd_alpha0=0.5, sd_alpha1=0.5),
}

_OUTLIER_BAND = {1: (0.35, 0.7), 2: (0.003, 0.7), 3: (0.8, 10.0), 4: (0.5, 6.0)}

# Grid presets: cell/level counts whose product matches the stated state
# dimensions (200*445 = 89000 and 51*113 = 5763).
_GRID_PRESETS = {
    "isotropic": dict(nx=200, nt=445),
    "non_isotropic": dict(nx=51, nt=113),
}

# Default master seeds, chosen so the sampled observation locations avoid
# exactly-zero true concentrations (which would zero a noise variance and
# make the GCV denominators vanish identically).
_DEFAULT_SEEDS = {1: 1304, 2: 1102, 3: 1304, 4: 1102}


class ConfigError(ValueError):
    """Experiment configuration violates the schema."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"config key {key!r}: {message}")


@dataclass
class ExperimentConfig:
    """One Table-1 row plus grid/covariance/selection settings."""

    experiment: int
    bc: str
    s1: float
    k1: float
    alpha1: float
    noise_level: float
    sd_k0: float
    sd_k1: float
    sd_alpha0: float
    sd_alpha1: float
    covariance_kind: str = "isotropic"
    nx: int | None = None
    nt: int | None = None
    m_obs: int | None = None
    ensemble_size: int | None = None
    outlier_band: tuple | None = None
    master_seed: int | None = None
    n_mc: int = 100_000
    lcurve_points: int = 100
    sigma_bounds: tuple = sel_mod.DEFAULT_SIGMA_BOUNDS
    gcv_form: str = "trace"

    def __post_init__(self):
        if self.experiment not in _TABLE1:
            raise ConfigError("experiment", "must be 1, 2, 3 or 4")
        if self.covariance_kind not in _GRID_PRESETS:
            raise ConfigError("covariance_kind", "must be isotropic or non_isotropic")
        preset = _GRID_PRESETS[self.covariance_kind]
        self.nx = self.nx or preset["nx"]
        self.nt = self.nt or preset["nt"]
        if self.m_obs is None:
            self.m_obs = 49 if self.covariance_kind == "isotropic" else 30
        if self.ensemble_size is None:
            self.ensemble_size = 500 if self.covariance_kind == "isotropic" else 1
        if self.outlier_band is None:
            self.outlier_band = _OUTLIER_BAND[self.experiment]
        if self.master_seed is None:
            self.master_seed = _DEFAULT_SEEDS[self.experiment]

    @classmethod
    def from_id(cls, experiment: int, covariance_kind: str = "isotropic",
                **overrides) -> "ExperimentConfig":
        if experiment not in _TABLE1:
            raise ConfigError("experiment", "must be 1, 2, 3 or 4")
        base = dict(_TABLE1[experiment])
        base.update(overrides)
        return cls(experiment=experiment, covariance_kind=covariance_kind, **base)

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        if "experiment" not in payload:
            raise ConfigError("experiment", "is required")
        allowed = {
            "experiment", "covariance_kind", "bc", "s1", "k1", "alpha1",
            "noise_level", "sd_k0", "sd_k1", "sd_alpha0", "sd_alpha1",
            "nx", "nt", "m_obs", "ensemble_size", "outlier_band",
            "master_seed", "n_mc", "lcurve_points", "sigma_bounds",
            "gcv_form",
        }
        for key in payload:
            if key not in allowed:
                raise ConfigError(key, "is not a recognized setting")
        merged = dict(_TABLE1[payload["experiment"]]) if payload["experiment"] in _TABLE1 \
            else {}
        merged.update(payload)
        try:
            cfg = cls(**merged)
        except TypeError as exc:
            raise ConfigError("experiment", str(exc)) from exc
        for key in ("noise_level", "m_obs", "ensemble_size", "n_mc"):
            value = getattr(cfg, key)
            if not isinstance(value, (int, float)) or value < 0:
                raise ConfigError(key, "must be a nonnegative number")
        if isinstance(cfg.outlier_band, list):
            cfg.outlier_band = tuple(cfg.outlier_band)
        if isinstance(cfg.sigma_bounds, list):
            cfg.sigma_bounds = tuple(cfg.sigma_bounds)
        return cfg

    def to_dict(self) -> dict:
        out = asdict(self)
        out["outlier_band"] = list(self.outlier_band)
        out["sigma_bounds"] = list(self.sigma_bounds)
        return out

    # Derived objects -------------------------------------------------

    @property
    def grid(self) -> Grid:
        return Grid(nx=self.nx, nt=self.nt)

    @property
    def boundary(self) -> BoundaryKind:
        return BoundaryKind.parse(self.bc)

    @property
    def model(self) -> AdvectionModel:
        return AdvectionModel(self.grid, _WIND, self.boundary)

    @property
    def true_source(self) -> SourceParams:
        return SourceParams(s1=self.s1, k1=self.k1, alpha1=self.alpha1, **_COMMON)

    def seeds(self) -> dict:
        """Named child seeds derived deterministically from the master seed."""
        ss = np.random.SeedSequence(self.master_seed)
        children = ss.spawn(3)
        return {
            "locations": children[0],
            "noise": children[1],
            "first_guess": children[2],
        }


@dataclass
class ExperimentData:
    config: ExperimentConfig
    truth: FieldST
    locations: tuple
    calibration: CalibrationResult
    first_guess_sources: list
    n_clipped_draws: int

    @property
    def columns(self) -> np.ndarray:
        return self.calibration.columns


def draw_first_guess_sources(cfg: ExperimentConfig, n: int, seed) -> tuple[list, int]:
    """Perturb the decay rates; negative draws are clipped to zero."""
    rng = np.random.default_rng(seed)
    true = cfg.true_source
    out = []
    clipped = 0
    for _ in range(n):
        draws = rng.normal(
            [true.k0, true.k1, true.alpha0, true.alpha1],
            [cfg.sd_k0, cfg.sd_k1, cfg.sd_alpha0, cfg.sd_alpha1],
        )
        clipped += int(np.sum(draws < 0))
        k0, k1, a0, a1 = np.maximum(draws, 0.0)
        out.append(SourceParams(s0=true.s0, x0=true.x0, alpha0=a0, k0=k0,
                                s1=true.s1, x1=true.x1, alpha1=a1, k1=k1))
    return out, clipped


def build_experiment(cfg: ExperimentConfig) -> ExperimentData:
    """Truth run, filtered observation dataset, and first-guess draws."""
    seeds = cfg.seeds()
    model = cfg.model
    truth = model.solve_forward(source=cfg.true_source)
    xs, ts = sample_locations(cfg.grid, cfg.m_obs,
                              np.random.default_rng(seeds["locations"]).integers(2**32))
    calibration = calibrate_and_filter(
        truth, (xs, ts), cfg.noise_level, cfg.n_mc, cfg.ensemble_size,
        np.random.default_rng(seeds["noise"]).integers(2**32),
    )
    sources, clipped = draw_first_guess_sources(cfg, cfg.ensemble_size,
                                                seeds["first_guess"])
    return ExperimentData(cfg, truth, (xs, ts), calibration, sources, clipped)


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


@dataclass
class MethodStats:
    method: str
    samples: np.ndarray
    filtered_mean: float
    filtered_std: float
    n_kept: int
    n_failed: int
    first_column_params: dict
    rmse_mean: float
    rmse_std: float
    run_counts: np.ndarray


@dataclass
class EnsembleReport:
    config: ExperimentConfig
    methods: dict
    rmse_first_guess_first: float
    rmse_first_guess_mean: float
    rmse_first_guess_std: float
    rmse_data_mean: float
    rmse_data_std: float
    n_clipped_draws: int

    def table2_rows(self):
        for name, stats in self.methods.items():
            yield {
                "experiment": self.config.experiment,
                "method": name,
                "mean_sigma_f2": stats.filtered_mean,
                "std_sigma_f2": stats.filtered_std,
                "n_kept": stats.n_kept,
                "n_failed": stats.n_failed,
            }

    def table3_rows(self):
        row = {
            "experiment": self.config.experiment,
            "first_guess": self.rmse_first_guess_first,
            "first_guess_mean": self.rmse_first_guess_mean,
            "data_mean": self.rmse_data_mean,
            "data_std": self.rmse_data_std,
        }
        for name, stats in self.methods.items():
            row[f"{name}_mean"] = stats.rmse_mean
            row[f"{name}_std"] = stats.rmse_std
        yield row


_METHOD_NAMES = ("lcurve", "gcv", "chi2")


def _select_isotropic(problem, method, cfg):
    if method == "lcurve":
        grid_vals = np.geomspace(*cfg.sigma_bounds, cfg.lcurve_points)
        return sel_mod.lcurve_select(problem, grid_vals)
    if method == "gcv":
        return sel_mod.gcv_select_1d(problem, cfg.sigma_bounds, form=cfg.gcv_form)
    if method == "chi2":
        return sel_mod.chi2_select_1d(problem, cfg.sigma_bounds)
    raise ValueError(f"unknown method {method!r}")


def run_ensemble(cfg: ExperimentConfig, methods=_METHOD_NAMES,
                 data: ExperimentData | None = None) -> EnsembleReport:
    """Per-column selection with outlier filtering and RMSE accounting.

    The assimilation-quality RMSE uses the hyperparameters selected on the
    first data column, applied to every column (its own first guess and
    data), as in the reference protocol.
    """
    if not methods:
        raise ValueError("need at least one method")
    if cfg.covariance_kind == "non_isotropic":
        return _run_non_isotropic(cfg, methods, data)

    data = data or build_experiment(cfg)
    model = cfg.model
    xs, ts = data.locations
    sigma = data.calibration.sigma
    truth_vals = data.calibration.truth_values

    obs_template = ObservationSet(cfg.grid, xs, ts, truth_vals, sigma,
                                  seed=cfg.master_seed)
    base = AssimilationProblem(model, obs_template,
                               FieldST(cfg.grid, np.zeros((cfg.nt, cfg.nx))))

    n_col = data.columns.shape[1]
    samples = {m: np.full(n_col, np.nan) for m in methods}
    run_counts = {m: np.zeros(n_col, dtype=int) for m in methods}
    failures = {m: 0 for m in methods}
    rmse_fg = np.empty(n_col)
    rmse_data = np.empty(n_col)

    # Pass 1: per-column hyperparameter selection. First-guess fields are
    # cheap to recompute, so they are not stored across columns.
    for j in range(n_col):
        q_f = solve_forward(cfg.grid, _WIND, cfg.boundary,
                            source=data.first_guess_sources[j])
        problem = base.for_column(q_f, data.columns[:, j])
        rmse_fg[j] = rmse(q_f.values, data.truth.values)
        rmse_data[j] = rmse(data.columns[:, j], truth_vals)
        for method in methods:
            try:
                result = _select_isotropic(problem, method, cfg)
            except (sel_mod.SelectionError, FloatingPointError):
                failures[method] += 1
                continue
            samples[method][j] = result.params["sigma_f2"]
            run_counts[method][j] = result.n_runs

    # The quality table fixes each method's hyperparameter at its first
    # (successfully selected) column.
    first_params = {}
    for method in methods:
        finite_idx = np.flatnonzero(np.isfinite(samples[method]))
        if len(finite_idx) == 0:
            raise sel_mod.SelectionError(f"method {method} failed on every column")
        first_params[method] = {"sigma_f2": float(samples[method][finite_idx[0]])}

    # Pass 2: assimilate every column at those fixed hyperparameters.
    rmse_hat = {m: np.empty(n_col) for m in methods}
    specs = {m: Isotropic(first_params[m]["sigma_f2"]) for m in methods}
    for j in range(n_col):
        q_f = solve_forward(cfg.grid, _WIND, cfg.boundary,
                            source=data.first_guess_sources[j])
        problem = base.for_column(q_f, data.columns[:, j])
        for method in methods:
            est = optimal_estimate(problem.system(specs[method]))
            rmse_hat[method][j] = rmse(est.values, data.truth.values)

    stats = {}
    lo, hi = cfg.outlier_band
    for method in methods:
        vals = samples[method]
        finite = vals[np.isfinite(vals)]
        if method == "lcurve":
            kept = finite  # outlier bands apply to the GCV and chi2 estimates
        else:
            kept = finite[(finite >= lo) & (finite <= hi)]
        stats[method] = MethodStats(
            method=method,
            samples=vals,
            filtered_mean=float(np.mean(kept)) if len(kept) else float("nan"),
            filtered_std=float(np.std(kept)) if len(kept) else float("nan"),
            n_kept=int(len(kept)),
            n_failed=failures[method],
            first_column_params=first_params[method],
            rmse_mean=float(np.mean(rmse_hat[method])),
            rmse_std=float(np.std(rmse_hat[method])),
            run_counts=run_counts[method],
        )

    return EnsembleReport(
        config=cfg,
        methods=stats,
        rmse_first_guess_first=float(rmse_fg[0]),
        rmse_first_guess_mean=float(np.mean(rmse_fg)),
        rmse_first_guess_std=float(np.std(rmse_fg)),
        rmse_data_mean=float(np.mean(rmse_data)),
        rmse_data_std=float(np.std(rmse_data)),
        n_clipped_draws=data.n_clipped_draws,
    )


def _run_non_isotropic(cfg, methods, data=None):
    """Single-column multi-hyperparameter runs (GCV and chi2)."""
    data = data or build_experiment(cfg)
    model = cfg.model
    xs, ts = data.locations
    obs = ObservationSet(cfg.grid, xs, ts, data.columns[:, 0],
                         data.calibration.sigma, seed=cfg.master_seed)
    q_f = solve_forward(cfg.grid, _WIND, cfg.boundary,
                        source=data.first_guess_sources[0])
    problem = AssimilationProblem(model, obs, q_f)

    stats = {}
    rmse_fg = rmse(q_f.values, data.truth.values)
    rmse_d = rmse(data.columns[:, 0], data.calibration.truth_values)
    for method in methods:
        if method == "gcv":
            result = sel_mod.gcv_select_multi(problem, form=cfg.gcv_form)
        elif method == "chi2":
            result = sel_mod.chi2_select_multi(problem)
        else:
            continue  # the L-hypersurface is out of scope
        spec = NonIsotropic(result.params["sigma_f2"], result.params["l_f"],
                            result.params["tau_f"])
        est = optimal_estimate(problem.system(spec))
        err = rmse(est.values, data.truth.values)
        stats[method] = MethodStats(
            method=method,
            samples=np.array([result.params["sigma_f2"]]),
            filtered_mean=result.params["sigma_f2"],
            filtered_std=0.0,
            n_kept=1,
            n_failed=0,
            first_column_params=result.params,
            rmse_mean=err,
            rmse_std=0.0,
            run_counts=np.array([result.n_runs]),
        )

    return EnsembleReport(
        config=cfg,
        methods=stats,
        rmse_first_guess_first=rmse_fg,
        rmse_first_guess_mean=rmse_fg,
        rmse_first_guess_std=0.0,
        rmse_data_mean=rmse_d,
        rmse_data_std=0.0,
        n_clipped_draws=data.n_clipped_draws,
    )


def rmse_report(truth: FieldST, fields: dict, datasets: dict | None = None) -> dict:
    """RMSE of named fields against the truth (full grid) and of named
    data columns against the truth at their points."""
    out = {}
    for name, fld in fields.items():
        values = fld.values if isinstance(fld, FieldST) else np.asarray(fld)
        out[name] = rmse(values, truth.values)
    for name, (columns, truth_vals) in (datasets or {}).items():
        cols = np.atleast_2d(np.asarray(columns, dtype=float))
        if cols.shape[0] != len(truth_vals):
            cols = cols.T
        errs = [rmse(cols[:, j], truth_vals) for j in range(cols.shape[1])]
        out[name] = (float(np.mean(errs)), float(np.std(errs)))
    return out


def report_to_csv(report: EnsembleReport, path_table2, path_table3,
                  header_comment: str | None = None) -> None:
    rows2 = list(report.table2_rows())
    with open(path_table2, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.DictWriter(fh, fieldnames=list(rows2[0].keys()))
        writer.writeheader()
        writer.writerows(rows2)
    rows3 = list(report.table3_rows())
    with open(path_table3, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.DictWriter(fh, fieldnames=list(rows3[0].keys()))
        writer.writeheader()
        writer.writerows(rows3)


def samples_to_csv(report: EnsembleReport, path, header_comment=None) -> None:
    methods = list(report.methods)
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["column"] + [f"sigma_f2_{m}" for m in methods]
                        + [f"runs_{m}" for m in methods])
        n = len(report.methods[methods[0]].samples)
        for j in range(n):
            row = [j]
            row += [repr(float(report.methods[m].samples[j])) for m in methods]
            row += [int(report.methods[m].run_counts[j]) if j < len(report.methods[m].run_counts) else 0
                    for m in methods]
            writer.writerow(row)


def report_to_json(report: EnsembleReport, path, provenance=None) -> None:
    payload = {
        "experiment": report.config.experiment,
        "covariance_kind": report.config.covariance_kind,
        "methods": {
            name: {
                "filtered_mean": s.filtered_mean,
                "filtered_std": s.filtered_std,
                "n_kept": s.n_kept,
                "n_failed": s.n_failed,
                "first_column_params": s.first_column_params,
                "rmse_mean": s.rmse_mean,
                "rmse_std": s.rmse_std,
                "max_runs": int(np.max(s.run_counts)) if len(s.run_counts) else 0,
            }
            for name, s in report.methods.items()
        },
        "rmse_first_guess_first": report.rmse_first_guess_first,
        "rmse_first_guess_mean": report.rmse_first_guess_mean,
        "rmse_data_mean": report.rmse_data_mean,
        "rmse_data_std": report.rmse_data_std,
        "n_clipped_draws": report.n_clipped_draws,
    }
    if provenance:
        payload["provenance"] = provenance
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
