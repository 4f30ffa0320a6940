"""Synthetic observations with state-proportional noise.

Point measurements are sampled uniformly over the space-time window,
interpolated from the model grid with the shared bilinear stencil
(the discrete observation operator H_m), perturbed with Gaussian noise
whose standard deviation is proportional to the true concentration,
and screened with the RMSE-band acceptance filter.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .transport import FieldST, Grid, interp_stencils

__all__ = [
    "ObsPoint",
    "ObservationSet",
    "CalibrationResult",
    "GenerationBudgetError",
    "sample_locations",
    "interpolate",
    "apply_h",
    "apply_h_transpose",
    "generate_observations",
    "calibrate_and_filter",
    "observations_to_csv",
    "observations_from_csv",
    "observations_to_json",
]


class GenerationBudgetError(RuntimeError):
    """Raised when the RMSE band filter cannot collect enough draws."""

    def __init__(self, accepted, requested, scanned):
        self.accepted = accepted
        self.requested = requested
        self.scanned = scanned
        super().__init__(
            f"accepted {accepted} of {requested} requested columns "
            f"after scanning {scanned} draws"
        )


@dataclass(frozen=True)
class ObsPoint:
    x: float
    t: float
    d: float
    sigma: float


@dataclass
class ObservationSet:
    """M point measurements plus their interpolation stencils onto the grid."""

    grid: Grid
    xs: np.ndarray
    ts: np.ndarray
    d: np.ndarray
    sigma: np.ndarray
    seed: int | None = None
    levels: np.ndarray = field(init=False)
    cells: np.ndarray = field(init=False)
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        self.xs = np.atleast_1d(np.asarray(self.xs, dtype=float))
        self.ts = np.atleast_1d(np.asarray(self.ts, dtype=float))
        self.d = np.atleast_1d(np.asarray(self.d, dtype=float))
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if not (len(self.xs) == len(self.ts) == len(self.d) == len(self.sigma)):
            raise ValueError("xs, ts, d, sigma must share a length")
        if len(self.xs) < 1:
            raise ValueError("an observation set needs at least one point")
        if np.any(self.sigma < 0):
            raise ValueError("sigma must be nonnegative")
        self.levels, self.cells, self.weights = interp_stencils(self.grid, self.xs, self.ts)

    @property
    def m(self) -> int:
        return len(self.xs)

    @property
    def points(self) -> list[ObsPoint]:
        return [
            ObsPoint(x, t, d, s)
            for x, t, d, s in zip(self.xs, self.ts, self.d, self.sigma)
        ]

    def with_data(self, d: np.ndarray) -> "ObservationSet":
        """Same locations, stencils and noise levels with a new data column."""
        return ObservationSet(self.grid, self.xs, self.ts, np.asarray(d, dtype=float),
                              self.sigma, seed=self.seed)

    def drop(self, k: int) -> "ObservationSet":
        keep = np.ones(self.m, dtype=bool)
        keep[k] = False
        return ObservationSet(self.grid, self.xs[keep], self.ts[keep],
                              self.d[keep], self.sigma[keep], seed=self.seed)


def sample_locations(grid: Grid, m: int, seed: int):
    """Draw m i.i.d. uniform space-time points; deterministic in the seed."""
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = np.random.default_rng(seed)
    xs = rng.uniform(grid.x_min, grid.x_max, size=m)
    ts = rng.uniform(grid.t_min, grid.t_max, size=m)
    return xs, ts


def apply_h(field_values: np.ndarray, levels, cells, weights) -> np.ndarray:
    """Evaluate stored stencils against field values of shape (..., nt, nx)."""
    gathered = field_values[..., levels, cells]
    return np.sum(gathered * weights, axis=-1)


def apply_h_transpose(grid: Grid, levels, cells, weights, coeffs) -> np.ndarray:
    """Deposit data-space coefficients back onto the grid with the same stencils."""
    out = np.zeros((grid.nt, grid.nx))
    coeffs = np.asarray(coeffs, dtype=float)
    np.add.at(out, (levels.ravel(), cells.ravel()), (weights * coeffs[:, None]).ravel())
    return out


def interpolate(field: FieldST, points) -> np.ndarray:
    """Bilinear space-time interpolation of a field at (x, t) points."""
    xs, ts = _split_points(points)
    levels, cells, weights = interp_stencils(field.grid, xs, ts)
    return apply_h(field.values, levels, cells, weights)


def _split_points(points):
    if isinstance(points, tuple) and len(points) == 2:
        return np.asarray(points[0], dtype=float), np.asarray(points[1], dtype=float)
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    return pts[:, 0], pts[:, 1]


def generate_observations(truth: FieldST, locations, sigma_level: float, seed: int) -> ObservationSet:
    """Noisy observations of the truth with sigma_m = sigma_level * truth(x_m, t_m)."""
    if sigma_level < 0:
        raise ValueError("sigma_level must be >= 0")
    xs, ts = _split_points(locations)
    values = interpolate(truth, (xs, ts))
    sigma = sigma_level * values
    rng = np.random.default_rng(seed)
    d = values + sigma * rng.standard_normal(len(values))
    return ObservationSet(truth.grid, xs, ts, d, sigma, seed=seed)


@dataclass
class CalibrationResult:
    """Accepted data columns plus the RMSE band statistics behind them."""

    columns: np.ndarray        # (M, n_keep)
    truth_values: np.ndarray   # (M,)
    sigma: np.ndarray          # (M,)
    rmse_mean: float
    rmse_std: float
    rmse_kept: np.ndarray      # (n_keep,)
    n_scanned: int
    accept_fraction: float


def calibrate_and_filter(truth: FieldST, locations, sigma_level: float,
                         n_mc: int, n_keep: int, seed: int,
                         budget_factor: int = 50) -> CalibrationResult:
    """Monte-Carlo calibrate the observation RMSE band, then keep draws inside it.

    The first n_mc draws fix mean(RMSE) +- std(RMSE); the same stream is
    then rescanned (and extended if needed) for the first n_keep draws
    whose RMSE lies inside the band. Failing to collect n_keep within
    budget_factor * n_keep scanned draws raises GenerationBudgetError.
    """
    if not n_mc >= n_keep >= 1:
        raise ValueError("need n_mc >= n_keep >= 1")
    xs, ts = _split_points(locations)
    values = interpolate(truth, (xs, ts))
    sigma = sigma_level * values
    m = len(values)

    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n_mc, m))
    rmse = np.sqrt(np.mean((sigma[None, :] * noise) ** 2, axis=1))
    mean, std = float(np.mean(rmse)), float(np.std(rmse))
    lo, hi = mean - std, mean + std

    budget = budget_factor * n_keep
    accept = (rmse >= lo) & (rmse <= hi)
    idx = np.flatnonzero(accept[:budget])
    scanned = min(n_mc, budget)
    kept_noise = noise[idx[:n_keep]]
    kept_rmse = rmse[idx[:n_keep]]
    # Extend the stream past the calibration block if the budget allows it.
    while len(kept_noise) < n_keep and scanned < budget:
        extra = min(budget - scanned, max(n_keep, 1000))
        more = rng.standard_normal((extra, m))
        more_rmse = np.sqrt(np.mean((sigma[None, :] * more) ** 2, axis=1))
        ok = (more_rmse >= lo) & (more_rmse <= hi)
        kept_noise = np.concatenate([kept_noise, more[ok][: n_keep - len(kept_noise)]])
        kept_rmse = np.concatenate([kept_rmse, more_rmse[ok][: n_keep - len(kept_rmse)]])
        scanned += extra
    if len(kept_noise) < n_keep:
        raise GenerationBudgetError(len(kept_noise), n_keep, scanned)

    columns = values[:, None] + sigma[:, None] * kept_noise.T
    return CalibrationResult(
        columns=columns,
        truth_values=values,
        sigma=sigma,
        rmse_mean=mean,
        rmse_std=std,
        rmse_kept=kept_rmse[:n_keep],
        n_scanned=scanned,
        accept_fraction=float(np.mean(accept)),
    )


def observations_to_csv(obs: ObservationSet, path, header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["x", "t", "d", "sigma"])
        for p in obs.points:
            writer.writerow([repr(p.x), repr(p.t), repr(p.d), repr(p.sigma)])


def observations_from_csv(grid: Grid, path) -> ObservationSet:
    xs, ts, d, sigma = [], [], [], []
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    for row in rows[1:]:
        xs.append(float(row[0]))
        ts.append(float(row[1]))
        d.append(float(row[2]))
        sigma.append(float(row[3]))
    return ObservationSet(grid, np.array(xs), np.array(ts), np.array(d), np.array(sigma))


def observations_to_json(obs: ObservationSet, path, provenance: dict | None = None) -> None:
    payload = {
        "seed": obs.seed,
        "points": [
            {"x": p.x, "t": p.t, "d": p.d, "sigma": p.sigma} for p in obs.points
        ],
    }
    if provenance:
        payload["provenance"] = provenance
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
