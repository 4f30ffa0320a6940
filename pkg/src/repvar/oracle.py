"""Independent brute-force references for validating the representer path.

The full-space solver minimizes the stacked weighted least-squares
objective over the whole trajectory by direct sparse normal equations,
and recovers the equivalent data-space objects (representer matrix and
coefficients) from plain linear algebra. The static estimator and its
selection criteria, and the literal leave-one-out cross-validation sum,
complete the reference set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from . import covariance as cov_mod
from . import representer as rep_mod
from .observation import ObservationSet
from .transport import AdvectionModel, FieldST, SourceParams, source_field

__all__ = [
    "FullSpaceProblem",
    "FullSpaceSolution",
    "ThreeDVarProblem",
    "full_space_solve",
    "threedvar_estimate",
    "threedvar_select",
    "loo_bruteforce",
]


@dataclass
class FullSpaceProblem:
    """Stacked trajectory least squares; only for grids under the size cap."""

    model: AdvectionModel
    source: SourceParams
    q_init: np.ndarray
    obs: ObservationSet
    cov: cov_mod.Isotropic
    size_cap: int = 5000

    def __post_init__(self):
        n = self.model.grid.size
        if n > self.size_cap:
            raise ValueError(f"stacked size {n} exceeds the cap {self.size_cap}")
        self.q_init = np.asarray(self.q_init, dtype=float)
        if len(self.q_init) != self.model.grid.nx:
            raise ValueError("q_init must have length nx")
        if not isinstance(self.cov, cov_mod.Isotropic):
            raise TypeError("the full-space oracle covers the isotropic covariance")


@dataclass
class FullSpaceSolution:
    trajectory: FieldST
    R: np.ndarray
    beta: np.ndarray
    j_data: float
    j_mod: float
    j_total: float


def _obs_design(problem: FullSpaceProblem) -> sp.csr_matrix:
    """Stacked observation operator over the flattened trajectory."""
    grid = problem.model.grid
    obs = problem.obs
    cols = (obs.levels * grid.nx + obs.cells).ravel()
    rows = np.repeat(np.arange(obs.m), obs.levels.shape[1])
    return sp.csr_matrix(
        (obs.weights.ravel(), (rows, cols)), shape=(obs.m, grid.size)
    )


def _prior_operator(problem: FullSpaceProblem) -> sp.csr_matrix:
    """Square map x -> (q^0; q^1 - A q^0; ...), block lower bidiagonal."""
    grid = problem.model.grid
    a = problem.model.step_matrix()
    nx, nt = grid.nx, grid.nt
    eye = sp.identity(nx, format="csr")
    a_sp = sp.csr_matrix(a)
    blocks = []
    for n in range(nt):
        row = [None] * nt
        row[n] = eye
        if n > 0:
            row[n - 1] = -a_sp
        blocks.append(row)
    return sp.bmat(blocks, format="csr")


def full_space_solve(problem: FullSpaceProblem) -> FullSpaceSolution:
    """Direct solve of the stacked weak-constraint problem.

    Model-error rows carry weight 1 / (dt sigma_f^2): the isotropic model
    error is white per grid cell with per-step variance dt sigma_f^2. The
    initial condition is eliminated exactly when its variance is zero,
    else penalized with weight 1 / ci (white per cell as well).
    """
    grid = problem.model.grid
    nx, nt = grid.nx, grid.nt
    dx, dt = grid.dx, grid.dt
    obs = problem.obs
    sigma_f2 = problem.cov.sigma_f2
    ci = problem.cov.ci_variance
    if sigma_f2 <= 0 and not np.any(obs.sigma > 0):
        raise ValueError("need sigma_f2 > 0 or observation noise for a solvable system")
    if sigma_f2 <= 0:
        raise ValueError("the stacked solve needs sigma_f2 > 0 (hard dynamics otherwise)")
    w_f = 1.0 / (dt * sigma_f2)
    w_d = 1.0 / obs.sigma**2

    a = problem.model.step_matrix()
    src = source_field(problem.source, grid)
    h_full = _obs_design(problem)

    if ci == 0.0:
        # Eliminate q^0 = q_init; unknowns are levels 1..nt-1.
        n_unknown = (nt - 1) * nx
        eye = sp.identity(nx, format="csr")
        a_sp = sp.csr_matrix(a)
        rows = []
        rhs = []
        for n in range(nt - 1):
            row = [None] * (nt - 1)
            row[n] = eye
            if n > 0:
                row[n - 1] = -a_sp
            rows.append(row)
            rhs.append(dt * src[n] + (a @ problem.q_init if n == 0 else 0.0))
        d_mat = sp.bmat(rows, format="csr") * np.sqrt(w_f)
        rhs = np.concatenate(rhs) * np.sqrt(w_f)

        h_level0 = h_full[:, :nx]
        h_rest = h_full[:, nx:]
        data_rhs = (obs.d - h_level0 @ problem.q_init) * np.sqrt(w_d)
        h_w = sp.diags(np.sqrt(w_d)) @ h_rest

        design = sp.vstack([d_mat, h_w], format="csr")
        b = np.concatenate([rhs, data_rhs])
        normal = (design.T @ design).tocsc()
        z = spsolve(normal, design.T @ b)
        traj = np.vstack([problem.q_init, z.reshape(nt - 1, nx)])
    else:
        w_i = 1.0 / ci
        d_full = _prior_operator(problem)
        prior_rhs = np.concatenate([problem.q_init] + [dt * src[n] for n in range(nt - 1)])
        weights = np.concatenate([np.full(nx, w_i), np.full((nt - 1) * nx, w_f)])
        d_w = sp.diags(np.sqrt(weights)) @ d_full
        h_w = sp.diags(np.sqrt(w_d)) @ h_full
        design = sp.vstack([d_w, h_w], format="csr")
        b = np.concatenate([np.sqrt(weights) * prior_rhs, np.sqrt(w_d) * obs.d])
        normal = (design.T @ design).tocsc()
        x = spsolve(normal, design.T @ b)
        traj = x.reshape(nt, nx)

    trajectory = FieldST(grid, traj)

    # Data-space objects from the prior covariance: R = (H D^-1) W^-1 (H D^-1)^T.
    d_full = _prior_operator(problem).tocsc()
    z_cols = sp.linalg.splu(d_full.T.tocsc()).solve(h_full.T.toarray())
    inv_weights = np.concatenate([
        np.full(nx, ci),
        np.full((nt - 1) * nx, dt * sigma_f2),
    ])
    r_mat = z_cols.T @ (inv_weights[:, None] * z_cols)
    r_mat = 0.5 * (r_mat + r_mat.T)

    traj_at_obs = h_full @ traj.ravel()
    beta = w_d * (obs.d - traj_at_obs)

    resid_model = traj[1:] - traj[:-1] @ a.T - dt * src[:-1]
    j_mod = w_f * float(np.sum(resid_model**2))
    if ci > 0:
        j_mod += float(np.sum((traj[0] - problem.q_init) ** 2)) / ci
    j_data = float(np.sum(w_d * (traj_at_obs - obs.d) ** 2))
    return FullSpaceSolution(trajectory, r_mat, beta, j_data, j_mod, j_data + j_mod)


def threedvar_estimate(x_b, b_cov, r_obs, h_op, d) -> np.ndarray:
    """Static optimal estimate x_b + B H^T (H B H^T + R)^{-1} (d - H x_b)."""
    x_b = np.asarray(x_b, dtype=float)
    innov = np.asarray(d, dtype=float) - h_op @ x_b
    gram = h_op @ b_cov @ h_op.T + r_obs
    try:
        sol = np.linalg.solve(gram, innov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("H B H^T + R is singular") from exc
    return x_b + b_cov @ h_op.T @ sol


@dataclass
class ThreeDVarProblem:
    """Static estimation instance with isotropic background covariance."""

    x_b: np.ndarray
    h_op: np.ndarray
    r_obs: np.ndarray
    d: np.ndarray

    @property
    def m(self) -> int:
        return len(self.d)


def _threedvar_data_objects(problem: ThreeDVarProblem, sigma_b2: float):
    """(G = H B H^T + R, innovation) for B = sigma_b2 I."""
    h = problem.h_op
    g = sigma_b2 * (h @ h.T) + problem.r_obs
    innov = problem.d - h @ problem.x_b
    return g, innov


def threedvar_select(problem: ThreeDVarProblem, method: str,
                     bounds=(1e-8, 1e4), n_grid: int = 100) -> dict:
    """Estimate sigma_b^2 for B = sigma_b2 I by the named criterion.

    The GCV criterion is the exact leave-one-out sum with per-datum
    influence-diagonal denominators (the trace-averaged variant is
    reported alongside in the diagnostics).
    """
    from .param_select import _golden_min, _bisect_decreasing, lcurve_corner

    m = problem.m
    r_diag = np.diag(problem.r_obs)

    def chi2_value(sigma_b2):
        g, innov = _threedvar_data_objects(problem, sigma_b2)
        return float(innov @ np.linalg.solve(g, innov))

    def gcv_value(sigma_b2):
        g, innov = _threedvar_data_objects(problem, sigma_b2)
        g_inv = np.linalg.inv(g)
        y = g_inv @ innov
        resid = r_diag * y                      # d - H x_hat
        denom = r_diag * np.diag(g_inv)         # 1 - influence diagonal
        loo = float(np.mean(resid**2 / (r_diag * denom**2)))
        trace_denom = np.mean(denom)
        trace_form = float(np.mean(resid**2 / r_diag) / trace_denom**2)
        return loo, trace_form

    diagnostics: dict = {"method": method}
    if method == "chi2":
        root, flags, evals = _bisect_decreasing(chi2_value, bounds, target=m,
                                                rel_tol=1e-6, max_evals=200)
        diagnostics.update(flags=flags, n_evals=evals)
        return {"sigma_b2": root, "diagnostics": diagnostics}
    if method == "gcv":
        sigma, flags, evals, trail = _golden_min(lambda s: gcv_value(s)[0], bounds,
                                                 rel_tol=1e-4, max_evals=200)
        diagnostics.update(flags=flags, n_evals=evals,
                           trace_form_at_opt=gcv_value(sigma)[1])
        return {"sigma_b2": sigma, "diagnostics": diagnostics}
    if method == "lcurve":
        grid_vals = np.geomspace(bounds[0], bounds[1], n_grid)
        reg_norm = np.empty(n_grid)
        misfit = np.empty(n_grid)
        for i, s in enumerate(grid_vals):
            x_hat = threedvar_estimate(problem.x_b, s * np.eye(len(problem.x_b)),
                                       problem.r_obs, problem.h_op, problem.d)
            reg_norm[i] = np.linalg.norm(x_hat - problem.x_b)
            misfit[i] = np.linalg.norm(problem.d - problem.h_op @ x_hat)
        idx, curvature = lcurve_corner(np.log(misfit), np.log(reg_norm))
        diagnostics.update(grid=grid_vals, misfit=misfit, reg_norm=reg_norm,
                           curvature=curvature)
        return {"sigma_b2": float(grid_vals[idx]), "diagnostics": diagnostics}
    raise ValueError(f"unknown method {method!r}")


def threedvar_loo_bruteforce(problem: ThreeDVarProblem, sigma_b2: float) -> float:
    """Literal leave-one-out: re-solve the static problem without each datum."""
    m = problem.m
    if m > 8:
        raise ValueError("brute-force LOO is limited to m <= 8")
    b_cov = sigma_b2 * np.eye(len(problem.x_b))
    total = 0.0
    for k in range(m):
        keep = np.ones(m, dtype=bool)
        keep[k] = False
        x_hat = threedvar_estimate(problem.x_b, b_cov,
                                   problem.r_obs[np.ix_(keep, keep)],
                                   problem.h_op[keep], problem.d[keep])
        pred = problem.h_op[k] @ x_hat
        total += (pred - problem.d[k]) ** 2 / problem.r_obs[k, k]
    return total / m


def loo_bruteforce(problem: rep_mod.AssimilationProblem, spec) -> float:
    """Literal leave-one-out for the representer problem (M + 1 assimilations)."""
    obs = problem.obs
    if obs.m > 8:
        raise ValueError("brute-force LOO is limited to M <= 8")
    total = 0.0
    for k in range(obs.m):
        obs_k = obs.drop(k)
        sub = rep_mod.AssimilationProblem(problem.model, obs_k, problem.q_F)
        sys_k = sub.system(spec)
        est = rep_mod.optimal_estimate(sys_k)
        from .observation import interpolate

        pred = interpolate(est, (np.array([obs.xs[k]]), np.array([obs.ts[k]])))[0]
        total += (pred - obs.d[k]) ** 2 / obs.sigma[k] ** 2
    return total / obs.m
