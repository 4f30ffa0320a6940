"""Hyperparameter selection for the model-error covariance.

Three criteria over the assembled data-space system: the L-curve corner
(maximum curvature of the log-log misfit/regularization curve), GCV (the
closed-form leave-one-out sum), and the chi-squared match of the
minimized cost to the observation count. Single-variance searches run in
log space; the three-hyperparameter searches use projected Nelder-Mead
with multi-start.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.optimize import minimize

from .covariance import Isotropic, NonIsotropic, spec_to_dict
from .representer import AssimilationProblem, penalties

__all__ = [
    "HyperBox",
    "SelectionResult",
    "SelectionError",
    "lcurve_select",
    "lcurve_corner",
    "gcv_eval",
    "gcv_select_1d",
    "chi2_select_1d",
    "gcv_select_multi",
    "chi2_select_multi",
]

DEFAULT_SIGMA_BOUNDS = (1e-6, 1e2)


class SelectionError(RuntimeError):
    """A selection criterion could not be evaluated (degenerate inputs)."""


@dataclass(frozen=True)
class HyperBox:
    """Search box for the non-isotropic hyperparameters."""

    sigma_f2: tuple = (1e-6, 9.0)
    l_f: tuple = (1.0, 15.0)
    tau_f: tuple = (1.0, 20.0)

    def __post_init__(self):
        for lo, hi in (self.sigma_f2, self.l_f, self.tau_f):
            if not (0 < lo <= hi):
                raise ValueError("box bounds must be positive and ordered")


@dataclass
class SelectionResult:
    method: str
    params: dict
    n_runs: int
    flags: list = dc_field(default_factory=list)
    diagnostics: dict = dc_field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "params": self.params,
            "n_runs": self.n_runs,
            "flags": list(self.flags),
        }
        out["diagnostics"] = {
            k: (v.tolist() if isinstance(v, np.ndarray) else v)
            for k, v in self.diagnostics.items()
        }
        return out


def _default_family(ci_variance: float = 0.0):
    return lambda sigma_f2: Isotropic(sigma_f2, ci_variance)


# ---------------------------------------------------------------------------
# L-curve


def lcurve_corner(log_x: np.ndarray, log_y: np.ndarray):
    """Index of maximum signed curvature on a log-log curve.

    Curvature uses centered finite differences in the point index;
    endpoints cannot be centered and are excluded from the search.
    """
    log_x = np.asarray(log_x, dtype=float)
    log_y = np.asarray(log_y, dtype=float)
    if len(log_x) < 5:
        raise ValueError("need at least 5 curve points")
    dx = np.gradient(log_x)
    dy = np.gradient(log_y)
    ddx = np.gradient(dx)
    ddy = np.gradient(dy)
    denom = (dx**2 + dy**2) ** 1.5
    with np.errstate(divide="ignore", invalid="ignore"):
        curvature = np.where(denom > 0, (dx * ddy - dy * ddx) / denom, 0.0)
    interior = curvature.copy()
    interior[0] = interior[-1] = -np.inf
    return int(np.argmax(interior)), curvature


def _corner_angle_index(log_x, log_y):
    """Sharpest-bend point: minimum angle to the two curve endpoints.

    Axes are normalized to unit span first so the angle is scale-free.
    """
    x = (log_x - log_x.min()) / max(np.ptp(log_x), 1e-300)
    y = (log_y - log_y.min()) / max(np.ptp(log_y), 1e-300)
    va = np.stack([x[0] - x, y[0] - y], axis=1)
    vb = np.stack([x[-1] - x, y[-1] - y], axis=1)
    dots = np.sum(va * vb, axis=1)
    norms = np.linalg.norm(va, axis=1) * np.linalg.norm(vb, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cosang = np.where(norms > 0, dots / norms, -1.0)
    angles = np.arccos(np.clip(cosang, -1.0, 1.0))
    angles[0] = angles[-1] = np.inf
    return int(np.argmin(angles))


def lcurve_select(problem: AssimilationProblem, sigma_grid=None,
                  family=None) -> SelectionResult:
    """Corner of the (log J_data, log sigma_f^2 J_mod) curve over a grid."""
    if sigma_grid is None:
        sigma_grid = np.geomspace(*DEFAULT_SIGMA_BOUNDS, 100)
    sigma_grid = np.asarray(sigma_grid, dtype=float)
    if len(sigma_grid) < 5 or np.any(np.diff(sigma_grid) <= 0):
        raise ValueError("sigma_grid must be strictly increasing with >= 5 points")
    family = family or _default_family()

    j_data = np.empty(len(sigma_grid))
    j_mod = np.empty(len(sigma_grid))
    for i, s in enumerate(sigma_grid):
        pen = penalties(problem.system(family(s)))
        j_data[i] = pen.j_data
        j_mod[i] = pen.j_mod
    reg_norm = sigma_grid * j_mod
    if not (np.all(np.isfinite(j_data)) and np.all(np.isfinite(reg_norm))
            and np.all(j_data > 0) and np.all(reg_norm > 0)):
        bad = sigma_grid[~(np.isfinite(j_data) & np.isfinite(reg_norm)
                           & (j_data > 0) & (reg_norm > 0))]
        raise SelectionError(f"degenerate L-curve at sigma_f2 = {bad.tolist()}")

    log_x = np.log(j_data)
    log_y = np.log(reg_norm)
    idx, curvature = lcurve_corner(log_x, log_y)
    return SelectionResult(
        method="lcurve",
        params={"sigma_f2": float(sigma_grid[idx])},
        n_runs=len(sigma_grid),
        diagnostics={
            "sigma_grid": sigma_grid,
            "j_data": j_data,
            "j_mod": j_mod,
            "curvature": curvature,
            "corner_index": idx,
            "corner_angle_index": _corner_angle_index(log_x, log_y),
        },
    )


# ---------------------------------------------------------------------------
# GCV


def gcv_eval(problem: AssimilationProblem, spec, form: str = "loo") -> float:
    """Cross-validation score for one covariance spec.

    form="loo" is the closed-form leave-one-out sum with per-datum
    influence denominators (exactly the brute-force leave-one-out value).
    form="trace" is the classical trace-normalized score
    M * J_data / tr(C_eps P^{-1})^2; the two coincide when the influence
    diagonal is constant. The trace form stays regular when some noise
    variances are many orders of magnitude below the rest (proportional
    noise over near-zero concentrations), where the leave-one-out weights
    degenerate.
    """
    system = problem.system(spec)
    y = system.p_solve(system.h)
    weighted = system.c_eps * y**2
    if form == "trace":
        trace = float(np.sum(system.c_eps * system.pinv_diag()))
        if trace == 0.0:
            raise SelectionError("vanishing influence trace: all noise variances are zero")
        return float(system.m * np.sum(weighted) / trace**2)
    if form != "loo":
        raise ValueError(f"unknown GCV form {form!r}")
    denom = system.c_eps * system.pinv_diag()  # = 1 - (R P^{-1})_kk
    if np.any(denom == 0.0):
        raise SelectionError(
            "vanishing GCV denominator: a datum is interpolated exactly "
            "(zero noise variance)"
        )
    with np.errstate(over="ignore"):
        terms = weighted / denom**2
    return float(np.mean(terms))


def _golden_min(func, bounds, rel_tol=1e-3, max_evals=60, n_presample=13):
    """Coarse geometric presample plus golden-section refinement in log space.

    Returns (argmin, flags, n_evals, trail). The presample brackets the
    global minimum among sampled points, which guards against narrow
    non-unimodal dips; multiple local minima in the scan are flagged.
    """
    lo, hi = np.log(bounds[0]), np.log(bounds[1])
    cache: dict[float, float] = {}
    trail = []

    def f(z):
        if z not in cache:
            cache[z] = func(float(np.exp(z)))
            trail.append((float(np.exp(z)), cache[z]))
        return cache[z]

    flags = []
    zs = np.linspace(lo, hi, n_presample)
    vals = np.array([f(z) for z in zs])
    if not np.all(np.isfinite(vals)):
        flags.append("non_finite_values")
        finite = np.isfinite(vals)
        if not np.any(finite):
            raise SelectionError("criterion not finite anywhere on the search grid")
        vals = np.where(finite, vals, np.inf)
    interior_minima = np.sum((vals[1:-1] < vals[:-2]) & (vals[1:-1] < vals[2:]))
    if interior_minima > 1:
        flags.append("multimodal_scan")
    k = int(np.argmin(vals))
    if k == 0 or k == len(zs) - 1:
        flags.append("boundary_minimum")
        a, b = (zs[0], zs[1]) if k == 0 else (zs[-2], zs[-1])
    else:
        a, b = zs[k - 1], zs[k + 1]

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > rel_tol and len(cache) < max_evals:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    if (b - a) > rel_tol:
        flags.append("eval_budget_exhausted")
    z_best = min(cache, key=cache.get)
    return float(np.exp(z_best)), flags, len(cache), trail


def gcv_select_1d(problem: AssimilationProblem, bounds=DEFAULT_SIGMA_BOUNDS,
                  family=None, rel_tol=1e-3, max_runs=60,
                  form: str = "loo") -> SelectionResult:
    """Minimize the GCV score over sigma_f^2 in log space."""
    family = family or _default_family()
    sigma, flags, n_evals, trail = _golden_min(
        lambda s: gcv_eval(problem, family(s), form=form), bounds,
        rel_tol=rel_tol, max_evals=max_runs,
    )
    return SelectionResult(
        method="gcv",
        params={"sigma_f2": sigma},
        n_runs=n_evals,
        flags=flags,
        diagnostics={"evaluations": np.array(trail), "form": form},
    )


# ---------------------------------------------------------------------------
# Chi-squared


def _bisect_decreasing(func, bounds, target, rel_tol=1e-6, max_evals=60):
    """Root of func(s) = target for func nonincreasing in s, bisecting log s.

    Returns (root, flags, n_evals). Without a bracket the nearest bound is
    returned, flagged.
    """
    lo, hi = np.log(bounds[0]), np.log(bounds[1])
    n_evals = 0
    f_lo = func(float(np.exp(lo)))
    n_evals += 1
    if f_lo < target:
        return float(bounds[0]), ["unbracketed_low"], n_evals
    f_hi = func(float(np.exp(hi)))
    n_evals += 1
    if f_hi > target:
        return float(bounds[1]), ["unbracketed_high"], n_evals

    flags: list[str] = []
    root = None
    while n_evals < max_evals:
        mid = 0.5 * (lo + hi)
        f_mid = func(float(np.exp(mid)))
        n_evals += 1
        if abs(f_mid - target) <= rel_tol * target:
            root = mid
            break
        if f_mid > target:
            lo = mid
        else:
            hi = mid
    if root is None:
        root = 0.5 * (lo + hi)
        flags.append("tolerance_not_reached")
    return float(np.exp(root)), flags, n_evals


def chi2_select_1d(problem: AssimilationProblem, bounds=DEFAULT_SIGMA_BOUNDS,
                   family=None, rel_tol=1e-6, max_runs=60) -> SelectionResult:
    """Solve J(sigma_f^2) = h^T P^{-1} h = M by bisection in log sigma_f^2."""
    family = family or _default_family()
    m = problem.obs.m
    trail = []

    def j_hat(s):
        system = problem.system(family(s))
        value = float(system.h @ system.p_solve(system.h))
        trail.append((s, value))
        return value

    root, flags, n_evals = _bisect_decreasing(j_hat, bounds, target=float(m),
                                              rel_tol=rel_tol, max_evals=max_runs)
    return SelectionResult(
        method="chi2",
        params={"sigma_f2": root},
        n_runs=n_evals,
        flags=flags,
        diagnostics={"evaluations": np.array(trail), "target": float(m)},
    )


# ---------------------------------------------------------------------------
# Multi-parameter searches (sigma_f^2, l_f, tau_f)


def _project_to_box(v, box: HyperBox):
    log_s = np.clip(v[0], np.log(box.sigma_f2[0]), np.log(box.sigma_f2[1]))
    l_f = np.clip(v[1], *box.l_f)
    tau_f = np.clip(v[2], *box.tau_f)
    return float(np.exp(log_s)), float(l_f), float(tau_f)


def _simplex_min(func, box: HyperBox, rel_tol=1e-3, max_evals=200):
    """Projected Nelder-Mead from four box corners plus the center."""
    log_s_lo, log_s_hi = np.log(box.sigma_f2[0]), np.log(box.sigma_f2[1])

    def inset(lo, hi, frac):
        return lo + frac * (hi - lo)

    starts = []
    for fs, fl, ft in [(0.05, 0.05, 0.05), (0.95, 0.95, 0.95),
                       (0.05, 0.95, 0.05), (0.95, 0.05, 0.95),
                       (0.5, 0.5, 0.5)]:
        starts.append(np.array([
            inset(log_s_lo, log_s_hi, fs),
            inset(*box.l_f, fl),
            inset(*box.tau_f, ft),
        ]))

    count = {"n": 0}
    cache: dict[tuple, float] = {}

    def wrapped(v):
        params = _project_to_box(v, box)
        if params not in cache:
            count["n"] += 1
            cache[params] = func(*params)
        return cache[params]

    best_v, best_val = None, np.inf
    flags: list[str] = []
    scale = abs(wrapped(starts[-1])) or 1.0
    simplex_spread = np.inf
    for i, start in enumerate(starts):
        budget = max_evals - count["n"]
        if budget < 8:
            flags.append("start_budget_exhausted")
            break
        res = minimize(
            wrapped, start, method="Nelder-Mead",
            options={
                "maxfev": budget,
                "fatol": rel_tol * scale,
                "xatol": 1e-3,
                "initial_simplex": _initial_simplex(start, box),
            },
        )
        if res.fun < best_val:
            best_val = float(res.fun)
            best_v = res.x
            simplex_spread = float(np.max(
                np.linalg.norm(res.final_simplex[0] - res.final_simplex[0][0], axis=1)
            ))
            scale = abs(best_val) or scale
    if best_v is None:
        raise SelectionError("no multi-parameter start could be evaluated")
    params = _project_to_box(best_v, box)
    return params, best_val, count["n"], flags, simplex_spread, cache


def _parsimony_pick(cache, best_val, margin):
    """Smallest sigma_f^2 among sampled points scoring within the margin.

    Resolves flat objectives (the score's sampling noise is O(1/sqrt(M)))
    toward the most regularized hyperparameters rather than the noise of
    the landscape.
    """
    good = [p for p, v in cache.items()
            if np.isfinite(v) and v <= best_val * (1.0 + margin) + 1e-300]
    return min(good, key=lambda p: p[0]) if good else None


def _initial_simplex(start, box: HyperBox):
    spans = np.array([
        np.log(box.sigma_f2[1]) - np.log(box.sigma_f2[0]),
        box.l_f[1] - box.l_f[0],
        box.tau_f[1] - box.tau_f[0],
    ])
    simplex = [start]
    for i in range(3):
        v = start.copy()
        v[i] += 0.15 * spans[i] * (1 if v[i] < start[i] + 0.5 * spans[i] else -1)
        simplex.append(v)
    return np.array(simplex)


def gcv_select_multi(problem: AssimilationProblem, box: HyperBox | None = None,
                     ci_variance: float = 0.0, rel_tol=1e-3, max_runs=200,
                     form: str = "loo", parsimony_margin: float = 0.2) -> SelectionResult:
    """Minimize GCV over (sigma_f^2, l_f, tau_f) inside the box."""
    box = box or HyperBox()

    def objective(sigma_f2, l_f, tau_f):
        try:
            return gcv_eval(problem, NonIsotropic(sigma_f2, l_f, tau_f, ci_variance),
                            form=form)
        except SelectionError:
            return np.inf

    (s, l_f, tau_f), best, n_evals, flags, spread, cache = _simplex_min(
        objective, box, rel_tol=rel_tol, max_evals=max_runs
    )
    if not np.isfinite(best):
        flags = flags + ["no_improvement"]
    pick = _parsimony_pick(cache, best, parsimony_margin)
    if pick is not None and pick != (s, l_f, tau_f):
        s, l_f, tau_f = pick
        flags = flags + ["parsimony_tie_break"]
    return SelectionResult(
        method="gcv",
        params={"sigma_f2": s, "l_f": l_f, "tau_f": tau_f},
        n_runs=n_evals,
        flags=flags,
        diagnostics={"gcv_value": best, "gcv_at_selected": cache.get((s, l_f, tau_f)),
                     "simplex_spread": spread, "form": form},
    )


def chi2_select_multi(problem: AssimilationProblem, box: HyperBox | None = None,
                      ci_variance: float = 0.0, success_tol=1e-3,
                      max_runs=200) -> SelectionResult:
    """Drive J(sigma_f^2, l_f, tau_f) to M by squared-residual minimization.

    One equation in three unknowns: the criterion defines a solution
    manifold. Among sampled points meeting the residual tolerance, the
    one with the smallest sigma_f^2 is returned (most regularized root);
    the final simplex spread in the diagnostics indicates how flat the
    approach was.
    """
    box = box or HyperBox()
    m = float(problem.obs.m)

    def objective(sigma_f2, l_f, tau_f):
        system = problem.system(NonIsotropic(sigma_f2, l_f, tau_f, ci_variance))
        j_hat = float(system.h @ system.p_solve(system.h))
        return ((j_hat - m) / m) ** 2

    (s, l_f, tau_f), best, n_evals, flags, spread, cache = _simplex_min(
        objective, box, rel_tol=1e-2 * success_tol**2, max_evals=max_runs
    )
    roots = [p for p, v in cache.items() if np.sqrt(v) <= success_tol]
    if roots:
        pick = min(roots, key=lambda p: p[0])
        if pick != (s, l_f, tau_f):
            s, l_f, tau_f = pick
            flags = flags + ["manifold_tie_break"]
        best = cache[pick]
    final_gap = np.sqrt(best) * m
    if final_gap > success_tol * m:
        flags = flags + ["chi2_residual_above_tol"]
    return SelectionResult(
        method="chi2",
        params={"sigma_f2": s, "l_f": l_f, "tau_f": tau_f},
        n_runs=n_evals,
        flags=flags,
        diagnostics={"abs_gap": float(final_gap), "target": m,
                     "simplex_spread": spread},
    )
