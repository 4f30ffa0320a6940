"""Oracle-equivalence and invariant suite on tiny grids.

Each instance builds a twin experiment small enough for the full-space
direct solve, then checks that the representer path reproduces the
direct trajectory at the observation points, the representer matrix and
coefficients, the penalty identities, and the closed-form GCV against
literal leave-one-out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import oracle as oracle_mod
from . import representer as rep_mod
from .covariance import Isotropic
from .observation import ObservationSet, interpolate, sample_locations
from .param_select import gcv_eval
from .transport import AdvectionModel, BoundaryKind, Grid, SourceParams, solve_forward

__all__ = ["CheckResult", "tiny_instances", "build_instance", "run_validation"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


@dataclass
class TinyInstance:
    name: str
    model: AdvectionModel
    obs: ObservationSet
    q_F: "object"
    source: SourceParams
    q_init: np.ndarray
    cov: Isotropic


def tiny_instances() -> list[dict]:
    """Instance matrix: both boundary kinds, sigma_f2 in {0.1, 1, 10}.

    All grids stay inside nx <= 25, nt <= 20 and satisfy CFL for u = 1;
    the larger cell counts use a shortened time window.
    """
    return [
        dict(name="periodic-s0.1", nx=10, nt=15, m=5, sigma_f2=0.1,
             bc="periodic", noise=0.3, seed=101),
        dict(name="periodic-s1", nx=25, nt=20, t_max=10.0, m=8, sigma_f2=1.0,
             bc="periodic", noise=0.25, seed=202),
        dict(name="periodic-s10", nx=22, nt=17, t_max=10.0, m=6, sigma_f2=10.0,
             bc="periodic", noise=0.2, seed=303),
        dict(name="noflux-s0.1", nx=24, nt=18, t_max=10.0, m=7, sigma_f2=0.1,
             bc="no_flux", noise=0.3, seed=404),
        dict(name="noflux-s1", nx=14, nt=20, m=5, sigma_f2=1.0,
             bc="no_flux", noise=0.35, seed=505),
        dict(name="noflux-s10", nx=12, nt=18, m=8, sigma_f2=10.0,
             bc="no_flux", noise=0.25, seed=606),
        dict(name="periodic-s1-ci", nx=12, nt=18, m=5, sigma_f2=1.0,
             bc="periodic", noise=0.3, seed=707, ci_variance=0.5),
    ]


def build_instance(spec: dict) -> TinyInstance:
    """Twin experiment on a tiny grid with a broad source (no dead zones)."""
    grid = Grid(nx=spec["nx"], nt=spec["nt"], t_max=spec.get("t_max", 20.0))
    model = AdvectionModel(grid, 1.0, BoundaryKind.parse(spec["bc"]))
    source = SourceParams(s0=50.0, x0=34.0, alpha0=0.1, k0=0.2,
                          s1=20.0, x1=40.0, alpha1=0.05, k1=0.1)
    truth = model.solve_forward(source=source)

    rng = np.random.default_rng(spec["seed"] + 1)
    xs, ts = sample_locations(grid, spec["m"], spec["seed"])
    truth_at = interpolate(truth, (xs, ts))
    sigma = spec["noise"] * np.abs(truth_at) + 1e-3  # keep weights finite
    d = truth_at + sigma * rng.standard_normal(spec["m"])
    obs = ObservationSet(grid, xs, ts, d, sigma, seed=spec["seed"])

    fg_source = SourceParams(s0=50.0, x0=34.0, alpha0=0.1 * 1.15, k0=0.2 * 0.9,
                             s1=20.0, x1=40.0, alpha1=0.05 * 1.1, k1=0.1 * 1.2)
    q_f = model.solve_forward(source=fg_source)
    cov = Isotropic(spec["sigma_f2"], spec.get("ci_variance", 0.0))
    return TinyInstance(spec["name"], model, obs, q_f, fg_source,
                        np.zeros(grid.nx), cov)


def _rel(a, b) -> float:
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-30)
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))) / scale)


def run_validation(size: str = "tiny") -> list[CheckResult]:
    if size != "tiny":
        raise ValueError("only the tiny suite is defined")
    checks: list[CheckResult] = []
    for spec in tiny_instances():
        inst = build_instance(spec)
        system = rep_mod.assemble_system(inst.model, inst.cov, inst.obs, inst.q_F)
        est = rep_mod.optimal_estimate(system)
        problem = oracle_mod.FullSpaceProblem(
            model=inst.model, source=inst.source, q_init=inst.q_init,
            obs=inst.obs, cov=inst.cov,
        )
        direct = oracle_mod.full_space_solve(problem)

        pts = (inst.obs.xs, inst.obs.ts)
        err_state = _rel(interpolate(est, pts), interpolate(direct.trajectory, pts))
        checks.append(CheckResult(
            f"{inst.name}: representer vs full-space state",
            err_state <= 1e-8, f"rel err {err_state:.2e} (tol 1e-8)"))

        err_r = _rel(system.R, direct.R)
        checks.append(CheckResult(
            f"{inst.name}: representer matrix",
            err_r <= 1e-8, f"rel err {err_r:.2e} (tol 1e-8)"))

        err_beta = _rel(system.beta, direct.beta)
        checks.append(CheckResult(
            f"{inst.name}: coefficients",
            err_beta <= 1e-8, f"rel err {err_beta:.2e} (tol 1e-8)"))

        pen = rep_mod.penalties(system)
        gap = abs(pen.j_total - (pen.j_data + pen.j_mod))
        checks.append(CheckResult(
            f"{inst.name}: penalty identity",
            gap <= 1e-10 * max(1.0, pen.j_total),
            f"|J - (J_data + J_mod)| = {gap:.2e}"))

        err_pen = max(abs(pen.j_data - direct.j_data),
                      abs(pen.j_mod - direct.j_mod)) / max(1.0, pen.j_total)
        checks.append(CheckResult(
            f"{inst.name}: penalties vs direct solve",
            err_pen <= 1e-8, f"rel err {err_pen:.2e} (tol 1e-8)"))

        rep_problem = rep_mod.AssimilationProblem(inst.model, inst.obs, inst.q_F)
        g_closed = gcv_eval(rep_problem, inst.cov)
        g_loo = oracle_mod.loo_bruteforce(rep_problem, inst.cov)
        err_gcv = abs(g_closed - g_loo) / max(abs(g_loo), 1e-30)
        checks.append(CheckResult(
            f"{inst.name}: GCV vs leave-one-out",
            err_gcv <= 1e-8, f"rel err {err_gcv:.2e} (tol 1e-8)"))
    return checks
