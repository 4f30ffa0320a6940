"""1D pollutant transport on a space-time grid.

Upwind finite-volume forward solver (forward Euler in time), the exact
discrete adjoint (transpose of the one-step update), the analytic
two-source emission term, and the bilinear space-time interpolation
stencil shared by the observation operator and the adjoint impulse
deposition.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np

__all__ = [
    "BoundaryKind",
    "Grid",
    "FieldST",
    "SourceParams",
    "AdvectionModel",
    "CFLError",
    "DomainError",
    "source_eval",
    "source_field",
    "solve_forward",
    "solve_adjoint",
    "build_step_matrix",
    "interp_stencils",
    "deposit_stencils",
]

_CFL_SLACK = 1.0 + 1e-12


class CFLError(ValueError):
    """Raised when a solve would violate the advective stability bound."""


class DomainError(ValueError):
    """Raised for points or impulses outside the closed space-time domain."""


class BoundaryKind(Enum):
    PERIODIC = "periodic"
    NO_FLUX = "no_flux"

    @classmethod
    def parse(cls, name):
        key = str(name).strip().lower().replace(" ", "_").replace("-", "_")
        if key in ("noflux", "no_flux"):
            return cls.NO_FLUX
        if key == "periodic":
            return cls.PERIODIC
        raise ValueError(f"unknown boundary kind: {name!r}")


@dataclass(frozen=True)
class Grid:
    """Uniform space-time grid: nx cells in x, nt time levels.

    Cell centers carry the state; time levels include both endpoints,
    so dx = (x_max - x_min) / nx and dt = (t_max - t_min) / (nt - 1).
    """

    x_min: float = 30.0
    x_max: float = 45.0
    t_min: float = 0.0
    t_max: float = 20.0
    nx: int = 200
    nt: int = 445

    def __post_init__(self):
        if self.nx < 2 or self.nt < 2:
            raise ValueError("grid needs nx >= 2 and nt >= 2")
        if not (self.x_max > self.x_min and self.t_max > self.t_min):
            raise ValueError("grid extents must be positive")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.nx

    @property
    def dt(self) -> float:
        return (self.t_max - self.t_min) / (self.nt - 1)

    @cached_property
    def x_centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.nx) + 0.5) * self.dx

    @cached_property
    def t_levels(self) -> np.ndarray:
        return self.t_min + np.arange(self.nt) * self.dt

    @property
    def size(self) -> int:
        return self.nx * self.nt

    def cfl_number(self, u: float) -> float:
        return abs(u) * self.dt / self.dx

    def require_cfl(self, u: float) -> None:
        c = self.cfl_number(u)
        if c > _CFL_SLACK:
            raise CFLError(
                f"CFL violation: |u| dt/dx = {c:.6g} > 1 "
                f"(u={u}, dt={self.dt:.6g}, dx={self.dx:.6g})"
            )

    def contains(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        return (
            (x >= self.x_min) & (x <= self.x_max)
            & (t >= self.t_min) & (t <= self.t_max)
        )


@dataclass
class FieldST:
    """Scalar field over the full space-time grid, shape (nt, nx)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.nt, self.grid.nx):
            raise ValueError(
                f"field shape {self.values.shape} does not match grid "
                f"({self.grid.nt}, {self.grid.nx})"
            )

    def copy(self) -> "FieldST":
        return FieldST(self.grid, self.values.copy())


@dataclass(frozen=True)
class SourceParams:
    """Two-Gaussian emission term: amplitude, center, spatial and temporal decay."""

    s0: float = 0.0
    x0: float = 33.0
    alpha0: float = 0.0
    k0: float = 0.0
    s1: float = 0.0
    x1: float = 40.0
    alpha1: float = 0.0
    k1: float = 0.0

    def __post_init__(self):
        if min(self.alpha0, self.alpha1, self.k0, self.k1) < 0:
            raise ValueError("decay rates alpha0, alpha1, k0, k1 must be >= 0")

    @property
    def is_zero(self) -> bool:
        return self.s0 == 0.0 and self.s1 == 0.0


def source_eval(params: SourceParams, x, t):
    """Emission rate at (x, t); broadcasts over array inputs."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    out = params.s0 * np.exp(-params.alpha0 * (x - params.x0) ** 2 - params.k0 * t)
    if params.s1 != 0.0:
        out = out + params.s1 * np.exp(
            -params.alpha1 * (x - params.x1) ** 2 - params.k1 * t
        )
    return out


def source_field(params: SourceParams, grid: Grid) -> np.ndarray:
    """Source evaluated at every cell center and time level, shape (nt, nx)."""
    return source_eval(params, grid.x_centers[None, :], grid.t_levels[:, None])


@dataclass(frozen=True)
class AdvectionModel:
    """Bundle of (grid, wind speed, boundary condition) for the linear model."""

    grid: Grid
    u: float
    bc: BoundaryKind

    def __post_init__(self):
        self.grid.require_cfl(self.u)

    def solve_forward(self, source=None, extra_forcing=None, q_init=None) -> FieldST:
        return solve_forward(self.grid, self.u, self.bc, source, extra_forcing, q_init)

    def solve_adjoint(self, impulses) -> FieldST:
        return solve_adjoint(self.grid, self.u, self.bc, impulses)

    def step_matrix(self) -> np.ndarray:
        return build_step_matrix(self.grid, self.u, self.bc)


def _steppers(grid: Grid, u: float, bc: BoundaryKind):
    """One-step update q -> A q and its exact transpose, acting on the last axis."""
    c = u * grid.dt / grid.dx
    if c == 0.0:
        ident = lambda q: q.copy()  # noqa: E731
        return ident, ident

    if bc is BoundaryKind.PERIODIC:
        if c > 0:
            def step(q):
                return q - c * (q - np.roll(q, 1, axis=-1))

            def step_t(lam):
                return lam - c * (lam - np.roll(lam, -1, axis=-1))
        else:
            a = -c

            def step(q):
                return q - a * (q - np.roll(q, -1, axis=-1))

            def step_t(lam):
                return lam - a * (lam - np.roll(lam, 1, axis=-1))
        return step, step_t

    # No-flux: zero-gradient ghost cells at both ends.
    if c > 0:
        def step(q):
            out = (1.0 - c) * q
            out[..., 1:] += c * q[..., :-1]
            out[..., 0] += c * q[..., 0]
            return out

        def step_t(lam):
            out = (1.0 - c) * lam
            out[..., :-1] += c * lam[..., 1:]
            out[..., 0] += c * lam[..., 0]
            return out
    else:
        a = -c

        def step(q):
            out = (1.0 - a) * q
            out[..., :-1] += a * q[..., 1:]
            out[..., -1] += a * q[..., -1]
            return out

        def step_t(lam):
            out = (1.0 - a) * lam
            out[..., 1:] += a * lam[..., :-1]
            out[..., -1] += a * lam[..., -1]
            return out

    return step, step_t


def forward_sweep(grid, u, bc, q_init, forcing=None, source=None) -> np.ndarray:
    """Advance q_init through all time levels; supports batched leading axes.

    q_init has shape (..., nx); forcing, if given, has shape (..., nt, nx)
    and its level-n slice acts on the step from level n to n+1 (the final
    level is never used). source is a plain (nt, nx) array shared by every
    batch member.
    """
    grid.require_cfl(u)
    step, _ = _steppers(grid, u, bc)
    nt, nx = grid.nt, grid.nx
    q_init = np.asarray(q_init, dtype=float)
    if q_init.shape[-1] != nx:
        raise ValueError(f"q_init length {q_init.shape[-1]} != nx {nx}")
    out = np.zeros(q_init.shape[:-1] + (nt, nx))
    out[..., 0, :] = q_init
    dt = grid.dt
    for n in range(nt - 1):
        nxt = step(out[..., n, :])
        if source is not None:
            nxt += dt * source[n]
        if forcing is not None:
            nxt += dt * forcing[..., n, :]
        out[..., n + 1, :] = nxt
    return out


def adjoint_sweep(grid, u, bc, deposits) -> np.ndarray:
    """Backward sweep with the exact transpose of the one-step update.

    deposits has shape (..., nt, nx) and holds raw interpolation-weight
    impulse deposits (amplitude times stencil weight), added level by
    level from the zero terminal state. The result is the plain
    transpose recursion: level n collects (A^T)^{j-n} applied to every
    deposit at levels j >= n.
    """
    grid.require_cfl(u)
    _, step_t = _steppers(grid, u, bc)
    nt = grid.nt
    deposits = np.asarray(deposits, dtype=float)
    lam = np.zeros_like(deposits)
    lam[..., nt - 1, :] = deposits[..., nt - 1, :]
    for n in range(nt - 2, -1, -1):
        lam[..., n, :] = step_t(lam[..., n + 1, :]) + deposits[..., n, :]
    return lam


def solve_forward(grid, u, bc, source=None, extra_forcing=None, q_init=None) -> FieldST:
    """Integrate the upwind finite-volume model over the whole window.

    Parameters
    ----------
    source : SourceParams or None
        Analytic emission term, evaluated at cell centers and time levels.
    extra_forcing : FieldST or (nt, nx) array or None
        Additional forcing on the model grid (the covariance-convolved
        adjoint in the representer equations).
    q_init : (nx,) array or None
        Initial cell averages; zeros when omitted.
    """
    src = None if source is None or source.is_zero else source_field(source, grid)
    forcing = None
    if extra_forcing is not None:
        forcing = extra_forcing.values if isinstance(extra_forcing, FieldST) else np.asarray(extra_forcing, dtype=float)
        if forcing.shape != (grid.nt, grid.nx):
            raise ValueError(
                f"extra_forcing shape {forcing.shape} does not match grid "
                f"({grid.nt}, {grid.nx})"
            )
    if q_init is None:
        q_init = np.zeros(grid.nx)
    values = forward_sweep(grid, u, bc, q_init, forcing=forcing, source=src)
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("forward solve produced non-finite values")
    return FieldST(grid, values)


def solve_adjoint(grid, u, bc, impulses) -> FieldST:
    """Solve the backward (adjoint) problem for a set of point impulses.

    impulses is a sequence of (x, t, amplitude) triples. Each impulse is
    deposited with the observation-operator stencil at (x, t) as a
    delta-function density (a stencil deposit carries mass 1/(dx dt)
    over one slab, hence a net 1/dx per backward step); the sweep uses
    the exact transpose of the forward update and the returned field
    approximates the continuum Green's function.
    """
    impulses = list(impulses)
    deposits = np.zeros((grid.nt, grid.nx))
    if impulses:
        xs = np.array([p[0] for p in impulses], dtype=float)
        ts = np.array([p[1] for p in impulses], dtype=float)
        amps = np.array([p[2] for p in impulses], dtype=float)
        deposit_stencils(grid, deposits, xs, ts, amps)
    values = adjoint_sweep(grid, u, bc, deposits) / grid.dx
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("adjoint solve produced non-finite values")
    return FieldST(grid, values)


def build_step_matrix(grid, u, bc, max_entries: int = 4_000_000) -> np.ndarray:
    """Materialize the one-step update matrix A with q^{n+1} = A q^n + dt (...)."""
    nx = grid.nx
    if nx * nx > max_entries:
        raise ValueError(f"step matrix would hold {nx * nx} entries (cap {max_entries})")
    grid.require_cfl(u)
    step, _ = _steppers(grid, u, bc)
    # Row j of step(eye) is A applied to e_j, i.e. column j of A.
    return step(np.eye(nx)).T.copy()


def interp_stencils(grid: Grid, xs, ts):
    """Bilinear interpolation stencils at space-time points.

    Returns (levels, cells, weights), each of shape (M, 4), with convex
    weights (nonnegative, summing to 1). Interpolation is bilinear in
    cell-center coordinates and time levels; the half-cell margins next
    to the x boundaries clamp to the edge cell.
    """
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    if xs.shape != ts.shape:
        raise ValueError("xs and ts must have the same shape")
    inside = grid.contains(xs, ts)
    if not np.all(inside):
        bad = np.argwhere(~inside)[0][0]
        raise DomainError(f"point ({xs[bad]}, {ts[bad]}) outside the grid domain")

    sx = (xs - (grid.x_min + 0.5 * grid.dx)) / grid.dx
    i0 = np.clip(np.floor(sx).astype(int), 0, grid.nx - 2)
    wx = np.clip(sx - i0, 0.0, 1.0)

    st = (ts - grid.t_min) / grid.dt
    n0 = np.clip(np.floor(st).astype(int), 0, grid.nt - 2)
    wt = np.clip(st - n0, 0.0, 1.0)

    levels = np.stack([n0, n0, n0 + 1, n0 + 1], axis=1)
    cells = np.stack([i0, i0 + 1, i0, i0 + 1], axis=1)
    weights = np.stack(
        [(1 - wt) * (1 - wx), (1 - wt) * wx, wt * (1 - wx), wt * wx], axis=1
    )
    return levels, cells, weights


def deposit_stencils(grid, target, xs, ts, amplitudes) -> None:
    """Accumulate amplitude-weighted stencils into target (shape (nt, nx))."""
    levels, cells, weights = interp_stencils(grid, xs, ts)
    amps = np.broadcast_to(np.asarray(amplitudes, dtype=float), weights.shape[:1])
    np.add.at(target, (levels.ravel(), cells.ravel()), (weights * amps[:, None]).ravel())
