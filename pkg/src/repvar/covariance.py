"""Model-error covariance models and their action on adjoint fields.

Two families: the isotropic (white, delta-correlated) variance sigma_f^2,
under which the covariance convolution is pointwise scaling, and the
separable non-isotropic kernel, Gaussian in space and exponential
(first-order Markov) in time, applied as two successive 1D quadrature
convolutions. Initial-condition error uses a scalar variance as well.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .transport import FieldST, Grid

__all__ = [
    "Isotropic",
    "NonIsotropic",
    "kernel_eval",
    "kernel_matrices",
    "apply_cf",
    "apply_cf_values",
    "apply_ci",
    "spec_from_dict",
    "spec_to_dict",
]


@dataclass(frozen=True)
class Isotropic:
    """White model-error covariance sigma_f^2 I (single variance hyperparameter)."""

    sigma_f2: float
    ci_variance: float = 0.0

    def __post_init__(self):
        if self.sigma_f2 < 0 or self.ci_variance < 0:
            raise ValueError("variances must be nonnegative")


@dataclass(frozen=True)
class NonIsotropic:
    """Separable kernel: Gaussian in space (length l_f), exponential in time (scale tau_f)."""

    sigma_f2: float
    l_f: float
    tau_f: float
    ci_variance: float = 0.0

    def __post_init__(self):
        if self.sigma_f2 < 0 or self.ci_variance < 0:
            raise ValueError("variances must be nonnegative")
        if self.l_f <= 0 or self.tau_f <= 0:
            raise ValueError("correlation scales must be positive")


def kernel_eval(spec: NonIsotropic, x, t, xp, tp):
    """Covariance between (x, t) and (xp, tp) under the separable kernel."""
    if not isinstance(spec, NonIsotropic):
        raise TypeError("kernel_eval applies to the non-isotropic covariance")
    x, t = np.asarray(x, dtype=float), np.asarray(t, dtype=float)
    xp, tp = np.asarray(xp, dtype=float), np.asarray(tp, dtype=float)
    return (
        spec.sigma_f2
        * np.exp(-((x - xp) ** 2) / (2.0 * spec.l_f**2))
        * np.exp(-np.abs(t - tp) / spec.tau_f)
    )


@lru_cache(maxsize=32)
def kernel_matrices(spec: NonIsotropic, grid: Grid):
    """Quadrature kernel matrices (Kx with dx weights, Kt with dt weights).

    The two-pass convolution sigma_f^2 * Kt @ field @ Kx equals the full
    midpoint-quadrature double sum of the separable kernel.
    """
    x = grid.x_centers
    t = grid.t_levels
    kx = np.exp(-((x[:, None] - x[None, :]) ** 2) / (2.0 * spec.l_f**2)) * grid.dx
    kt = np.exp(-np.abs(t[:, None] - t[None, :]) / spec.tau_f) * grid.dt
    kx.setflags(write=False)
    kt.setflags(write=False)
    return kx, kt


def apply_cf_values(spec, grid: Grid, values: np.ndarray) -> np.ndarray:
    """Covariance convolution on raw values of shape (..., nt, nx)."""
    if isinstance(spec, Isotropic):
        return spec.sigma_f2 * values
    kx, kt = kernel_matrices(spec, grid)
    # Spatial pass along the last axis, temporal pass along the level axis.
    out = values @ kx
    out = np.swapaxes(np.swapaxes(out, -2, -1) @ kt.T, -2, -1)
    return spec.sigma_f2 * out


def apply_cf(spec, lam: FieldST) -> FieldST:
    """C_f convolved with an adjoint field over the whole window."""
    return FieldST(lam.grid, apply_cf_values(spec, lam.grid, lam.values))


def apply_ci(spec, lam0: np.ndarray) -> np.ndarray:
    """Initial-condition covariance action: scalar variance times lam(x, 0)."""
    return spec.ci_variance * np.asarray(lam0, dtype=float)


def spec_from_dict(payload: dict):
    kind = payload.get("type")
    extra = {k: v for k, v in payload.items() if k != "type"}
    if kind == "isotropic":
        return Isotropic(**extra)
    if kind == "non_isotropic":
        return NonIsotropic(**extra)
    raise ValueError(f"unknown covariance type: {kind!r}")


def spec_to_dict(spec) -> dict:
    if isinstance(spec, Isotropic):
        out = {"type": "isotropic", "sigma_f2": spec.sigma_f2}
    elif isinstance(spec, NonIsotropic):
        out = {
            "type": "non_isotropic",
            "sigma_f2": spec.sigma_f2,
            "l_f": spec.l_f,
            "tau_f": spec.tau_f,
        }
    else:
        raise TypeError(f"not a covariance spec: {spec!r}")
    if spec.ci_variance:
        out["ci_variance"] = spec.ci_variance
    return out
