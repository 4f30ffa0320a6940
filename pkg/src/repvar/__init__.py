"""Weak-constraint 4D-Var with representers.

A 1D pollutant-transport twin-experiment toolkit: upwind finite-volume
model with its exact discrete adjoint, representer-method assimilation,
and model-error covariance hyperparameter selection by the L-curve, GCV,
and chi-squared criteria.
"""

from .covariance import Isotropic, NonIsotropic, apply_cf, apply_ci, kernel_eval
from .experiment import ExperimentConfig, build_experiment, run_ensemble
from .observation import (
    ObservationSet,
    calibrate_and_filter,
    generate_observations,
    interpolate,
    sample_locations,
)
from .param_select import (
    HyperBox,
    SelectionResult,
    chi2_select_1d,
    chi2_select_multi,
    gcv_eval,
    gcv_select_1d,
    gcv_select_multi,
    lcurve_select,
)
from .representer import (
    AssimilationProblem,
    RepresenterSystem,
    assemble_system,
    compute_representer_pair,
    optimal_estimate,
    penalties,
)
from .transport import (
    AdvectionModel,
    BoundaryKind,
    FieldST,
    Grid,
    SourceParams,
    build_step_matrix,
    solve_adjoint,
    solve_forward,
    source_eval,
)

__version__ = "0.1.0"
