"""Null-control laboratory for stochastic heat flow on bulk/surface domains
with dynamic boundary conditions.

Discretizes the coupled forward and backward systems on binary noise trees
or Monte Carlo path ensembles, computes penalized duality (HUM) controls,
and empirically verifies the weighted-energy, observability, energy and
duality estimates at desk scale.
"""

from .coefficients import (CoefficientSet, check_ellipticity, cost_constant_K,
                           lambda_min, preset_coefficients, sample_sup_norms)
from .geometry import (BulkSurfaceField, Geometry, Mesh, TimeGrid,
                       assemble_operators, build_mesh, inner_l2,
                       weak_divergence_load)
from .weights import (AuxFunction, CarlemanWeights, check_psi_properties,
                      check_weight_bounds, eval_weights, make_psi)
from .noise import (NoiseTree, PathEnsemble, build_paths, build_tree,
                    coarsen_paths, conditional_expectation,
                    martingale_increment)
from .forward import (ForwardTrajectory, SourceSet, StabilityError,
                      coupled_eigenpairs, energy_estimate_check,
                      energy_stability_study, factorization_oracle,
                      galerkin_solve, solve_forward, step_forward)
from .backward import (BackwardState, duality_residual, solve_backward,
                       terminal_from_w)
from .control import (AuxControlResult, ControlResult, ConvergenceError,
                      PenalizedProblem, aux_control, hum_control,
                      hum_control_sweep, null_control_report)
from .verify import (CarlemanReport, ObservabilityReport,
                     transpose_identity_check, verify_carleman,
                     verify_dissipation, verify_duality,
                     verify_observability)

__version__ = "0.1.0"
