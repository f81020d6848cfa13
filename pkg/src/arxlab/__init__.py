"""Identification and adaptive control of ARX systems from input-output data."""
from .system import (ArxSystem, InstabilityError, MarkovOperator, NoiseSpec, OpenLoopUnstableError,
                     OutputFeedbackUnstableError, StabilityError, TrajectoryLog, decay_psi, default_horizon,
                     markov_parameters, output_uncertainty, random_system, simulate)
from .sysid import (ConfidenceParams, LsEstimate, NumericalError, build_regressors, confidence_radius,
                    ellipsoid_statistic, estimate_from_data, g_error_bound, pe_diagnostic, rls_estimate)
from .realization import (HankelPair, OrderDeficiencyError, RealizedSystem, build_hankel, markov_roundtrip_error,
                          parameter_confidence, realize, sysid_arx)
from .dfc import (CLOSED_LOOP, EXPLORE_COMMIT, CounterfactualState, DfcConfig, DfcPolicy, DfcSet, LossOracle,
                  counterfactual_gradient, counterfactual_loss, logcosh_loss, project, quadratic_loss,
                  run_algorithm1)
from .comparator import best_in_hindsight_dfc
from .ofu import (DareConvergenceError, DareSolution, ModelBall, OfuConfig, QuadraticCost, bellman_residual,
                  optimal_input, optimistic_select, run_algorithm2, solve_dare)
from .traces import ExponentFit, RegretTrace, fit_regret_exponent, regret_quadratic
from .harness import ExperimentConfig, run_experiment

__version__ = "0.1.0"
