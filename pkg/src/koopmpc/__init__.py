"""Lifted-linear (Koopman) MPC: identification, terminal design, solving, certificates."""

from .certify import (
    CertificateReport,
    DecayFit,
    LipschitzEstimate,
    LyapunovCheckResult,
    admissible_rho_level,
    appendix_constants,
    estimate_closed_loop_error,
    estimate_cz,
    estimate_lift_lipschitz,
    fit_decay_rate,
    lyapunov_check,
)
from .edmd import (
    Dataset,
    ResidualReport,
    SingularFitError,
    edmd_fit,
    fit_residual_report,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .lqr import RiccatiSolution, lqr_policy, solve_dare, solve_dlyap
from .model import (
    Box,
    Controller,
    Dictionary,
    LiftedModel,
    Plant,
    StageCost,
    check_lifted_model,
    example1_koopman_model,
    get_dictionary,
    get_plant,
    identity_dictionary,
    koopman_step,
    lift,
    one_step_error,
    taylor_linearize,
)
from .mpc import (
    CondensedMpc,
    InfeasibleError,
    MpcSolution,
    build_condensed,
    mpc_law,
    shifted_sequence,
    solve_kmpc,
    value_function,
)
from .sim import (
    ComparisonReport,
    Trajectory,
    compare,
    mpc_controller,
    rollout,
    save_trajectory_csv,
    value_trace,
)
from .terminal import (
    TerminalIngredients,
    design_terminal,
    terminal_cost,
    verify_prop1,
)

__version__ = "0.1.0"
