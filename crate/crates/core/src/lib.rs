//! Physics-informed network training for second-order linear PDEs on the unit
//! ball: a plain gradient-descent PINN baseline and the layer-separated model,
//! which introduces auxiliary variables for each layer's output and
//! derivatives so that the outer layer and the biases admit closed-form
//! updates.

pub mod activation;
pub mod error;
pub mod linalg;
pub mod lysep;
pub mod network;
pub mod pinn;
pub mod problems;
pub mod sampling;
pub mod solver;

pub use activation::{
    activation_by_name, make_sin_activation, make_tanh_activation, theorem_constants, ActivationBundle,
    ActivationConstants, TheoremConstants,
};
pub use error::{Error, Result};
pub use lysep::{
    assemble_penalties, check_consistency, feasible_aux, lysep_loss, weighted_norm_sq, AuxState, BoundReport,
    GradientConvention, PenaltyAssembly, SepLoss, Var,
};
pub use network::{forward, init_params, ForwardTrace, NetworkParams};
pub use pinn::{pinn_loss, pinn_residual, train_pinn_gd, Dataset, LrSchedule};
pub use problems::{coeff_bundle, manufactured_problem, CoeffBundle, PdeKind, PdeProblem};
pub use sampling::{halton_ball, halton_timespace, l2_relative_error, BallMapping, SampledSet};
pub use solver::{
    gd_step, iteration_order, run_lysep, solve_b1, solve_b2, solve_b3, solve_w3, test_error, BiasSolve, LogRow,
    LysepRun, SolverConfig, Step, StepRule,
};
