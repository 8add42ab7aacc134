//! Constrained shape optimization in bump space or in the sampler's latent
//! space, with identical solver settings for every mode.

mod design;
mod solver;

pub use design::{
    encode, epsilon_rel, gaussian_latent, scaled_mask, summarize, Constraint, Counters, Decoder, DesignProblem,
    DesignResult, Encoding, Evaluation, Mode, ProblemSpec, Quantity, ENCODE_STEPS, ENCODE_WARN_RMS, FLOW_TOL,
};
pub use solver::{
    minimize_box, relative_violation, solve, ConstrainedProblem, Gradients, LogRow, SolveResult, SolverConfig,
    Termination, Values,
};
