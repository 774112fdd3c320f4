//! Policy-gradient estimators of the reverse-KL gradient
//! `grad KL[q_theta || p]` for tabular students.
//!
//! Every estimator is a mean of per-trajectory contributions, so its exact
//! expectation can be computed by enumerating responses
//! ([`exact_expectation`]) and compared against
//! [`crate::divergence::exact_reverse_kld_gradient`].

mod estimator;
mod exact;
mod reward;
mod signals;
mod trajectory;

pub use estimator::{
    collect_trajectories, estimate_from_trajectories, minillm_gradient, single_step_term,
    trajectory_contribution, vanilla_pg_gradient, Estimator, GradientEstimate, GradientParts,
    PgConfig,
};
pub use exact::exact_expectation;
pub use reward::{context_lse, irl_step_reward};
pub use signals::{step_signals, LengthNorm, StepSignals, WeightMode};
pub use trajectory::{MixedSampler, SampledFrom, Trajectory};
