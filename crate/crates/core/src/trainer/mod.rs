//! Distillation and baseline training on synthetic tabular tasks.
//!
//! All optimizers are plain SGD with a constant learning rate. Randomness
//! is drawn from named sub-streams of one seed (see [`Stream`]).

mod checkpoint;
mod eval;
mod minillm;
mod rng;
mod supervised;
mod task;

pub use checkpoint::{fingerprint, Checkpoint};
pub use eval::{evaluate, kld_to_teacher, sampled_rouge, EvalConfig};
pub use minillm::{
    minillm_train, DistillConfig, DistillOutcome, MiniLlmTrainer, StepOutcome, TraceRecord,
    SMOOTHING_WINDOW,
};
pub use rng::{stream, Stream};
pub use supervised::{
    generate_teacher_corpus, pt_loss_grad, seqkd_train, sft_train, word_kd_train, EpochRecord,
    SupervisedConfig, SupervisedOutcome, TargetStats,
};
pub use task::{fit_count_mle, make_synthetic_task, Pair, SyntheticTask, TaskConfig};

#[cfg(test)]
mod tests;
