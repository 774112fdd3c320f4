use crate::error::Result;
use crate::model::{for_each_sequence, Sequence, TabularLM};

use super::estimator::{trajectory_contribution, Estimator, GradientParts};
use super::trajectory::Trajectory;

/// Exact expectation of an estimator's per-trajectory contribution for
/// prompt `x`, with responses drawn from `alpha * p + (1 - alpha) * q`.
/// Every response up to `max_len` is enumerated and weighted by its
/// behaviour probability.
pub fn exact_expectation(
    teacher: &TabularLM,
    student: &TabularLM,
    x: &Sequence,
    max_len: usize,
    alpha: f64,
    est: &Estimator,
) -> Result<GradientParts> {
    teacher.check_vocab(student)?;
    let mut acc = GradientParts::zeros(student.num_params());
    let mut err = None;
    for_each_sequence(teacher.vocab(), max_len, |y| {
        if err.is_some() {
            return;
        }
        let res = (|| {
            let tr = Trajectory::score(teacher, student, alpha, x, y)?;
            let prob = tr.log_mix.iter().sum::<f64>().exp();
            if prob == 0.0 {
                return Ok(());
            }
            let c = trajectory_contribution(teacher, student, &tr, est)?;
            acc.single.add_scaled(&c.single, prob);
            acc.long.add_scaled(&c.long, prob);
            Ok(())
        })();
        if let Err(e) = res {
            err = Some(e);
        }
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(acc),
    }
}
