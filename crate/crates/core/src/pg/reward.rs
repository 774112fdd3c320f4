use crate::error::{Error, Result};
use crate::model::{log_sum_exp, Sequence, TabularLM};

/// Inverse-RL step reward from the teacher's logits `f = z / T`:
/// `f(y_t, ctx_t) - log sum_{y'} exp f(y', ctx_{t+1})`, where `ctx_{t+1}`
/// includes `y_t`. `t` is the 0-based step index. At the final step the
/// successor context ends in EOS, which the tabular model keys like any
/// other token.
pub fn irl_step_reward(teacher: &TabularLM, x: &Sequence, y: &Sequence, t: usize) -> Result<f64> {
    x.validate_prompt(teacher.vocab())?;
    y.validate(teacher.vocab())?;
    if t >= y.len() {
        return Err(Error::Config(format!(
            "step {t} outside response of length {}",
            y.len()
        )));
    }
    let mut ctx = x.tokens().to_vec();
    ctx.extend_from_slice(&y.tokens()[..t]);
    let temp = teacher.temperature();
    let f_here = teacher.logits(&ctx)?[y.tokens()[t] as usize] / temp;
    ctx.push(y.tokens()[t]);
    let f_next: Vec<f64> = teacher.logits(&ctx)?.iter().map(|z| z / temp).collect();
    Ok(f_here - log_sum_exp(&f_next))
}

/// `log sum_{y'} exp f(y', ctx)` at an explicit context.
pub fn context_lse(teacher: &TabularLM, context: &[u32]) -> Result<f64> {
    let temp = teacher.temperature();
    let f: Vec<f64> = teacher.logits(context)?.iter().map(|z| z / temp).collect();
    Ok(log_sum_exp(&f))
}
