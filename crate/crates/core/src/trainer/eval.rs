use serde::{Deserialize, Serialize};

use crate::divergence::{mean_markov_kld, KlKind};
use crate::error::Result;
use crate::metrics::{distinct_n, rouge_l, test_lm_loss, MetricReport};
use crate::model::{Sequence, TabularLM};

use super::rng::{stream, Stream};
use super::task::{Pair, SyntheticTask};

/// Mean Rouge-L of one temperature-1 sample per pair against its reference.
/// The sampling stream depends only on `seed`, so checkpoints compared under
/// one seed see common random numbers.
pub fn sampled_rouge(model: &TabularLM, pairs: &[Pair], max_len: usize, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Stream::Eval);
    let mut s = 0.0;
    for (x, y) in pairs {
        let c = model.sample(x, max_len, &mut rng)?;
        s += rouge_l(&c, y, model.vocab());
    }
    Ok(s / pairs.len().max(1) as f64)
}

/// Exact sequence-level divergences to the teacher, averaged over prompts.
pub fn kld_to_teacher(
    model: &TabularLM,
    teacher: &TabularLM,
    task: &SyntheticTask,
) -> Result<(f64, f64)> {
    let rev = mean_markov_kld(
        teacher,
        model,
        &task.prompts,
        task.max_len(),
        KlKind::Reverse,
    )?;
    let fwd = mean_markov_kld(
        teacher,
        model,
        &task.prompts,
        task.max_len(),
        KlKind::Forward,
    )?;
    Ok((rev, fwd))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generation seeds averaged for test Rouge-L.
    pub rouge_seeds: usize,
    pub distinct_n: usize,
    pub exposure_max_l: usize,
    pub exposure_rollouts: usize,
    /// Compute exposure curves exactly rather than by sampling prefixes.
    pub exposure_exact: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rouge_seeds: 5,
            distinct_n: 4,
            exposure_max_l: 20,
            exposure_rollouts: 10,
            exposure_exact: false,
        }
    }
}

/// Standard metric set of a trained student.
pub fn evaluate(
    model: &TabularLM,
    teacher: &TabularLM,
    task: &SyntheticTask,
    cfg: &EvalConfig,
    seed: u64,
    fingerprint: &str,
) -> Result<MetricReport> {
    let mut r = MetricReport::new(seed, fingerprint);
    let (rev, fwd) = kld_to_teacher(model, teacher, task)?;
    r.insert("rev_kld_teacher_nats", rev)?;
    r.insert("fwd_kld_teacher_nats", fwd)?;
    let mut rouge = 0.0;
    let mut generated: Vec<Sequence> = Vec::new();
    for k in 0..cfg.rouge_seeds.max(1) {
        let mut rng = stream(seed.wrapping_add(k as u64), Stream::Eval);
        for (x, y) in &task.test {
            let c = model.sample(x, task.max_len(), &mut rng)?;
            rouge += rouge_l(&c, y, task.vocab());
            generated.push(c);
        }
    }
    rouge /= generated.len().max(1) as f64;
    r.insert("rouge_l_test", rouge)?;
    r.insert_opt(
        format!("distinct_{}", cfg.distinct_n),
        distinct_n(&generated, cfg.distinct_n, task.vocab()),
    )?;
    let mean_len =
        generated.iter().map(|s| s.len() as f64).sum::<f64>() / generated.len().max(1) as f64;
    r.insert("mean_response_len_tokens", mean_len)?;
    r.insert(
        "test_lm_loss_nats_per_seq",
        test_lm_loss(model, &task.test)?,
    )?;
    Ok(r)
}
