use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Sequence, TabularLM, Token};

/// Expected calibration error with `n_bins` equal-width bins on `[0, 1]`.
/// A confidence `c` falls in bin `min(floor(c * n_bins), n_bins - 1)`.
pub fn ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<f64> {
    if confidences.len() != correct.len() {
        return Err(Error::Mismatch(format!(
            "{} confidences for {} outcomes",
            confidences.len(),
            correct.len()
        )));
    }
    if confidences.is_empty() {
        return Err(Error::Undefined("ECE of an empty sample".into()));
    }
    if n_bins == 0 {
        return Err(Error::Config("n_bins must be at least 1".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Config(format!("confidence {c} outside [0, 1]")));
        }
        let b = ((c * n_bins as f64) as usize).min(n_bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += ok as usize;
    }
    let n = confidences.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (hits[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum())
}

/// Binary-label calibration probe.
///
/// At each prompt the true label is drawn from the ground truth's next-token
/// distribution restricted to the two label tokens. The model predicts the
/// label it prefers after the same restriction, with that renormalized
/// probability as its confidence.
#[derive(Debug, Clone)]
pub struct LabelProbe {
    pub labels: [Token; 2],
    pub prompts: Vec<Sequence>,
    pub draws_per_prompt: usize,
}

impl LabelProbe {
    /// Confidences and correctness flags for `model`.
    pub fn outcomes<R: Rng + ?Sized>(
        &self,
        model: &TabularLM,
        ground_truth: &TabularLM,
        rng: &mut R,
    ) -> Result<(Vec<f64>, Vec<bool>)> {
        let [a, b] = self.labels;
        if a == b || !model.vocab().contains(a) || !model.vocab().contains(b) {
            return Err(Error::Config(format!("invalid label pair {a}, {b}")));
        }
        model.check_vocab(ground_truth)?;
        let mut conf = Vec::new();
        let mut correct = Vec::new();
        for x in &self.prompts {
            let truth = ground_truth.next_token_dist(x.tokens())?;
            let p_a = truth[a as usize] / (truth[a as usize] + truth[b as usize]);
            let q = model.next_token_dist(x.tokens())?;
            let q_a = q[a as usize] / (q[a as usize] + q[b as usize]);
            let (pred_a, c) = if q_a >= 0.5 {
                (true, q_a)
            } else {
                (false, 1.0 - q_a)
            };
            for _ in 0..self.draws_per_prompt {
                let is_a = rng.gen::<f64>() < p_a;
                conf.push(c);
                correct.push(is_a == pred_a);
            }
        }
        Ok((conf, correct))
    }

    pub fn ece<R: Rng + ?Sized>(
        &self,
        model: &TabularLM,
        ground_truth: &TabularLM,
        n_bins: usize,
        rng: &mut R,
    ) -> Result<f64> {
        let (c, ok) = self.outcomes(model, ground_truth, rng)?;
        ece(&c, &ok, n_bins)
    }
}
