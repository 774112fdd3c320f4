use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TabularLM;

use super::trajectory::{mix_log, Trajectory};

/// Agreement required between cached and recomputed log-probabilities.
const CONSISTENCY_TOL: f64 = 1e-10;

/// Which importance weight multiplies each estimator term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Per-decision products: the single-step term at `t` uses `w_t`, and
    /// every reward `r_t'` inside the long part carries its own `w_t'`.
    /// Unbiased for any mixing strength.
    Full,
    /// `w_t = q(y_t)/p~(y_t)` on every term. Biased when `alpha > 0`.
    PerStep,
    /// Prefix product `w_t` multiplying the whole `R_{t+1}`. Biased when
    /// `alpha > 0`, because later rewards are drawn from `p~`; kept for
    /// comparison.
    Prefix,
}

/// Normalization of the future return `R_{t+1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthNorm {
    Off,
    /// `R_{t+1} / (T - t)`, the mean of the summed rewards; 0 at `t = T`.
    TermCount,
    /// `R_{t+1} / (T - t - 1)`, with the denominator clamped to at least 1.
    Literal,
}

impl LengthNorm {
    /// Factor applied to `R_{t+1}` when `remaining = T - t` rewards follow.
    pub fn factor(self, remaining: usize) -> f64 {
        match (self, remaining) {
            (_, 0) => 0.0,
            (LengthNorm::Off, _) => 1.0,
            (LengthNorm::TermCount, n) => 1.0 / n as f64,
            (LengthNorm::Literal, n) => 1.0 / (n.saturating_sub(1).max(1)) as f64,
        }
    }
}

/// Per-step quantities of one trajectory under the live student.
///
/// All vectors have one entry per step; index `i` is step `t = i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSignals {
    /// `r_t = log p(y_t|.) - log q(y_t|.)`.
    pub r: Vec<f64>,
    /// `R_t = sum_{t' >= t} r_t'`.
    #[serde(rename = "R")]
    pub big_r: Vec<f64>,
    /// Normalized `R_{t+1}`, aligned to step `t`.
    #[serde(rename = "R_norm")]
    pub r_norm: Vec<f64>,
    /// `prod_{t' <= t} q(y_t'|.) / p~(y_t'|.)`.
    pub w_full: Vec<f64>,
    /// `q(y_t|.) / p~(y_t|.)`.
    pub w_step: Vec<f64>,
    /// Same value as `w_step`; the ratio the clip acts on.
    pub rho: Vec<f64>,
    /// Live student log-probabilities.
    pub log_q: Vec<f64>,
}

impl StepSignals {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    /// `R_{t+1}` for step index `i` (0 past the end).
    pub fn future_return(&self, i: usize) -> f64 {
        self.big_r.get(i + 1).copied().unwrap_or(0.0)
    }
}

/// Checks the trajectory's cached values against `teacher` and the
/// behaviour mixture, then derives the per-step signals from the live
/// `student`.
pub fn step_signals(
    teacher: &TabularLM,
    student: &TabularLM,
    traj: &Trajectory,
    length_norm: LengthNorm,
) -> Result<StepSignals> {
    teacher.check_vocab(student)?;
    let n = traj.len();
    if traj.log_p.len() != n || traj.log_q.len() != n || traj.log_mix.len() != n {
        return Err(Error::InconsistentTrajectory(format!(
            "log-prob vectors of lengths {}, {}, {} for {n} steps",
            traj.log_q.len(),
            traj.log_p.len(),
            traj.log_mix.len()
        )));
    }
    let log_p = teacher.step_log_probs(&traj.prompt, &traj.response)?;
    for (i, (&cached, &fresh)) in traj.log_p.iter().zip(&log_p).enumerate() {
        if !((cached - fresh).abs() <= CONSISTENCY_TOL) {
            return Err(Error::InconsistentTrajectory(format!(
                "teacher log-prob at step {i}: cached {cached}, model {fresh}"
            )));
        }
    }
    for (i, ((&lm, &lp), &lq)) in traj
        .log_mix
        .iter()
        .zip(&traj.log_p)
        .zip(&traj.log_q)
        .enumerate()
    {
        let expect = mix_log(traj.alpha, lp, lq);
        if !lm.is_finite() || !((lm - expect).abs() <= CONSISTENCY_TOL) {
            return Err(Error::InconsistentTrajectory(format!(
                "behaviour log-prob at step {i}: cached {lm}, mixture {expect}"
            )));
        }
    }

    let log_q = student.step_log_probs(&traj.prompt, &traj.response)?;
    let r: Vec<f64> = log_p.iter().zip(&log_q).map(|(p, q)| p - q).collect();
    let mut big_r = vec![0.0; n];
    let mut acc = 0.0;
    for i in (0..n).rev() {
        acc += r[i];
        big_r[i] = acc;
    }
    let r_norm = (0..n)
        .map(|i| {
            let next = big_r.get(i + 1).copied().unwrap_or(0.0);
            next * length_norm.factor(n - i - 1)
        })
        .collect();
    let w_step: Vec<f64> = log_q
        .iter()
        .zip(&traj.log_mix)
        .map(|(q, m)| (q - m).exp())
        .collect();
    let mut w_full = Vec::with_capacity(n);
    let mut log_w = 0.0;
    for (q, m) in log_q.iter().zip(&traj.log_mix) {
        log_w += q - m;
        w_full.push(log_w.exp());
    }
    Ok(StepSignals {
        r,
        big_r,
        r_norm,
        w_full,
        rho: w_step.clone(),
        w_step,
        log_q,
    })
}
