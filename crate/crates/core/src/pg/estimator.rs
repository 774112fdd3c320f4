use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamVector, Sequence, TabularLM};
use crate::stats::VectorMoments;

use super::signals::{step_signals, LengthNorm, WeightMode};
use super::trajectory::{MixedSampler, Trajectory};

/// Settings of the decomposed, importance-weighted estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgConfig {
    /// Teacher mix-in strength of the behaviour policy.
    pub alpha: f64,
    pub weight_mode: WeightMode,
    pub length_norm: LengthNorm,
    /// PPO-style ratio clip on the long part; `None` disables it.
    pub clip_eps: Option<f64>,
    /// Sum the single-step term over the vocabulary instead of sampling it.
    pub single_step_decomp: bool,
}

impl Default for PgConfig {
    /// The training configuration.
    fn default() -> Self {
        Self {
            alpha: 0.2,
            weight_mode: WeightMode::PerStep,
            length_norm: LengthNorm::TermCount,
            clip_eps: Some(0.2),
            single_step_decomp: true,
        }
    }
}

impl PgConfig {
    /// Full weights, no normalization, no clip: an unbiased estimator of the
    /// reverse-KL gradient at any `alpha`.
    pub fn unbiased(alpha: f64) -> Self {
        Self {
            alpha,
            weight_mode: WeightMode::Full,
            length_norm: LengthNorm::Off,
            clip_eps: None,
            single_step_decomp: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        super::trajectory::check_alpha(self.alpha)?;
        if let Some(eps) = self.clip_eps {
            if !(eps > 0.0) {
                return Err(Error::Config(format!("clip_eps {eps} must be positive")));
            }
        }
        Ok(())
    }
}

/// Per-trajectory gradient estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// `-sum_t (R_t - c) grad log q(y_t)`, with `c = 1` when `minus_one`.
    Vanilla {
        minus_one: bool,
    },
    MiniLlm(PgConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientParts {
    pub single: ParamVector,
    pub long: ParamVector,
    pub pt: Option<ParamVector>,
}

impl GradientParts {
    pub fn zeros(n: usize) -> Self {
        Self {
            single: ParamVector::zeros(n),
            long: ParamVector::zeros(n),
            pt: None,
        }
    }

    pub fn total(&self) -> ParamVector {
        let mut g = self.single.clone();
        g.add_scaled(&self.long, 1.0);
        if let Some(pt) = &self.pt {
            g.add_scaled(pt, 1.0);
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub grad: ParamVector,
    pub n_trajectories: usize,
    /// Componentwise sample variance of per-trajectory contributions;
    /// `None` below two trajectories.
    pub component_variance: Option<ParamVector>,
    pub parts: Option<GradientParts>,
}

impl GradientEstimate {
    /// Componentwise standard error of `grad`.
    pub fn std_error(&self) -> Option<ParamVector> {
        let n = self.n_trajectories as f64;
        self.component_variance
            .as_ref()
            .map(|v| ParamVector(v.iter().map(|s| (s / n).sqrt()).collect()))
    }
}

/// `out += scale * grad sum_{y'} q(y'|row) log(p(y'|.) / q(y'|.))`, the
/// single-step term at one student row. `teacher_row` holds the teacher's
/// log-probabilities at the same context.
///
/// On the row's logits the slice is `q_k (a_k - E_q[a]) / T` with
/// `a = log p - log q`; the constant from differentiating `log q` cancels.
pub(crate) fn add_single_step(
    student: &TabularLM,
    row: usize,
    teacher_row: &[f64],
    scale: f64,
    out: &mut [f64],
) {
    let v = student.vocab().size();
    let lq = student.row_log_probs(row);
    let mean: f64 = lq
        .iter()
        .zip(teacher_row)
        .map(|(q, p)| q.exp() * (p - q))
        .sum();
    let s = scale / student.temperature();
    for (k, o) in out[row * v..(row + 1) * v].iter_mut().enumerate() {
        *o += s * lq[k].exp() * (teacher_row[k] - lq[k] - mean);
    }
}

/// Exact gradient of `E_{y' ~ q(.|ctx_t)}[log p(y'|ctx_t) - log q(y'|ctx_t)]`
/// at step index `t` (0-based) of `traj`.
pub fn single_step_term(
    teacher: &TabularLM,
    student: &TabularLM,
    traj: &Trajectory,
    t: usize,
) -> Result<ParamVector> {
    teacher.check_vocab(student)?;
    if t >= traj.len() {
        return Err(Error::Config(format!(
            "step {t} outside trajectory of length {}",
            traj.len()
        )));
    }
    let rows_q = student.rows_along(&traj.prompt, &traj.response)?;
    let rows_p = teacher.rows_along(&traj.prompt, &traj.response)?;
    let mut g = ParamVector::zeros(student.num_params());
    add_single_step(
        student,
        rows_q[t],
        teacher.row_log_probs(rows_p[t]),
        1.0,
        &mut g,
    );
    Ok(g)
}

/// One trajectory's contribution, split into the single-step and long
/// parts. For [`Estimator::Vanilla`] the split is `(r_t - c)` versus
/// `R_{t+1}`.
pub fn trajectory_contribution(
    teacher: &TabularLM,
    student: &TabularLM,
    traj: &Trajectory,
    est: &Estimator,
) -> Result<GradientParts> {
    let norm = match est {
        Estimator::Vanilla { .. } => LengthNorm::Off,
        Estimator::MiniLlm(cfg) => {
            cfg.validate()?;
            cfg.length_norm
        }
    };
    let sig = step_signals(teacher, student, traj, norm)?;
    let rows_q = student.rows_along(&traj.prompt, &traj.response)?;
    let toks = traj.tokens();
    let n = toks.len();
    let mut parts = GradientParts::zeros(student.num_params());

    match est {
        Estimator::Vanilla { minus_one } => {
            let c = if *minus_one { 1.0 } else { 0.0 };
            for i in 0..n {
                student.accumulate_step_grad(
                    rows_q[i],
                    toks[i],
                    -(sig.r[i] - c),
                    &mut parts.single,
                );
                student.accumulate_step_grad(
                    rows_q[i],
                    toks[i],
                    -sig.future_return(i),
                    &mut parts.long,
                );
            }
        }
        Estimator::MiniLlm(cfg) => {
            let rows_p = teacher.rows_along(&traj.prompt, &traj.response)?;
            // weighted_future[i] = sum_{j > i} w_full[j] r[j]
            let mut weighted_future = vec![0.0; n];
            for i in (0..n.saturating_sub(1)).rev() {
                weighted_future[i] = weighted_future[i + 1] + sig.w_full[i + 1] * sig.r[i + 1];
            }
            for i in 0..n {
                let w = match cfg.weight_mode {
                    WeightMode::Full | WeightMode::Prefix => sig.w_full[i],
                    WeightMode::PerStep => sig.w_step[i],
                };
                if cfg.single_step_decomp {
                    add_single_step(
                        student,
                        rows_q[i],
                        teacher.row_log_probs(rows_p[i]),
                        -w,
                        &mut parts.single,
                    );
                } else {
                    student.accumulate_step_grad(
                        rows_q[i],
                        toks[i],
                        -w * (sig.r[i] - 1.0),
                        &mut parts.single,
                    );
                }

                if let Some(eps) = cfg.clip_eps {
                    let a = sig.r_norm[i];
                    let rho = sig.rho[i];
                    if (a > 0.0 && rho > 1.0 + eps) || (a < 0.0 && rho < 1.0 - eps) {
                        continue;
                    }
                }
                let coef = match cfg.weight_mode {
                    WeightMode::Full => weighted_future[i] * cfg.length_norm.factor(n - i - 1),
                    WeightMode::PerStep => sig.w_step[i] * sig.r_norm[i],
                    WeightMode::Prefix => sig.w_full[i] * sig.r_norm[i],
                };
                if coef != 0.0 {
                    student.accumulate_step_grad(rows_q[i], toks[i], -coef, &mut parts.long);
                }
            }
        }
    }
    Ok(parts)
}

/// Averages per-trajectory contributions. The reduction runs in input order
/// so results do not depend on the thread count.
pub fn estimate_from_trajectories(
    teacher: &TabularLM,
    student: &TabularLM,
    trajs: &[Trajectory],
    est: &Estimator,
) -> Result<GradientEstimate> {
    if trajs.is_empty() {
        return Err(Error::Config("no trajectories".into()));
    }
    let contribs: Vec<GradientParts> = trajs
        .par_iter()
        .map(|t| trajectory_contribution(teacher, student, t, est))
        .collect::<Result<_>>()?;
    let dim = student.num_params();
    let mut mean = GradientParts::zeros(dim);
    let mut moments = VectorMoments::new(dim);
    let inv = 1.0 / trajs.len() as f64;
    for c in &contribs {
        mean.single.add_scaled(&c.single, inv);
        mean.long.add_scaled(&c.long, inv);
        moments.push(&c.total());
    }
    let grad = mean.total();
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient estimate".into()));
    }
    Ok(GradientEstimate {
        grad,
        n_trajectories: trajs.len(),
        component_variance: moments.variance().map(ParamVector),
        parts: Some(mean),
    })
}

/// Draws `n` rollouts, prompts chosen uniformly from `prompts`.
pub fn collect_trajectories<R: Rng + ?Sized>(
    sampler: &MixedSampler<'_>,
    prompts: &[Sequence],
    n: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    if prompts.is_empty() {
        return Err(Error::Config("empty prompt list".into()));
    }
    (0..n)
        .map(|_| {
            let x = &prompts[rng.gen_range(0..prompts.len())];
            sampler.sample(x, max_len, rng)
        })
        .collect()
}

/// On-policy Monte-Carlo estimate of the reverse-KL gradient with the
/// undecomposed estimator.
pub fn vanilla_pg_gradient<R: Rng + ?Sized>(
    teacher: &TabularLM,
    student: &TabularLM,
    prompts: &[Sequence],
    n_traj: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<GradientEstimate> {
    let sampler = MixedSampler::new(teacher, student, 0.0)?;
    let trajs = collect_trajectories(&sampler, prompts, n_traj, max_len, rng)?;
    estimate_from_trajectories(
        teacher,
        student,
        &trajs,
        &Estimator::Vanilla { minus_one: true },
    )
}

/// Monte-Carlo estimate with rollouts from the teacher-mixed policy.
pub fn minillm_gradient<R: Rng + ?Sized>(
    teacher: &TabularLM,
    student: &TabularLM,
    prompts: &[Sequence],
    n_traj: usize,
    config: &PgConfig,
    max_len: usize,
    rng: &mut R,
) -> Result<GradientEstimate> {
    config.validate()?;
    let sampler = MixedSampler::new(teacher, student, config.alpha)?;
    let trajs = collect_trajectories(&sampler, prompts, n_traj, max_len, rng)?;
    estimate_from_trajectories(teacher, student, &trajs, &Estimator::MiniLlm(*config))
}
