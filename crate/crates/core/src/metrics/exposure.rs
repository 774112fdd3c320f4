use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tabular::sample_log_categorical;
use crate::model::{ContextCursor, Sequence, TabularLM};
use crate::stats::RunningMoments;

/// Free-run regret against oracle-prefix error, per generation length.
///
/// Entry `i` describes length `l = lengths[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureBiasCurve {
    pub lengths: Vec<usize>,
    /// `R(l)`: summed per-step forward KL along student-generated prefixes.
    pub regret: Vec<f64>,
    /// `eps(l)`: mean per-step forward KL along teacher-generated prefixes.
    pub step_error: Vec<f64>,
    /// `(R(l) - l eps(l)) / (l eps(l)) * 100`; `None` where `eps(l) <= 0`.
    pub exaccerr: Vec<Option<f64>>,
    /// Rollouts per prompt, for each of the two prefix sources.
    pub n_rollouts: usize,
    /// Standard error of `R(l)`; `None` for exact curves or a single rollout.
    pub regret_se: Vec<Option<f64>>,
}

impl ExposureBiasCurve {
    fn from_steps(
        per_step_q: &[f64],
        per_step_p: &[f64],
        n_rollouts: usize,
        regret_se: Vec<Option<f64>>,
    ) -> Self {
        let mut lengths = Vec::new();
        let mut regret = Vec::new();
        let mut step_error = Vec::new();
        let mut exaccerr = Vec::new();
        let (mut rq, mut rp) = (0.0, 0.0);
        for l in 1..=per_step_q.len() {
            rq += per_step_q[l - 1];
            rp += per_step_p[l - 1];
            let eps = rp / l as f64;
            let base = l as f64 * eps;
            lengths.push(l);
            regret.push(rq);
            step_error.push(eps);
            exaccerr.push((eps > 0.0).then(|| (rq - base) / base * 100.0));
        }
        Self {
            lengths,
            regret,
            step_error,
            exaccerr,
            n_rollouts,
            regret_se,
        }
    }

    pub const CSV_HEADER: &'static str = "l,regret,step_error,exaccerr_pct,regret_se";

    /// Plot-ready rows under [`Self::CSV_HEADER`]; undefined values are empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for i in 0..self.lengths.len() {
            out.push_str(&format!(
                "{},{:?},{:?},{},{}\n",
                self.lengths[i],
                self.regret[i],
                self.step_error[i],
                opt(self.exaccerr[i]),
                opt(self.regret_se[i])
            ));
        }
        out
    }

    /// True when no length has a defined ExAccErr.
    pub fn all_undefined(&self) -> bool {
        self.exaccerr.iter().all(Option::is_none)
    }

    /// Value at length `l`, if recorded.
    pub fn at(&self, l: usize) -> Option<(f64, f64, Option<f64>)> {
        let i = self.lengths.iter().position(|&x| x == l)?;
        Some((self.regret[i], self.step_error[i], self.exaccerr[i]))
    }
}

/// `KL(p(.|ctx) || q(.|ctx))` at a cursor.
fn step_kl(p: &TabularLM, q: &TabularLM, cur: &ContextCursor) -> f64 {
    let lp = p.row_log_probs(p.row_at(cur));
    let lq = q.row_log_probs(q.row_at(cur));
    lp.iter().zip(lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// Rolls `n` prefixes from `roll` and returns per-step summed KL and, per
/// rollout, the running totals at each length.
fn rollout_errors<R: Rng + ?Sized>(
    roll: &TabularLM,
    p: &TabularLM,
    q: &TabularLM,
    x: &Sequence,
    max_l: usize,
    rng: &mut R,
    sums: &mut [f64],
    per_length: Option<&mut [RunningMoments]>,
) {
    let vocab = p.vocab();
    let order = p.order().max(q.order()).max(roll.order());
    let mut cur = ContextCursor::after(vocab, order, x.tokens());
    let mut running = 0.0;
    let mut ended = false;
    let mut totals = vec![0.0; max_l];
    for t in 0..max_l {
        if !ended {
            let kl = step_kl(p, q, &cur);
            sums[t] += kl;
            running += kl;
            let tok = sample_log_categorical(roll.row_log_probs(roll.row_at(&cur)), rng) as u32;
            if tok == vocab.eos() {
                ended = true;
            } else {
                cur.push(tok);
            }
        }
        totals[t] = running;
    }
    if let Some(m) = per_length {
        for (mom, v) in m.iter_mut().zip(totals) {
            mom.push(v);
        }
    }
}

fn check_args(
    student: &TabularLM,
    teacher: &TabularLM,
    prompts: &[Sequence],
    max_l: usize,
) -> Result<()> {
    student.check_vocab(teacher)?;
    if prompts.is_empty() {
        return Err(Error::Config("empty prompt list".into()));
    }
    if max_l == 0 {
        return Err(Error::Config("max_l must be at least 1".into()));
    }
    for x in prompts {
        x.validate_prompt(teacher.vocab())?;
    }
    Ok(())
}

/// Monte-Carlo curve for lengths `1..=max_l`. Prefixes are sampled
/// (`n_rollouts` per prompt per source); the inner expectation over `y_t ~ p`
/// is an exact vocabulary sum. A rollout that has emitted EOS contributes
/// zero error at later steps.
pub fn exposure_bias_curve<R: Rng + ?Sized>(
    student: &TabularLM,
    teacher: &TabularLM,
    prompts: &[Sequence],
    max_l: usize,
    n_rollouts: usize,
    rng: &mut R,
) -> Result<ExposureBiasCurve> {
    check_args(student, teacher, prompts, max_l)?;
    if n_rollouts == 0 {
        return Err(Error::Config("n_rollouts must be at least 1".into()));
    }
    let mut sum_q = vec![0.0; max_l];
    let mut sum_p = vec![0.0; max_l];
    let mut moments = vec![RunningMoments::default(); max_l];
    for x in prompts {
        for _ in 0..n_rollouts {
            rollout_errors(
                student,
                teacher,
                student,
                x,
                max_l,
                rng,
                &mut sum_q,
                Some(&mut moments),
            );
        }
        for _ in 0..n_rollouts {
            rollout_errors(teacher, teacher, student, x, max_l, rng, &mut sum_p, None);
        }
    }
    let n = (prompts.len() * n_rollouts) as f64;
    sum_q
        .iter_mut()
        .chain(sum_p.iter_mut())
        .for_each(|v| *v /= n);
    let se = moments.iter().map(|m| m.std_error()).collect();
    Ok(ExposureBiasCurve::from_steps(
        &sum_q, &sum_p, n_rollouts, se,
    ))
}

/// Exact curve by propagating prefix distributions over context states.
pub fn exposure_bias_curve_exact(
    student: &TabularLM,
    teacher: &TabularLM,
    prompts: &[Sequence],
    max_l: usize,
) -> Result<ExposureBiasCurve> {
    check_args(student, teacher, prompts, max_l)?;
    let mut sum_q = vec![0.0; max_l];
    let mut sum_p = vec![0.0; max_l];
    for x in prompts {
        exact_step_errors(student, teacher, student, x, &mut sum_q);
        exact_step_errors(teacher, teacher, student, x, &mut sum_p);
    }
    let n = prompts.len() as f64;
    sum_q
        .iter_mut()
        .chain(sum_p.iter_mut())
        .for_each(|v| *v /= n);
    Ok(ExposureBiasCurve::from_steps(
        &sum_q,
        &sum_p,
        0,
        vec![None; max_l],
    ))
}

fn exact_step_errors(
    roll: &TabularLM,
    p: &TabularLM,
    q: &TabularLM,
    x: &Sequence,
    out: &mut [f64],
) {
    let vocab = p.vocab();
    let order = p.order().max(q.order()).max(roll.order());
    let eos = vocab.eos() as usize;
    let mut frontier = BTreeMap::new();
    frontier.insert(ContextCursor::after(vocab, order, x.tokens()).code(), 1.0);
    for slot in out.iter_mut() {
        let mut next: BTreeMap<usize, f64> = BTreeMap::new();
        for (&code, &mass) in &frontier {
            let cur = ContextCursor::from_code(vocab, order, code);
            *slot += mass * step_kl(p, q, &cur);
            for (k, lr) in roll.row_log_probs(roll.row_at(&cur)).iter().enumerate() {
                if k != eos {
                    *next.entry(cur.pushed(k as u32).code()).or_insert(0.0) += mass * lr.exp();
                }
            }
        }
        frontier = next;
    }
}
