//! Sequence-level KL divergences between tabular models, in nats.
//!
//! `exact_kld` enumerates every response and is the reference oracle for
//! short horizons. `markov_kld` computes the same quantity through the
//! chain rule over a forward recursion on context states, which stays exact
//! for horizons far beyond the enumeration bound.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{for_each_sequence, ContextCursor, ParamVector, Sequence, TabularLM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlKind {
    /// `KL[p || q]`: expectation under the teacher.
    Forward,
    /// `KL[q || p]`: expectation under the student.
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceValue {
    /// Nats. `+inf` when `infinite` is set.
    pub value: f64,
    pub kind: KlKind,
    pub method: Method,
    pub n_samples: usize,
    /// `Some(0.0)` for exact values; `None` when the sample variance is
    /// undefined (a single sample).
    pub std_error: Option<f64>,
    /// Support mismatch: some `a(y) > 0` with `b(y) = 0`.
    pub infinite: bool,
}

impl DivergenceValue {
    fn exact(value: f64, kind: KlKind) -> Self {
        Self {
            value,
            kind,
            method: Method::Exact,
            n_samples: 0,
            std_error: Some(0.0),
            infinite: value == f64::INFINITY,
        }
    }
}

/// `(sampling, other)` for a divergence taken between teacher `p` and
/// student `q`.
fn ordered<'a>(p: &'a TabularLM, q: &'a TabularLM, kind: KlKind) -> (&'a TabularLM, &'a TabularLM) {
    match kind {
        KlKind::Forward => (p, q),
        KlKind::Reverse => (q, p),
    }
}

/// `a log(a/b)` from log-probabilities, with `0 log 0 = 0`. A probability
/// counts as zero once it underflows to `0.0` in `f64`.
fn kl_term(la: f64, lb: f64) -> f64 {
    if la.exp() == 0.0 {
        0.0
    } else if lb.exp() == 0.0 {
        f64::INFINITY
    } else {
        la.exp() * (la - lb)
    }
}

/// Sequence log-probability, or `-inf` if any step probability is zero.
fn seq_log_prob(m: &TabularLM, x: &Sequence, y: &Sequence) -> Result<f64> {
    let steps = m.step_log_probs(x, y)?;
    if steps.iter().any(|l| l.exp() == 0.0) {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(steps.iter().sum())
}

/// Exact divergence by enumerating all responses to `x` up to `max_len`.
pub fn exact_kld(
    p: &TabularLM,
    q: &TabularLM,
    x: &Sequence,
    max_len: usize,
    kind: KlKind,
) -> Result<DivergenceValue> {
    p.check_vocab(q)?;
    let (a, b) = ordered(p, q, kind);
    let mut total = 0.0;
    let mut err = None;
    for_each_sequence(p.vocab(), max_len, |y| {
        if err.is_some() {
            return;
        }
        match (seq_log_prob(a, x, y), seq_log_prob(b, x, y)) {
            (Ok(la), Ok(_)) if la == f64::NEG_INFINITY => {}
            (Ok(_), Ok(lb)) if lb == f64::NEG_INFINITY => total = f64::INFINITY,
            (Ok(la), Ok(lb)) => total += la.exp() * (la - lb),
            (Err(e), _) | (_, Err(e)) => err = Some(e),
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok(DivergenceValue::exact(total, kind))
}

/// Exact divergence through the chain rule:
/// `KL[a||b] = sum_t E_{y_<t ~ a}[ KL(a(.|ctx_t) || b(.|ctx_t)) ]`, with the
/// prefix distribution propagated over context states of order
/// `max(order_p, order_q)`. Agrees with [`exact_kld`] wherever both apply.
pub fn markov_kld(
    p: &TabularLM,
    q: &TabularLM,
    x: &Sequence,
    max_len: usize,
    kind: KlKind,
) -> Result<DivergenceValue> {
    p.check_vocab(q)?;
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let vocab = *p.vocab();
    x.validate_prompt(&vocab)?;
    let (a, b) = ordered(p, q, kind);
    let order = p.order().max(q.order());
    let eos = vocab.eos() as usize;

    let mut frontier: BTreeMap<usize, f64> = BTreeMap::new();
    frontier.insert(ContextCursor::after(&vocab, order, x.tokens()).code(), 1.0);
    let mut total = 0.0;
    for t in 1..=max_len {
        let mut next: BTreeMap<usize, f64> = BTreeMap::new();
        for (&code, &mass) in &frontier {
            let cur = ContextCursor::from_code(&vocab, order, code);
            let la = a.row_log_probs(a.row_at(&cur));
            let lb = b.row_log_probs(b.row_at(&cur));
            let row_kl: f64 = la.iter().zip(lb).map(|(&x, &y)| kl_term(x, y)).sum();
            total += mass * row_kl;
            if t < max_len {
                for (k, &lk) in la.iter().enumerate() {
                    if k != eos {
                        *next.entry(cur.pushed(k as u32).code()).or_insert(0.0) += mass * lk.exp();
                    }
                }
            }
        }
        frontier = next;
    }
    Ok(DivergenceValue::exact(total, kind))
}

/// Uniform average of [`markov_kld`] over a prompt list.
pub fn mean_markov_kld(
    p: &TabularLM,
    q: &TabularLM,
    prompts: &[Sequence],
    max_len: usize,
    kind: KlKind,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Config("empty prompt list".into()));
    }
    let mut s = 0.0;
    for x in prompts {
        s += markov_kld(p, q, x, max_len, kind)?.value;
    }
    Ok(s / prompts.len() as f64)
}

/// Optional probability floor for Monte-Carlo diagnostics. Off by default:
/// support mismatches then surface as infinities.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct McOptions {
    pub prob_floor: Option<f64>,
}

/// Monte-Carlo `KL[q || p]`: mean of `log q(y|x) - log p(y|x)` over
/// `y ~ q(.|x)`, prompts drawn uniformly.
pub fn mc_reverse_kld<R: Rng + ?Sized>(
    q: &TabularLM,
    p: &TabularLM,
    prompts: &[Sequence],
    n_samples: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<DivergenceValue> {
    mc_reverse_kld_with(q, p, prompts, n_samples, max_len, McOptions::default(), rng)
}

pub fn mc_reverse_kld_with<R: Rng + ?Sized>(
    q: &TabularLM,
    p: &TabularLM,
    prompts: &[Sequence],
    n_samples: usize,
    max_len: usize,
    opts: McOptions,
    rng: &mut R,
) -> Result<DivergenceValue> {
    p.check_vocab(q)?;
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    if prompts.is_empty() {
        return Err(Error::Config("empty prompt list".into()));
    }
    let floor = opts.prob_floor.map(f64::ln).unwrap_or(f64::NEG_INFINITY);
    let mut stats = crate::stats::RunningMoments::default();
    let mut infinite = false;
    for _ in 0..n_samples {
        let x = &prompts[rng.gen_range(0..prompts.len())];
        let y = q.sample(x, max_len, rng)?;
        let lq = seq_log_prob(q, x, &y)?;
        let lp = seq_log_prob(p, x, &y)?.max(floor);
        let v = lq - lp;
        if v.is_infinite() {
            infinite = true;
        } else {
            stats.push(v);
        }
    }
    Ok(DivergenceValue {
        value: if infinite {
            f64::INFINITY
        } else {
            stats.mean()
        },
        kind: KlKind::Reverse,
        method: Method::MonteCarlo,
        n_samples,
        std_error: if infinite { None } else { stats.std_error() },
        infinite,
    })
}

/// Exact `grad_theta KL[q_theta || p]` for prompt `x`:
/// `sum_y q(y) (log q(y) - log p(y) + 1) grad log q(y)`.
///
/// This is the reference every gradient estimator is checked against.
pub fn exact_reverse_kld_gradient(
    q: &TabularLM,
    p: &TabularLM,
    x: &Sequence,
    max_len: usize,
) -> Result<ParamVector> {
    p.check_vocab(q)?;
    let mut g = ParamVector::zeros(q.num_params());
    let mut err = None;
    for_each_sequence(q.vocab(), max_len, |y| {
        if err.is_some() {
            return;
        }
        let res = (|| {
            let lq = seq_log_prob(q, x, y)?;
            let lp = seq_log_prob(p, x, y)?;
            if lq == f64::NEG_INFINITY {
                return Ok(());
            }
            if lp == f64::NEG_INFINITY {
                return Err(Error::SupportMismatch(format!(
                    "p(y) = 0 for y = {:?}",
                    y.tokens()
                )));
            }
            q.accumulate_grad_log_prob(x, y, lq.exp() * (lq - lp + 1.0), &mut g)
        })();
        if let Err(e) = res {
            err = Some(e);
        }
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(g),
    }
}

/// Central differences of `f` at `point`, one coordinate at a time.
pub fn finite_diff(f: impl Fn(&[f64]) -> Result<f64>, point: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("step {h} must be positive")));
    }
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        x[i] = point[i] + h;
        let fp = f(&x)?;
        x[i] = point[i] - h;
        let fm = f(&x)?;
        x[i] = point[i];
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::NonFinite(format!("objective near coordinate {i}")));
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Central-difference gradient of a model-to-scalar objective with respect
/// to the model's logits.
pub fn finite_diff_gradient(
    objective: impl Fn(&TabularLM) -> Result<f64>,
    q: &TabularLM,
    h: f64,
) -> Result<ParamVector> {
    let base = q.clone();
    let g = finite_diff(
        |theta| {
            let mut m = base.clone();
            m.set_params(theta.to_vec())?;
            objective(&m)
        },
        q.params(),
        h,
    )?;
    Ok(ParamVector(g))
}
