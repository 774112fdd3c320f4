use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::{log_sum_exp, ContextCursor, KeyIndex, ParamVector, Sequence, Token, Vocab};

/// Order-k autoregressive softmax model with one logit row per context key.
///
/// Immutable for reads; parameter updates go through `&mut self` and refresh
/// the cached log-softmax table.
/// Serializes through [`super::ModelFile`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(into = "super::ModelFile", try_from = "super::ModelFile")]
pub struct TabularLM {
    vocab: Vocab,
    order: usize,
    temperature: f64,
    params: Vec<f64>,
    log_probs: Vec<f64>,
    index: Arc<KeyIndex>,
}

impl PartialEq for TabularLM {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab
            && self.order == other.order
            && self.temperature.to_bits() == other.temperature.to_bits()
            && self.params == other.params
    }
}

impl TabularLM {
    pub fn new(vocab: Vocab, order: usize, params: Vec<f64>) -> Result<Self> {
        let index = Arc::new(KeyIndex::new(&vocab, order)?);
        let expected = index.num_rows() * vocab.size();
        if params.len() != expected {
            return Err(Error::Config(format!(
                "expected {expected} logits ({} rows x {}), got {}",
                index.num_rows(),
                vocab.size(),
                params.len()
            )));
        }
        let mut model = Self {
            vocab,
            order,
            temperature: 1.0,
            log_probs: vec![0.0; params.len()],
            params,
            index,
        };
        model.refresh()?;
        Ok(model)
    }

    /// All-zero logits (uniform next-token distributions).
    pub fn uniform(vocab: Vocab, order: usize) -> Result<Self> {
        let n = KeyIndex::new(&vocab, order)?.num_rows() * vocab.size();
        Self::new(vocab, order, vec![0.0; n])
    }

    /// Logits drawn i.i.d. from `N(0, scale^2)`.
    pub fn random<R: Rng + ?Sized>(
        vocab: Vocab,
        order: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n = KeyIndex::new(&vocab, order)?.num_rows() * vocab.size();
        let normal = Normal::new(0.0, scale)
            .map_err(|e| Error::Config(format!("logit scale {scale}: {e}")))?;
        let params = (0..n).map(|_| normal.sample(rng)).collect();
        Self::new(vocab, order, params)
    }

    /// Builds each row from its key tuple.
    pub fn from_fn(
        vocab: Vocab,
        order: usize,
        mut row: impl FnMut(&[Token]) -> Vec<f64>,
    ) -> Result<Self> {
        let index = KeyIndex::new(&vocab, order)?;
        let mut params = Vec::with_capacity(index.num_rows() * vocab.size());
        for r in 0..index.num_rows() {
            let logits = row(index.key(r));
            if logits.len() != vocab.size() {
                return Err(Error::Config(format!(
                    "row {r} has {} logits, expected {}",
                    logits.len(),
                    vocab.size()
                )));
            }
            params.extend(logits);
        }
        Self::new(vocab, order, params)
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature {temperature} must be positive"
            )));
        }
        self.temperature = temperature;
        self.refresh()?;
        Ok(self)
    }

    fn refresh(&mut self) -> Result<()> {
        if let Some(i) = self.params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit {i}")));
        }
        let v = self.vocab.size();
        let t = self.temperature;
        for (z, lp) in self.params.chunks(v).zip(self.log_probs.chunks_mut(v)) {
            for (o, &zi) in lp.iter_mut().zip(z) {
                *o = zi / t;
            }
            let lse = log_sum_exp(lp);
            lp.iter_mut().for_each(|o| *o -= lse);
        }
        Ok(())
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn key_index(&self) -> &KeyIndex {
        &self.index
    }

    pub fn num_rows(&self) -> usize {
        self.index.num_rows()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_vector(&self) -> ParamVector {
        ParamVector(self.params.clone())
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Config(format!(
                "parameter length {} != {}",
                params.len(),
                self.params.len()
            )));
        }
        let old = std::mem::replace(&mut self.params, params);
        if let Err(e) = self.refresh() {
            self.params = old;
            self.refresh()?;
            return Err(e);
        }
        Ok(())
    }

    /// `theta += scale * direction`. Leaves the model untouched if the result
    /// would be non-finite.
    pub fn apply_update(&mut self, direction: &[f64], scale: f64) -> Result<()> {
        let next: Vec<f64> = self
            .params
            .iter()
            .zip(direction)
            .map(|(p, d)| p + scale * d)
            .collect();
        self.set_params(next)
    }

    /// Same vocabulary and order, so parameter vectors are interchangeable.
    pub fn same_shape(&self, other: &TabularLM) -> bool {
        self.vocab == other.vocab && self.order == other.order
    }

    pub(crate) fn check_vocab(&self, other: &TabularLM) -> Result<()> {
        if self.vocab != other.vocab {
            return Err(Error::Mismatch(format!(
                "vocabularies differ: {:?} vs {:?}",
                self.vocab, other.vocab
            )));
        }
        Ok(())
    }

    pub fn row_of_context(&self, context: &[Token]) -> Result<usize> {
        self.index.row_of_context(context)
    }

    /// Row for a cursor of order `>= self.order()`.
    pub fn row_at(&self, cursor: &ContextCursor) -> usize {
        self.index
            .row_of_code(cursor.code_for(self.order))
            .expect("cursor codes are always reachable keys")
    }

    pub fn row_logits(&self, row: usize) -> &[f64] {
        let v = self.vocab.size();
        &self.params[row * v..(row + 1) * v]
    }

    pub fn row_log_probs(&self, row: usize) -> &[f64] {
        let v = self.vocab.size();
        &self.log_probs[row * v..(row + 1) * v]
    }

    pub fn row_probs(&self, row: usize) -> Vec<f64> {
        self.row_log_probs(row).iter().map(|l| l.exp()).collect()
    }

    /// Stored logit row for the key derived from `context`.
    pub fn logits(&self, context: &[Token]) -> Result<&[f64]> {
        Ok(self.row_logits(self.row_of_context(context)?))
    }

    /// `softmax(logits / temperature)` at `context`.
    pub fn next_token_dist(&self, context: &[Token]) -> Result<Vec<f64>> {
        let row = self.row_of_context(context)?;
        let z = self.row_logits(row);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logits at context {context:?}")));
        }
        Ok(self.row_probs(row))
    }

    /// Parameter row visited at each step of `y` after prompt `x`.
    pub fn rows_along(&self, x: &Sequence, y: &Sequence) -> Result<Vec<usize>> {
        x.validate_prompt(&self.vocab)?;
        y.validate(&self.vocab)?;
        let mut cur = ContextCursor::after(&self.vocab, self.order, x.tokens());
        let mut rows = Vec::with_capacity(y.len());
        for &t in y.tokens() {
            rows.push(self.row_at(&cur));
            cur.push(t);
        }
        Ok(rows)
    }

    /// `log q(y_t | y_<t, x)` for every step.
    pub fn step_log_probs(&self, x: &Sequence, y: &Sequence) -> Result<Vec<f64>> {
        let rows = self.rows_along(x, y)?;
        Ok(rows
            .iter()
            .zip(y.tokens())
            .map(|(&r, &t)| self.row_log_probs(r)[t as usize])
            .collect())
    }

    /// `log q(y | x)`, including the EOS step when present. A response cut at
    /// the length cap contributes its prefix probability.
    pub fn log_prob_seq(&self, x: &Sequence, y: &Sequence) -> Result<f64> {
        y.validate_response(&self.vocab)?;
        Ok(self.step_log_probs(x, y)?.iter().sum())
    }

    /// Ancestral sampling until EOS or `max_len` tokens.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        x: &Sequence,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Sequence> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        x.validate_prompt(&self.vocab)?;
        let mut cur = ContextCursor::after(&self.vocab, self.order, x.tokens());
        let mut tokens = Vec::new();
        let eos = self.vocab.eos();
        while tokens.len() < max_len {
            let row = self.row_at(&cur);
            let t = sample_log_categorical(self.row_log_probs(row), rng) as Token;
            tokens.push(t);
            if t == eos {
                break;
            }
            cur.push(t);
        }
        Ok(Sequence::new(tokens, true))
    }

    /// Highest-probability continuation (ties to the lowest id).
    pub fn greedy(&self, x: &Sequence, max_len: usize) -> Result<Sequence> {
        x.validate_prompt(&self.vocab)?;
        let mut cur = ContextCursor::after(&self.vocab, self.order, x.tokens());
        let mut tokens = Vec::new();
        while tokens.len() < max_len {
            let lp = self.row_log_probs(self.row_at(&cur));
            let t = argmax(lp) as Token;
            tokens.push(t);
            if t == self.vocab.eos() {
                break;
            }
            cur.push(t);
        }
        Ok(Sequence::new(tokens, true))
    }

    /// `out += scale * grad_theta log q(y | x)`.
    ///
    /// Each visited row receives `(onehot(y_t) - softmax) / temperature`.
    pub fn accumulate_grad_log_prob(
        &self,
        x: &Sequence,
        y: &Sequence,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        y.validate_response(&self.vocab)?;
        let rows = self.rows_along(x, y)?;
        for (&row, &tok) in rows.iter().zip(y.tokens()) {
            self.accumulate_step_grad(row, tok, scale, out);
        }
        Ok(())
    }

    /// `out += scale * grad log q(tok | row)`.
    pub fn accumulate_step_grad(&self, row: usize, tok: Token, scale: f64, out: &mut [f64]) {
        let v = self.vocab.size();
        let s = scale / self.temperature;
        let lp = self.row_log_probs(row);
        let slice = &mut out[row * v..(row + 1) * v];
        for (k, o) in slice.iter_mut().enumerate() {
            let onehot = if k == tok as usize { 1.0 } else { 0.0 };
            *o += s * (onehot - lp[k].exp());
        }
    }

    /// Analytic `grad_theta log q(y | x)` with respect to the raw logits.
    pub fn grad_log_prob(&self, x: &Sequence, y: &Sequence) -> Result<ParamVector> {
        let mut g = ParamVector::zeros(self.num_params());
        self.accumulate_grad_log_prob(x, y, 1.0, &mut g)?;
        Ok(g)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from a normalized probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

pub(crate) fn sample_log_categorical<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn v2() -> Vocab {
        Vocab::new(2, 0).unwrap()
    }

    #[test]
    fn logits_lookup() {
        let m = TabularLM::new(v2(), 0, vec![0.0, 0.0]).unwrap();
        assert_eq!(m.logits(&[]).unwrap(), &[0.0, 0.0]);

        // order 1 rows: [0], [1], [BOS]
        let m = TabularLM::new(v2(), 1, vec![0.0, 0.0, 1.0, -1.0, 0.0, 0.0]).unwrap();
        assert_eq!(m.logits(&[1, 1]).unwrap(), &[1.0, -1.0]);
        let a = m.logits(&[1]).unwrap().to_vec();
        let b = m.logits(&[1]).unwrap().to_vec();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert!(matches!(m.logits(&[5]), Err(Error::UnknownContext { .. })));
    }

    #[test]
    fn next_token_dist_examples() {
        let m = TabularLM::new(v2(), 0, vec![0.0, 0.0]).unwrap();
        assert_eq!(m.next_token_dist(&[]).unwrap(), vec![0.5, 0.5]);

        let m = TabularLM::new(v2(), 0, vec![3f64.ln(), 0.0]).unwrap();
        let d = m.next_token_dist(&[]).unwrap();
        assert!((d[0] - 0.75).abs() < 1e-15 && (d[1] - 0.25).abs() < 1e-15);

        let v3 = Vocab::new(3, 0).unwrap();
        let m = TabularLM::new(v3, 0, vec![5.0; 3]).unwrap();
        for p in m.next_token_dist(&[]).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(matches!(
            TabularLM::new(v2(), 0, vec![f64::NAN, 0.0]),
            Err(Error::NonFinite(_))
        ));
        let mut m = TabularLM::uniform(v2(), 0).unwrap();
        assert!(m.apply_update(&[f64::INFINITY, 0.0], 1.0).is_err());
        assert_eq!(m.params(), &[0.0, 0.0]);
    }

    #[test]
    fn temperature_scales_logits() {
        let m = TabularLM::new(v2(), 0, vec![2.0f64.ln() * 2.0, 0.0])
            .unwrap()
            .with_temperature(2.0)
            .unwrap();
        let d = m.next_token_dist(&[]).unwrap();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn log_prob_examples() {
        // token 1 with logit +50 everywhere; its greedy sequence of length 3
        // is truncated at the cap.
        let m = TabularLM::new(v2(), 0, vec![0.0, 50.0]).unwrap();
        let x = Sequence::empty_prompt();
        let y = m.greedy(&x, 3).unwrap();
        assert_eq!(y.tokens(), &[1, 1, 1]);
        assert!(m.log_prob_seq(&x, &y).unwrap().abs() < 1e-8);

        let u = TabularLM::uniform(v2(), 0).unwrap();
        let y = Sequence::new(vec![1, 1, 0], true);
        let lp = u.log_prob_seq(&x, &y).unwrap();
        assert!((lp - 3.0 * 0.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn sampling_is_reproducible_and_stops_at_eos() {
        let eos_first = TabularLM::new(v2(), 0, vec![50.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = eos_first
            .sample(&Sequence::empty_prompt(), 5, &mut rng)
            .unwrap();
        assert_eq!(y.tokens(), &[0]);
        assert!(y.is_terminated());
        assert!(y.content(eos_first.vocab()).is_empty());

        let v4 = Vocab::new(4, 0).unwrap();
        let m = TabularLM::random(v4, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = Sequence::prompt(vec![1, 2]);
        let a = m.sample(&x, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = m.sample(&x, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(m.sample(&x, 0, &mut rng).is_err());
    }

    #[test]
    fn first_token_frequency_uniform() {
        let m = TabularLM::uniform(v2(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let zeros = (0..n)
            .filter(|_| {
                m.sample(&Sequence::empty_prompt(), 1, &mut rng)
                    .unwrap()
                    .tokens()[0]
                    == 0
            })
            .count();
        let f = zeros as f64 / n as f64;
        assert!((0.494..=0.506).contains(&f), "frequency {f}");
    }

    #[test]
    fn grad_log_prob_single_step() {
        let m = TabularLM::uniform(v2(), 0).unwrap();
        let g = m
            .grad_log_prob(&Sequence::empty_prompt(), &Sequence::new(vec![0], true))
            .unwrap();
        assert_eq!(g.0, vec![0.5, -0.5]);
    }
}
