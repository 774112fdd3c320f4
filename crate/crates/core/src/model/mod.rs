//! Tabular order-k autoregressive softmax language models.
//!
//! One parameterization serves as teacher, student and data-generating
//! process. Parameters are raw logits stored row-major: one row of length
//! `V` per context key. A context key is the last `order` tokens of
//! `prompt ++ response_prefix`, left-padded with a BOS sentinel whose id is
//! `V` (one past the last vocabulary id). BOS only ever appears as a prefix
//! of a key, so the set of keys is `BOS^j` followed by `order - j`
//! vocabulary tokens, for `j = 0..=order`.
//!
//! Row order (the flattening of [`ParamVector`]) is ascending by the key's
//! base-`(V+1)` value, oldest token most significant, BOS counted as digit
//! `V`. For `V = 2`, `order = 1` the rows are `[0]`, `[1]`, `[BOS]`.

mod context;
mod enumerate;
mod io;
pub(crate) mod tabular;

pub use context::{ContextCursor, KeyIndex};
pub use enumerate::{enumerate_sequences, for_each_sequence, ENUMERATION_BOUND};
pub use io::ModelFile;
pub use tabular::TabularLM;

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

/// Largest vocabulary the key encoding supports.
pub const MAX_VOCAB: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    eos: Token,
}

impl Vocab {
    pub fn new(size: usize, eos: Token) -> Result<Self> {
        if size < 2 {
            return Err(Error::Vocab(format!("size {size} < 2")));
        }
        if size > MAX_VOCAB {
            return Err(Error::Vocab(format!("size {size} > {MAX_VOCAB}")));
        }
        if eos as usize >= size {
            return Err(Error::Vocab(format!("eos {eos} outside 0..{size}")));
        }
        Ok(Self { size, eos })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> Token {
        self.eos
    }

    /// The left-padding sentinel. Never a valid vocabulary token.
    pub fn bos(&self) -> Token {
        self.size as Token
    }

    pub fn contains(&self, tok: Token) -> bool {
        (tok as usize) < self.size
    }

    /// Every token except EOS, ascending.
    pub fn content_tokens(&self) -> impl Iterator<Item = Token> + '_ {
        (0..self.size as Token).filter(move |&t| t != self.eos)
    }
}

/// A token sequence. Prompts are unterminated and contain no EOS; responses
/// are terminated either by a final EOS or by reaching the length cap.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sequence {
    tokens: Vec<Token>,
    terminated: bool,
}

impl Sequence {
    pub fn new(tokens: Vec<Token>, terminated: bool) -> Self {
        Self { tokens, terminated }
    }

    pub fn prompt(tokens: Vec<Token>) -> Self {
        Self::new(tokens, false)
    }

    pub fn empty_prompt() -> Self {
        Self::new(Vec::new(), false)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn ends_with_eos(&self, vocab: &Vocab) -> bool {
        self.tokens.last() == Some(&vocab.eos())
    }

    /// Tokens with a trailing EOS removed.
    pub fn content(&self, vocab: &Vocab) -> &[Token] {
        if self.ends_with_eos(vocab) {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }

    /// Checks token ids and EOS placement against `vocab`.
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let eos = vocab.eos();
        for (i, &t) in self.tokens.iter().enumerate() {
            if !vocab.contains(t) {
                return Err(Error::Sequence(format!(
                    "token {t} at position {i} outside vocabulary of size {}",
                    vocab.size()
                )));
            }
            if t == eos && i + 1 != self.tokens.len() {
                return Err(Error::Sequence(format!("EOS at non-final position {i}")));
            }
        }
        if self.ends_with_eos(vocab) && !self.terminated {
            return Err(Error::Sequence(
                "ends in EOS but not marked terminated".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn validate_prompt(&self, vocab: &Vocab) -> Result<()> {
        self.validate(vocab)?;
        if self.tokens.contains(&vocab.eos()) {
            return Err(Error::Sequence("prompt contains EOS".into()));
        }
        Ok(())
    }

    pub(crate) fn validate_response(&self, vocab: &Vocab) -> Result<()> {
        self.validate(vocab)?;
        if !self.terminated {
            return Err(Error::Sequence("response is not terminated".into()));
        }
        Ok(())
    }
}

/// Flat parameter-shaped vector, laid out like [`TabularLM::params`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &[f64], scale: f64) {
        debug_assert_eq!(self.0.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &[f64]) -> f64 {
        assert_eq!(self.0.len(), other.len());
        self.0
            .iter()
            .zip(other)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Numerically stable `log(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
