use crate::error::{Error, Result};

use super::{Token, Vocab};

/// Refuse key spaces larger than this many dense codes.
const MAX_DENSE_CODES: usize = 1 << 24;

/// Maps context keys to parameter rows.
///
/// Keys are encoded as base-`(V+1)` integers ("dense codes"), oldest token
/// most significant, with BOS as digit `V`. Dense codes where BOS follows a
/// real token are unreachable and map to no row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyIndex {
    order: usize,
    radix: usize,
    dense_to_row: Vec<u32>,
    row_keys: Vec<Vec<Token>>,
}

const NO_ROW: u32 = u32::MAX;

impl KeyIndex {
    pub fn new(vocab: &Vocab, order: usize) -> Result<Self> {
        let radix = vocab.size() + 1;
        let n_codes = radix
            .checked_pow(order as u32)
            .filter(|&n| n <= MAX_DENSE_CODES)
            .ok_or_else(|| {
                Error::Config(format!(
                    "order {order} with vocabulary {} exceeds the key-space limit",
                    vocab.size()
                ))
            })?;
        let bos = vocab.bos();
        let mut dense_to_row = vec![NO_ROW; n_codes];
        let mut row_keys = Vec::new();
        let mut digits = vec![0 as Token; order];
        for (code, slot) in dense_to_row.iter_mut().enumerate() {
            let mut c = code;
            for d in digits.iter_mut().rev() {
                *d = (c % radix) as Token;
                c /= radix;
            }
            let first_real = digits.iter().position(|&d| d != bos).unwrap_or(order);
            if digits[first_real..].iter().all(|&d| d != bos) {
                *slot = row_keys.len() as u32;
                row_keys.push(digits.clone());
            }
        }
        Ok(Self {
            order,
            radix,
            dense_to_row,
            row_keys,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_rows(&self) -> usize {
        self.row_keys.len()
    }

    /// Key tuple of a row, BOS-padded, oldest first.
    pub fn key(&self, row: usize) -> &[Token] {
        &self.row_keys[row]
    }

    pub fn row_of_code(&self, code: usize) -> Option<usize> {
        match self.dense_to_row.get(code) {
            Some(&r) if r != NO_ROW => Some(r as usize),
            _ => None,
        }
    }

    /// Row of an explicit key tuple of length `order`.
    pub fn row_of_key(&self, key: &[Token]) -> Result<usize> {
        let unknown = || Error::UnknownContext { key: key.to_vec() };
        if key.len() != self.order {
            return Err(unknown());
        }
        let mut code = 0usize;
        for &t in key {
            if t as usize >= self.radix {
                return Err(unknown());
            }
            code = code * self.radix + t as usize;
        }
        self.row_of_code(code).ok_or_else(unknown)
    }

    /// Row for a full context (prompt followed by the response prefix).
    pub fn row_of_context(&self, context: &[Token]) -> Result<usize> {
        let bos = (self.radix - 1) as Token;
        let take = context.len().min(self.order);
        let mut key = vec![bos; self.order - take];
        key.extend_from_slice(&context[context.len() - take..]);
        if key[self.order - take..].iter().any(|&t| t >= bos) {
            return Err(Error::UnknownContext { key });
        }
        self.row_of_key(&key)
    }
}

/// Incrementally tracks the dense code of the last `order` tokens.
///
/// A cursor of order `K` can serve any model of order `k <= K` over the
/// same vocabulary via [`ContextCursor::code_for`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextCursor {
    code: usize,
    modulus: usize,
    radix: usize,
}

impl ContextCursor {
    /// All-BOS start state.
    pub fn start(vocab: &Vocab, order: usize) -> Self {
        let radix = vocab.size() + 1;
        let modulus = radix.pow(order as u32);
        let bos = vocab.size();
        let mut code = 0;
        for _ in 0..order {
            code = code * radix + bos;
        }
        Self {
            code,
            modulus,
            radix,
        }
    }

    /// Start state advanced through `tokens`.
    pub fn after(vocab: &Vocab, order: usize, tokens: &[Token]) -> Self {
        let mut c = Self::start(vocab, order);
        for &t in tokens {
            c.push(t);
        }
        c
    }

    /// Cursor positioned at a dense code previously read from [`Self::code`].
    pub fn from_code(vocab: &Vocab, order: usize, code: usize) -> Self {
        let radix = vocab.size() + 1;
        let modulus = radix.pow(order as u32);
        debug_assert!(code < modulus.max(1));
        Self {
            code,
            modulus,
            radix,
        }
    }

    pub fn push(&mut self, tok: Token) {
        self.code = (self.code * self.radix + tok as usize) % self.modulus;
    }

    pub fn pushed(mut self, tok: Token) -> Self {
        self.push(tok);
        self
    }

    pub fn code(&self) -> usize {
        self.code
    }

    /// Dense code of the last `order` tokens, for a model of that order.
    pub fn code_for(&self, order: usize) -> usize {
        self.code % self.radix.pow(order as u32)
    }
}
