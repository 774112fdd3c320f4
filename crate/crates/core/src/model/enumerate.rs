use crate::error::{Error, Result};

use super::{Sequence, Token, Vocab};

/// Maximum `V^max_len` accepted by the enumerators.
pub const ENUMERATION_BOUND: u64 = 10_000_000;

fn check_bound(vocab: &Vocab, max_len: usize) -> Result<()> {
    match (vocab.size() as u64).checked_pow(max_len as u32) {
        Some(n) if n <= ENUMERATION_BOUND => Ok(()),
        _ => Err(Error::EnumerationTooLarge {
            size: vocab.size(),
            max_len,
            bound: ENUMERATION_BOUND,
        }),
    }
}

/// Visits every terminated response of length `<= max_len` in lexicographic
/// token order: sequences ending in EOS, plus EOS-free sequences of length
/// exactly `max_len`.
pub fn for_each_sequence(
    vocab: &Vocab,
    max_len: usize,
    mut visit: impl FnMut(&Sequence),
) -> Result<()> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    check_bound(vocab, max_len)?;
    let mut prefix: Vec<Token> = Vec::with_capacity(max_len);
    let mut seq = Sequence::new(Vec::new(), true);
    walk(vocab, max_len, &mut prefix, &mut seq, &mut visit);
    Ok(())
}

fn walk(
    vocab: &Vocab,
    max_len: usize,
    prefix: &mut Vec<Token>,
    scratch: &mut Sequence,
    visit: &mut impl FnMut(&Sequence),
) {
    for t in 0..vocab.size() as Token {
        prefix.push(t);
        if t == vocab.eos() || prefix.len() == max_len {
            *scratch = Sequence::new(prefix.clone(), true);
            visit(scratch);
        } else {
            walk(vocab, max_len, prefix, scratch, visit);
        }
        prefix.pop();
    }
}

/// All terminated responses up to `max_len`, lexicographically ordered.
pub fn enumerate_sequences(vocab: &Vocab, max_len: usize) -> Result<Vec<Sequence>> {
    let mut out = Vec::new();
    for_each_sequence(vocab, max_len, |s| out.push(s.clone()))?;
    Ok(out)
}
