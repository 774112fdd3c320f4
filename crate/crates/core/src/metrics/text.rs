use std::collections::HashMap;

use crate::model::{Sequence, Token, Vocab};

fn lcs_len(a: &[Token], b: &[Token]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 between token sequences, EOS removed from both.
///
/// Two empty sequences score 1; exactly one empty scores 0.
pub fn rouge_l(candidate: &Sequence, reference: &Sequence, vocab: &Vocab) -> f64 {
    rouge_l_tokens(candidate.content(vocab), reference.content(vocab))
}

/// [`rouge_l`] on raw token slices (no EOS handling).
pub fn rouge_l_tokens(candidate: &[Token], reference: &[Token]) -> f64 {
    match (candidate.is_empty(), reference.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Distinct n-grams over total n-grams, pooled across responses (EOS
/// excluded). `None` when no response has `n` tokens.
pub fn distinct_n(responses: &[Sequence], n: usize, vocab: &Vocab) -> Option<f64> {
    if n == 0 {
        return None;
    }
    let mut seen: HashMap<&[Token], usize> = HashMap::new();
    let mut total = 0usize;
    for r in responses {
        let toks = r.content(vocab);
        if toks.len() < n {
            continue;
        }
        for g in toks.windows(n) {
            *seen.entry(g).or_default() += 1;
            total += 1;
        }
    }
    (total > 0).then(|| seen.len() as f64 / total as f64)
}
