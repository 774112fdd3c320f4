use crate::error::{Error, Result};
use crate::model::{Sequence, TabularLM};

/// Mean negative log-likelihood per sequence, in nats.
pub fn test_lm_loss(model: &TabularLM, pairs: &[(Sequence, Sequence)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Undefined("loss over an empty test set".into()));
    }
    let mut s = 0.0;
    for (x, y) in pairs {
        s -= model.log_prob_seq(x, y)?;
    }
    Ok(s / pairs.len() as f64)
}

/// Mean negative log-likelihood per token (EOS steps included).
pub fn test_lm_loss_per_token(model: &TabularLM, pairs: &[(Sequence, Sequence)]) -> Result<f64> {
    let tokens: usize = pairs.iter().map(|(_, y)| y.len()).sum();
    if tokens == 0 {
        return Err(Error::Undefined("loss over zero tokens".into()));
    }
    Ok(test_lm_loss(model, pairs)? * pairs.len() as f64 / tokens as f64)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{enumerate_sequences, Vocab};
    use crate::stats::RunningMoments;

    #[test]
    fn own_samples_approach_the_entropy() {
        let v = Vocab::new(3, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = TabularLM::random(v, 1, 1.0, &mut rng).unwrap();
        let x = Sequence::prompt(vec![2]);
        let l = 6;
        // entropy by enumeration
        let h: f64 = enumerate_sequences(&v, l)
            .unwrap()
            .iter()
            .map(|y| {
                let lq = m.log_prob_seq(&x, y).unwrap();
                -lq.exp() * lq
            })
            .sum();
        let pairs: Vec<_> = (0..10_000)
            .map(|_| (x.clone(), m.sample(&x, l, &mut rng).unwrap()))
            .collect();
        let mut mom = RunningMoments::default();
        for (x, y) in &pairs {
            mom.push(-m.log_prob_seq(x, y).unwrap());
        }
        let loss = test_lm_loss(&m, &pairs).unwrap();
        assert!((loss - mom.mean()).abs() < 1e-9);
        assert!(
            (loss - h).abs() < 2.0 * mom.std_error().unwrap(),
            "{loss} vs {h}"
        );
    }

    #[test]
    fn deterministic_model_on_greedy_outputs() {
        let v = Vocab::new(3, 0).unwrap();
        let m = TabularLM::from_fn(v, 1, |k| {
            if k == [1] {
                vec![40.0, 0.0, 0.0]
            } else {
                vec![0.0, 40.0, 0.0]
            }
        })
        .unwrap();
        let x = Sequence::prompt(vec![2]);
        let y = m.greedy(&x, 5).unwrap();
        assert!(test_lm_loss(&m, &[(x, y)]).unwrap() < 1e-15);
    }

    #[test]
    fn order_invariant_and_empty_is_an_error() {
        let v = Vocab::new(3, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let m = TabularLM::random(v, 1, 1.0, &mut rng).unwrap();
        let x = Sequence::prompt(vec![1]);
        let mut pairs: Vec<_> = (0..50)
            .map(|_| (x.clone(), m.sample(&x, 5, &mut rng).unwrap()))
            .collect();
        let a = test_lm_loss(&m, &pairs).unwrap();
        pairs.reverse();
        assert!((a - test_lm_loss(&m, &pairs).unwrap()).abs() < 1e-12);
        assert!(test_lm_loss(&m, &[]).is_err());
    }
}
