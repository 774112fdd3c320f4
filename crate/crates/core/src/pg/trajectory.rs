use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tabular::sample_categorical;
use crate::model::{ContextCursor, Sequence, TabularLM, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampledFrom {
    Student,
    TeacherMixed,
}

/// One rollout with per-step log-probabilities frozen at collection time.
///
/// `log_q` is the student at collection time; estimators recompute the
/// student's terms from the live model, so `log_q` only serves to
/// reconstruct the behaviour distribution `log_mix`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: Sequence,
    pub response: Sequence,
    pub log_q: Vec<f64>,
    pub log_p: Vec<f64>,
    pub log_mix: Vec<f64>,
    /// Teacher mix-in strength of the behaviour distribution.
    pub alpha: f64,
    pub sampled_from: SampledFrom,
}

impl Trajectory {
    /// Scores an existing response under teacher, student and their
    /// `alpha`-mixture.
    pub fn score(
        teacher: &TabularLM,
        student: &TabularLM,
        alpha: f64,
        prompt: &Sequence,
        response: &Sequence,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        let log_p = teacher.step_log_probs(prompt, response)?;
        let log_q = student.step_log_probs(prompt, response)?;
        let log_mix = log_p
            .iter()
            .zip(&log_q)
            .map(|(&lp, &lq)| mix_log(alpha, lp, lq))
            .collect();
        Ok(Self {
            prompt: prompt.clone(),
            response: response.clone(),
            log_q,
            log_p,
            log_mix,
            alpha,
            sampled_from: if alpha == 0.0 {
                SampledFrom::Student
            } else {
                SampledFrom::TeacherMixed
            },
        })
    }

    /// Number of steps, including the EOS step.
    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        self.response.tokens()
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `log(alpha * e^lp + (1 - alpha) * e^lq)`.
pub(crate) fn mix_log(alpha: f64, lp: f64, lq: f64) -> f64 {
    if alpha == 0.0 {
        lq
    } else if alpha == 1.0 {
        lp
    } else {
        let a = alpha.ln() + lp;
        let b = (1.0 - alpha).ln() + lq;
        let m = a.max(b);
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

/// Teacher-mixed behaviour policy `alpha * p + (1 - alpha) * q`.
#[derive(Debug, Clone, Copy)]
pub struct MixedSampler<'a> {
    teacher: &'a TabularLM,
    student: &'a TabularLM,
    alpha: f64,
}

impl<'a> MixedSampler<'a> {
    pub fn new(teacher: &'a TabularLM, student: &'a TabularLM, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        teacher.check_vocab(student)?;
        Ok(Self {
            teacher,
            student,
            alpha,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn dist_at(&self, cur: &ContextCursor) -> Vec<f64> {
        let lp = self.teacher.row_log_probs(self.teacher.row_at(cur));
        let lq = self.student.row_log_probs(self.student.row_at(cur));
        lp.iter()
            .zip(lq)
            .map(|(p, q)| self.alpha * p.exp() + (1.0 - self.alpha) * q.exp())
            .collect()
    }

    /// Mixed next-token distribution at an explicit context.
    pub fn mixed_next_dist(&self, context: &[Token]) -> Result<Vec<f64>> {
        let p = self.teacher.next_token_dist(context)?;
        let q = self.student.next_token_dist(context)?;
        Ok(p.iter()
            .zip(&q)
            .map(|(p, q)| self.alpha * p + (1.0 - self.alpha) * q)
            .collect())
    }

    /// Rolls out one response from the mixture and scores it.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        prompt: &Sequence,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Trajectory> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        let vocab = self.teacher.vocab();
        prompt.validate_prompt(vocab)?;
        let order = self.teacher.order().max(self.student.order());
        let mut cur = ContextCursor::after(vocab, order, prompt.tokens());
        let mut tokens = Vec::new();
        let mut log_p = Vec::new();
        let mut log_q = Vec::new();
        let mut log_mix = Vec::new();
        while tokens.len() < max_len {
            let lp = self.teacher.row_log_probs(self.teacher.row_at(&cur));
            let lq = self.student.row_log_probs(self.student.row_at(&cur));
            let t = sample_categorical(&self.dist_at(&cur), rng);
            tokens.push(t as Token);
            log_p.push(lp[t]);
            log_q.push(lq[t]);
            log_mix.push(mix_log(self.alpha, lp[t], lq[t]));
            if t as Token == vocab.eos() {
                break;
            }
            cur.push(t as Token);
        }
        Ok(Trajectory {
            prompt: prompt.clone(),
            response: Sequence::new(tokens, true),
            log_q,
            log_p,
            log_mix,
            alpha: self.alpha,
            sampled_from: if self.alpha == 0.0 {
                SampledFrom::Student
            } else {
                SampledFrom::TeacherMixed
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::Vocab;

    fn pair() -> (TabularLM, TabularLM) {
        let v = Vocab::new(2, 0).unwrap();
        let p = TabularLM::new(v, 0, vec![0.9f64.ln(), 0.1f64.ln()]).unwrap();
        let q = TabularLM::new(v, 0, vec![0.1f64.ln(), 0.9f64.ln()]).unwrap();
        (p, q)
    }

    #[test]
    fn mixture_endpoints_and_interior() {
        let (p, q) = pair();
        let d = MixedSampler::new(&p, &q, 0.2)
            .unwrap()
            .mixed_next_dist(&[])
            .unwrap();
        assert!((d[0] - 0.26).abs() < 1e-12 && (d[1] - 0.74).abs() < 1e-12);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let d1 = MixedSampler::new(&p, &q, 1.0)
            .unwrap()
            .mixed_next_dist(&[])
            .unwrap();
        assert_eq!(d1, p.next_token_dist(&[]).unwrap());
        let d0 = MixedSampler::new(&p, &q, 0.0)
            .unwrap()
            .mixed_next_dist(&[])
            .unwrap();
        assert_eq!(d0, q.next_token_dist(&[]).unwrap());
        assert!(MixedSampler::new(&p, &q, 1.5).is_err());
        assert!(MixedSampler::new(&p, &q, -0.1).is_err());
    }

    #[test]
    fn sampled_trajectory_matches_scoring() {
        let v = Vocab::new(4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = TabularLM::random(v, 2, 1.0, &mut rng).unwrap();
        let q = TabularLM::random(v, 1, 1.0, &mut rng).unwrap();
        let s = MixedSampler::new(&p, &q, 0.3).unwrap();
        let x = Sequence::prompt(vec![1, 3]);
        for _ in 0..20 {
            let tr = s.sample(&x, 6, &mut rng).unwrap();
            let again = Trajectory::score(&p, &q, 0.3, &x, &tr.response).unwrap();
            for (a, b) in tr.log_mix.iter().zip(&again.log_mix) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(tr.log_p, again.log_p);
            assert_eq!(tr.log_q, again.log_q);
        }
    }
}
