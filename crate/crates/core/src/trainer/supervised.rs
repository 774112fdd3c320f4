use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::test_lm_loss_per_token;
use crate::model::{ParamVector, Sequence, TabularLM};

use super::checkpoint::Checkpoint;
use super::eval::sampled_rouge;
use super::task::{Pair, SyntheticTask};

/// Plain minibatch SGD settings for the teacher-forced trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Pairs per update; 0 means the whole training set.
    pub batch_size: usize,
    /// Weight of the teacher cross-entropy term (word-level KD only).
    pub mix_rate: f64,
    /// Teacher samples generated for SeqKD.
    pub n_generated: usize,
    /// Seed of the validation Rouge-L sampling stream.
    pub eval_seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            lr: 2.0,
            epochs: 20,
            batch_size: 64,
            mix_rate: 0.5,
            n_generated: 5000,
            eval_seed: 0,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.mix_rate) {
            return Err(Error::Config(format!(
                "mix_rate {} outside [0, 1]",
                self.mix_rate
            )));
        }
        Ok(())
    }
}

/// Per-row target mass of a teacher-forced objective. For each visited
/// student row, `mass` holds `(1 - mix) * onehot(y_t) + mix * p(.|ctx_t)`
/// summed over visits; the loss is `-(1/tokens) sum mass * log q`.
#[derive(Debug, Clone)]
pub struct TargetStats {
    pub mass: Vec<f64>,
    pub tokens: usize,
}

impl TargetStats {
    pub fn collect(
        student: &TabularLM,
        teacher: Option<(&TabularLM, f64)>,
        pairs: &[&Pair],
    ) -> Result<Self> {
        let v = student.vocab().size();
        let mut mass = vec![0.0; student.num_params()];
        let mut tokens = 0;
        for (x, y) in pairs.iter().map(|p| (&p.0, &p.1)) {
            let rows = student.rows_along(x, y)?;
            let rows_p = match teacher {
                Some((p, _)) => Some(p.rows_along(x, y)?),
                None => None,
            };
            for (i, (&row, &tok)) in rows.iter().zip(y.tokens()).enumerate() {
                let slot = &mut mass[row * v..(row + 1) * v];
                match (teacher, &rows_p) {
                    (Some((p, mix)), Some(rp)) => {
                        slot[tok as usize] += 1.0 - mix;
                        for (m, lp) in slot.iter_mut().zip(p.row_log_probs(rp[i])) {
                            *m += mix * lp.exp();
                        }
                    }
                    _ => slot[tok as usize] += 1.0,
                }
                tokens += 1;
            }
        }
        Ok(Self { mass, tokens })
    }

    /// Mean per-token loss of `model` under these targets.
    pub fn loss(&self, model: &TabularLM) -> f64 {
        if self.tokens == 0 {
            return 0.0;
        }
        let v = model.vocab().size();
        let mut s = 0.0;
        for (r, m) in self.mass.chunks(v).enumerate() {
            if m.iter().any(|&w| w != 0.0) {
                s -= m
                    .iter()
                    .zip(model.row_log_probs(r))
                    .map(|(w, l)| w * l)
                    .sum::<f64>();
            }
        }
        s / self.tokens as f64
    }

    /// Gradient of [`Self::loss`]: row `r` gets `(sum(m_r) q_r - m_r) / (T N)`.
    pub fn grad(&self, model: &TabularLM) -> ParamVector {
        let v = model.vocab().size();
        let mut g = ParamVector::zeros(model.num_params());
        if self.tokens == 0 {
            return g;
        }
        let scale = 1.0 / (self.tokens as f64 * model.temperature());
        for (r, (m, out)) in self.mass.chunks(v).zip(g.chunks_mut(v)).enumerate() {
            let total: f64 = m.iter().sum();
            if total == 0.0 {
                continue;
            }
            for ((o, w), l) in out.iter_mut().zip(m).zip(model.row_log_probs(r)) {
                *o = scale * (total * l.exp() - w);
            }
        }
        g
    }
}

/// Mean over `batch` of `-grad log q(d)` for unconditional sequences.
pub fn pt_loss_grad(student: &TabularLM, batch: &[Sequence]) -> Result<ParamVector> {
    let mut g = ParamVector::zeros(student.num_params());
    if batch.is_empty() {
        return Ok(g);
    }
    let x = Sequence::empty_prompt();
    let scale = -1.0 / batch.len() as f64;
    for d in batch {
        student.accumulate_grad_log_prob(&x, d, scale, &mut g)?;
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-token training objective over the epoch's batches; `None`
    /// before training.
    pub train_loss: Option<f64>,
    /// Ground-truth NLL per token on the validation split.
    pub valid_loss: f64,
    pub valid_rouge: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedOutcome {
    /// Lowest validation loss (the initialization rule for distillation).
    pub best_loss: Checkpoint,
    /// Highest validation Rouge-L (the baseline selection rule).
    pub best_rouge: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
}

fn supervised_train<R: Rng + ?Sized>(
    student: &TabularLM,
    teacher: Option<(&TabularLM, f64)>,
    train: &[Pair],
    task: &SyntheticTask,
    cfg: &SupervisedConfig,
    fingerprint: &str,
    rng: &mut R,
) -> Result<SupervisedOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut model = student.clone();
    let eval = |m: &TabularLM, epoch: usize, train_loss: Option<f64>| -> Result<EpochRecord> {
        Ok(EpochRecord {
            epoch,
            train_loss,
            valid_loss: test_lm_loss_per_token(m, &task.valid)?,
            valid_rouge: sampled_rouge(m, &task.valid, task.max_len(), cfg.eval_seed)?,
        })
    };
    let mut history = vec![eval(&model, 0, None)?];
    let mut best_loss = (history[0].valid_loss, model.clone(), 0);
    let mut best_rouge = (history[0].valid_rouge, model.clone(), 0);
    let batch = if cfg.batch_size == 0 {
        train.len()
    } else {
        cfg.batch_size
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(batch) {
            let pairs: Vec<&Pair> = chunk.iter().map(|&i| &train[i]).collect();
            let stats = TargetStats::collect(&model, teacher, &pairs)?;
            loss_sum += stats.loss(&model);
            n_batches += 1;
            let g = stats.grad(&model);
            if !g.is_finite() {
                return Err(Error::TrainingAborted {
                    step,
                    reason: "non-finite gradient".into(),
                    last_good: Box::new(model),
                });
            }
            model.apply_update(&g, -cfg.lr)?;
            step += 1;
        }
        let rec = eval(&model, epoch, Some(loss_sum / n_batches as f64))?;
        if !rec.valid_loss.is_finite() {
            return Err(Error::TrainingAborted {
                step,
                reason: format!("validation loss {} at epoch {epoch}", rec.valid_loss),
                last_good: Box::new(best_loss.1),
            });
        }
        if rec.valid_loss < best_loss.0 {
            best_loss = (rec.valid_loss, model.clone(), step);
        }
        if rec.valid_rouge > best_rouge.0 {
            best_rouge = (rec.valid_rouge, model.clone(), step);
        }
        history.push(rec);
    }
    let ck = |m: TabularLM, s: usize| Checkpoint::new(m, s, fingerprint);
    Ok(SupervisedOutcome {
        best_loss: ck(best_loss.1, best_loss.2),
        best_rouge: ck(best_rouge.1, best_rouge.2),
        last: ck(model, step),
        history,
    })
}

/// Maximum likelihood on the ground-truth training pairs.
pub fn sft_train<R: Rng + ?Sized>(
    student: &TabularLM,
    task: &SyntheticTask,
    cfg: &SupervisedConfig,
    fingerprint: &str,
    rng: &mut R,
) -> Result<SupervisedOutcome> {
    supervised_train(student, None, &task.train, task, cfg, fingerprint, rng)
}

/// Per-token mixture of teacher cross-entropy (weight `cfg.mix_rate`) and
/// ground-truth NLL on the training pairs.
pub fn word_kd_train<R: Rng + ?Sized>(
    student: &TabularLM,
    teacher: &TabularLM,
    task: &SyntheticTask,
    cfg: &SupervisedConfig,
    fingerprint: &str,
    rng: &mut R,
) -> Result<SupervisedOutcome> {
    student.check_vocab(teacher)?;
    let t = (cfg.mix_rate > 0.0).then_some((teacher, cfg.mix_rate));
    supervised_train(student, t, &task.train, task, cfg, fingerprint, rng)
}

/// Teacher-generated training pairs: prompts drawn by `task.prompt_weights`,
/// responses sampled at temperature 1.
pub fn generate_teacher_corpus<R: Rng + ?Sized>(
    teacher: &TabularLM,
    task: &SyntheticTask,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Pair>> {
    let dist = rand::distributions::WeightedIndex::new(&task.prompt_weights)
        .map_err(|e| Error::Config(format!("prompt weights: {e}")))?;
    (0..n)
        .map(|_| {
            let x = task.prompts[rng.sample(&dist)].clone();
            let y = teacher.sample(&x, task.max_len(), rng)?;
            Ok((x, y))
        })
        .collect()
}

/// Maximum likelihood on `cfg.n_generated` teacher samples.
pub fn seqkd_train<R: Rng + ?Sized>(
    student: &TabularLM,
    teacher: &TabularLM,
    task: &SyntheticTask,
    cfg: &SupervisedConfig,
    fingerprint: &str,
    rng: &mut R,
) -> Result<SupervisedOutcome> {
    student.check_vocab(teacher)?;
    let corpus = generate_teacher_corpus(teacher, task, cfg.n_generated, rng)?;
    supervised_train(student, None, &corpus, task, cfg, fingerprint, rng)
}
