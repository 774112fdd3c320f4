use std::collections::VecDeque;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::divergence::{mean_markov_kld, KlKind};
use crate::error::{Error, Result};
use crate::model::{Sequence, TabularLM};
use crate::pg::{
    collect_trajectories, estimate_from_trajectories, Estimator, GradientParts, LengthNorm,
    MixedSampler, PgConfig, Trajectory, WeightMode,
};

use super::checkpoint::Checkpoint;
use super::eval::sampled_rouge;
use super::rng::{stream, Stream};
use super::supervised::pt_loss_grad;
use super::task::SyntheticTask;

/// Window of the smoothed divergence in the trace.
pub const SMOOTHING_WINDOW: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub alpha: f64,
    /// `None` disables clipping.
    pub clip_eps: Option<f64>,
    pub lr: f64,
    /// Minibatch size `M`.
    pub batch: usize,
    /// Rollouts collected per round.
    pub collect_size: usize,
    pub inner_epochs: usize,
    /// Parameter updates in total.
    pub steps: usize,
    pub length_norm: LengthNorm,
    pub weight_mode: WeightMode,
    pub single_step_decomp: bool,
    pub pt_loss: bool,
    pub seed: u64,
    /// Steps between validation Rouge-L evaluations.
    pub eval_interval: usize,
    /// Steps between exact divergence evaluations in the trace; 0 disables.
    pub kld_interval: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            clip_eps: Some(0.2),
            lr: 0.3,
            batch: 64,
            collect_size: 256,
            inner_epochs: 4,
            steps: 2000,
            length_norm: LengthNorm::TermCount,
            weight_mode: WeightMode::PerStep,
            single_step_decomp: true,
            pt_loss: false,
            seed: 0,
            eval_interval: 100,
            kld_interval: 1,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.pg().validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("distill.lr must be positive");
        }
        if self.batch == 0 || self.collect_size == 0 || self.inner_epochs == 0 {
            return bad("distill.batch, collect_size and inner_epochs must be positive");
        }
        if self.batch > self.collect_size {
            return bad("distill.batch must not exceed distill.collect_size");
        }
        if self.eval_interval == 0 {
            return bad("distill.eval_interval must be positive");
        }
        Ok(())
    }

    pub fn pg(&self) -> PgConfig {
        PgConfig {
            alpha: self.alpha,
            weight_mode: self.weight_mode,
            length_norm: self.length_norm,
            clip_eps: self.clip_eps,
            single_step_decomp: self.single_step_decomp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Updates applied so far (the record after the first update has step 1).
    pub step: usize,
    /// Exact reverse KL to the teacher after this step, mean over prompts.
    pub rev_kld: Option<f64>,
    /// Mean of the last (up to) 32 recorded `rev_kld` values.
    pub rev_kld_smoothed: Option<f64>,
    pub single_norm: f64,
    pub long_norm: f64,
    pub pt_norm: f64,
    /// Trace of the per-trajectory contribution covariance.
    pub grad_variance_trace: Option<f64>,
    pub mean_response_len: f64,
    pub valid_rouge: Option<f64>,
    pub wall_time_s: f64,
}

/// Result of one update.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub record: TraceRecord,
    /// Gradient parts the update was built from.
    pub parts: GradientParts,
    /// Parameters before the update.
    pub before: Vec<f64>,
}

/// Stateful driver of the distillation loop. Rollouts are collected from
/// the mixture of teacher and live student, then reused for
/// `inner_epochs` shuffled passes of `batch`-sized updates.
pub struct MiniLlmTrainer<'a> {
    teacher: &'a TabularLM,
    task: &'a SyntheticTask,
    config: DistillConfig,
    model: TabularLM,
    rng: ChaCha8Rng,
    buffer: Vec<Trajectory>,
    queue: VecDeque<Vec<usize>>,
    step: usize,
    recent: VecDeque<f64>,
    started: Instant,
}

impl<'a> MiniLlmTrainer<'a> {
    pub fn new(
        init: TabularLM,
        teacher: &'a TabularLM,
        task: &'a SyntheticTask,
        config: DistillConfig,
    ) -> Result<Self> {
        config.validate()?;
        init.check_vocab(teacher)?;
        let rng = stream(config.seed, Stream::Rollout);
        Ok(Self {
            teacher,
            task,
            config,
            model: init,
            rng,
            buffer: Vec::new(),
            queue: VecDeque::new(),
            step: 0,
            recent: VecDeque::new(),
            started: Instant::now(),
        })
    }

    pub fn model(&self) -> &TabularLM {
        &self.model
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &DistillConfig {
        &self.config
    }

    fn refill(&mut self) -> Result<()> {
        let sampler = MixedSampler::new(self.teacher, &self.model, self.config.alpha)?;
        self.buffer = collect_trajectories(
            &sampler,
            &self.task.prompts,
            self.config.collect_size,
            self.task.max_len(),
            &mut self.rng,
        )?;
        for _ in 0..self.config.inner_epochs {
            let mut idx: Vec<usize> = (0..self.buffer.len()).collect();
            idx.shuffle(&mut self.rng);
            for c in idx.chunks(self.config.batch) {
                self.queue.push_back(c.to_vec());
            }
        }
        Ok(())
    }

    fn exact_rev_kld(&self) -> Result<f64> {
        mean_markov_kld(
            self.teacher,
            &self.model,
            &self.task.prompts,
            self.task.max_len(),
            KlKind::Reverse,
        )
    }

    /// Exact reverse KL of the current model, recorded as the step-0 value
    /// of the smoothing window.
    pub fn initial_record(&mut self) -> Result<TraceRecord> {
        let kld = self.exact_rev_kld()?;
        self.recent.push_back(kld);
        Ok(TraceRecord {
            step: 0,
            rev_kld: Some(kld),
            rev_kld_smoothed: Some(kld),
            single_norm: 0.0,
            long_norm: 0.0,
            pt_norm: 0.0,
            grad_variance_trace: None,
            mean_response_len: 0.0,
            valid_rouge: None,
            wall_time_s: 0.0,
        })
    }

    /// Applies one update `theta -= lr * (single + long + pt)`.
    pub fn step(&mut self) -> Result<StepOutcome> {
        if self.queue.is_empty() {
            self.refill()?;
        }
        let idx = self
            .queue
            .pop_front()
            .expect("refill queues at least one batch");
        let batch: Vec<Trajectory> = idx.iter().map(|&i| self.buffer[i].clone()).collect();
        let est = estimate_from_trajectories(
            self.teacher,
            &self.model,
            &batch,
            &Estimator::MiniLlm(self.config.pg()),
        )?;
        let mut parts = est.parts.expect("estimator fills parts");
        let pt = if self.config.pt_loss && !self.task.pt_corpus.is_empty() {
            let docs: Vec<Sequence> = (0..self.config.batch)
                .map(|_| {
                    self.task.pt_corpus[self.rng.gen_range(0..self.task.pt_corpus.len())].clone()
                })
                .collect();
            pt_loss_grad(&self.model, &docs)?
        } else {
            crate::ParamVector::zeros(self.model.num_params())
        };
        parts.pt = Some(pt);
        let update = parts.total();
        if !update.is_finite() {
            return Err(Error::TrainingAborted {
                step: self.step,
                reason: "non-finite gradient".into(),
                last_good: Box::new(self.model.clone()),
            });
        }
        let before = self.model.params().to_vec();
        self.model.apply_update(&update, -self.config.lr)?;
        self.step += 1;

        let rev_kld = if self.config.kld_interval > 0 && self.step % self.config.kld_interval == 0 {
            let k = self.exact_rev_kld()?;
            self.recent.push_back(k);
            if self.recent.len() > SMOOTHING_WINDOW {
                self.recent.pop_front();
            }
            Some(k)
        } else {
            None
        };
        let smoothed = (!self.recent.is_empty())
            .then(|| self.recent.iter().sum::<f64>() / self.recent.len() as f64);
        let record = TraceRecord {
            step: self.step,
            rev_kld,
            rev_kld_smoothed: smoothed,
            single_norm: parts.single.norm(),
            long_norm: parts.long.norm(),
            pt_norm: parts.pt.as_ref().map_or(0.0, |p| p.norm()),
            grad_variance_trace: est.component_variance.as_ref().map(|v| v.iter().sum()),
            mean_response_len: batch.iter().map(|t| t.len() as f64).sum::<f64>()
                / batch.len() as f64,
            valid_rouge: None,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        Ok(StepOutcome {
            record,
            parts,
            before,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    /// Highest validation Rouge-L among evaluated steps.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub trace: Vec<TraceRecord>,
}

/// Runs `config.steps` updates from `init`, evaluating validation Rouge-L
/// every `eval_interval` steps (and at steps 0 and `steps`). The returned
/// `best` is the highest-scoring evaluated model after at least one update.
pub fn minillm_train(
    init: &Checkpoint,
    teacher: &TabularLM,
    task: &SyntheticTask,
    config: &DistillConfig,
    eval_seed: u64,
    fingerprint: &str,
) -> Result<DistillOutcome> {
    let mut tr = MiniLlmTrainer::new(init.model.clone(), teacher, task, config.clone())?;
    let mut trace = Vec::with_capacity(config.steps + 1);
    let mut first = if config.kld_interval > 0 {
        tr.initial_record()?
    } else {
        TraceRecord {
            step: 0,
            rev_kld: None,
            rev_kld_smoothed: None,
            single_norm: 0.0,
            long_norm: 0.0,
            pt_norm: 0.0,
            grad_variance_trace: None,
            mean_response_len: 0.0,
            valid_rouge: None,
            wall_time_s: 0.0,
        }
    };
    let r0 = sampled_rouge(tr.model(), &task.valid, task.max_len(), eval_seed)?;
    first.valid_rouge = Some(r0);
    trace.push(first);
    // the initialization is traced but is not a selection candidate
    let mut best: Option<(f64, TabularLM, usize)> = None;
    while tr.step_count() < config.steps {
        let mut out = match tr.step() {
            Ok(o) => o,
            Err(Error::TrainingAborted { step, reason, .. }) => {
                let last_good = best.map_or_else(|| init.model.clone(), |b| b.1);
                return Err(Error::TrainingAborted {
                    step,
                    reason,
                    last_good: Box::new(last_good),
                });
            }
            Err(e) => return Err(e),
        };
        let s = tr.step_count();
        if s % config.eval_interval == 0 || s == config.steps {
            let r = sampled_rouge(tr.model(), &task.valid, task.max_len(), eval_seed)?;
            out.record.valid_rouge = Some(r);
            if best.as_ref().map_or(true, |b| r > b.0) {
                best = Some((r, tr.model().clone(), s));
            }
        }
        trace.push(out.record);
    }
    let (_, best_model, best_step) = best.unwrap_or((r0, init.model.clone(), 0));
    Ok(DistillOutcome {
        best: Checkpoint::new(best_model, best_step, fingerprint),
        last: Checkpoint::new(tr.model().clone(), tr.step_count(), fingerprint),
        trace,
    })
}
