use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Sequence, TabularLM, Token, Vocab};

/// Parameters of a synthetic conditional-generation task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub vocab_size: usize,
    pub eos: Token,
    /// Order of the data-generating process and of the teacher.
    pub teacher_order: usize,
    pub student_order: usize,
    /// Allow `student_order >= teacher_order`.
    pub allow_no_gap: bool,
    /// Number of distinct prompts; all length-`prompt_len` prompts when
    /// larger than that count.
    pub n_prompts: usize,
    pub prompt_len: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub n_pt: usize,
    pub max_len: usize,
    /// Standard deviation of the ground-truth logits.
    pub gt_scale: f64,
    /// Additive count smoothing of the MLE teacher.
    pub teacher_smoothing: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            eos: 0,
            teacher_order: 2,
            student_order: 1,
            allow_no_gap: false,
            n_prompts: 49,
            prompt_len: 2,
            n_train: 5000,
            n_valid: 500,
            n_test: 500,
            n_pt: 2000,
            max_len: 20,
            gt_scale: 1.5,
            teacher_smoothing: 0.1,
        }
    }
}

impl TaskConfig {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.vocab_size, self.eos)
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.student_order >= self.teacher_order && !self.allow_no_gap {
            return bad(format!(
                "task.student_order {} must be below task.teacher_order {} (set task.allow_no_gap)",
                self.student_order, self.teacher_order
            ));
        }
        if self.n_prompts == 0 {
            return bad("task.n_prompts must be positive".into());
        }
        if self.max_len == 0 {
            return bad("task.max_len must be positive".into());
        }
        if self.n_train == 0 || self.n_valid == 0 || self.n_test == 0 {
            return bad("task split sizes must be positive".into());
        }
        if !(self.gt_scale > 0.0 && self.gt_scale.is_finite()) {
            return bad(format!("task.gt_scale {} must be positive", self.gt_scale));
        }
        if !(self.teacher_smoothing > 0.0 && self.teacher_smoothing.is_finite()) {
            return bad(format!(
                "task.teacher_smoothing {} must be positive",
                self.teacher_smoothing
            ));
        }
        Ok(())
    }
}

pub type Pair = (Sequence, Sequence);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub ground_truth: TabularLM,
    pub prompts: Vec<Sequence>,
    /// Sampling weights of `prompts`, summing to 1.
    pub prompt_weights: Vec<f64>,
    pub train: Vec<Pair>,
    pub valid: Vec<Pair>,
    pub test: Vec<Pair>,
    /// Unconditional sequences (empty prompt) from the ground truth.
    pub pt_corpus: Vec<Sequence>,
}

impl SyntheticTask {
    pub fn vocab(&self) -> &Vocab {
        self.ground_truth.vocab()
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }
}

fn all_prompts(vocab: &Vocab, len: usize) -> Vec<Sequence> {
    let content: Vec<Token> = vocab.content_tokens().collect();
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                content.iter().map(move |&t| {
                    let mut q = p.clone();
                    q.push(t);
                    q
                })
            })
            .collect();
    }
    out.into_iter().map(Sequence::prompt).collect()
}

/// Builds a task and its teacher.
///
/// The ground truth has i.i.d. `N(0, gt_scale^2)` logits. Prompts are the
/// content-token strings of length `prompt_len`, subsampled without
/// replacement to `n_prompts`. Splits are independent draws
/// `x ~ uniform(prompts)`, `y ~ ground_truth(.|x)`. The teacher is the
/// smoothed count MLE of order `teacher_order` on the train split.
pub fn make_synthetic_task<R: Rng + ?Sized>(
    config: &TaskConfig,
    rng: &mut R,
) -> Result<(SyntheticTask, TabularLM)> {
    config.validate()?;
    let vocab = config.vocab()?;
    let ground_truth = TabularLM::random(vocab, config.teacher_order, config.gt_scale, rng)?;
    let mut prompts = all_prompts(&vocab, config.prompt_len);
    if config.n_prompts < prompts.len() {
        prompts.shuffle(rng);
        prompts.truncate(config.n_prompts);
        prompts.sort_by(|a, b| a.tokens().cmp(b.tokens()));
    }
    let w = 1.0 / prompts.len() as f64;
    let prompt_weights = vec![w; prompts.len()];

    let draw = |n: usize, rng: &mut R| -> Result<Vec<Pair>> {
        (0..n)
            .map(|_| {
                let x = prompts[rng.gen_range(0..prompts.len())].clone();
                let y = ground_truth.sample(&x, config.max_len, rng)?;
                Ok((x, y))
            })
            .collect()
    };
    let train = draw(config.n_train, rng)?;
    let valid = draw(config.n_valid, rng)?;
    let test = draw(config.n_test, rng)?;
    let empty = Sequence::empty_prompt();
    let pt_corpus = (0..config.n_pt)
        .map(|_| ground_truth.sample(&empty, config.max_len, rng))
        .collect::<Result<Vec<_>>>()?;

    let teacher = fit_count_mle(
        vocab,
        config.teacher_order,
        &train,
        config.teacher_smoothing,
    )?;
    Ok((
        SyntheticTask {
            config: config.clone(),
            ground_truth,
            prompts,
            prompt_weights,
            train,
            valid,
            test,
            pt_corpus,
        },
        teacher,
    ))
}

/// Closed-form maximum likelihood on `pairs`: each row's logits are
/// `ln(count + smoothing)`. With `smoothing = 0` unvisited rows are uniform
/// and unseen tokens at visited rows get logit `-1e3`.
pub fn fit_count_mle(
    vocab: Vocab,
    order: usize,
    pairs: &[Pair],
    smoothing: f64,
) -> Result<TabularLM> {
    if !(smoothing >= 0.0) {
        return Err(Error::Config(format!(
            "smoothing {smoothing} must be non-negative"
        )));
    }
    let mut model = TabularLM::uniform(vocab, order)?;
    let v = vocab.size();
    let mut counts = vec![0.0; model.num_params()];
    for (x, y) in pairs {
        for (&row, &tok) in model.rows_along(x, y)?.iter().zip(y.tokens()) {
            counts[row * v + tok as usize] += 1.0;
        }
    }
    let mut params = vec![0.0; counts.len()];
    for (row_c, row_p) in counts.chunks(v).zip(params.chunks_mut(v)) {
        if row_c.iter().sum::<f64>() == 0.0 {
            continue;
        }
        for (c, p) in row_c.iter().zip(row_p.iter_mut()) {
            let m = c + smoothing;
            *p = if m > 0.0 { m.ln() } else { -1e3 };
        }
    }
    model.set_params(params)?;
    Ok(model)
}
