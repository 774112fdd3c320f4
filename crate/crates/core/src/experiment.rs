//! End-to-end runs shared by the command line and the acceptance suite:
//! task generation, the SFT initialization, the baselines, and MiniLLM with
//! its ablation variants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TabularLM;
use crate::pg::LengthNorm;
use crate::toy::ToyConfig;
use crate::trainer::{
    fingerprint, make_synthetic_task, minillm_train, seqkd_train, sft_train, stream, word_kd_train,
    Checkpoint, DistillConfig, DistillOutcome, EvalConfig, Stream, SupervisedConfig,
    SupervisedOutcome, SyntheticTask, TaskConfig,
};

/// The single configuration document read by every command. Unknown keys
/// are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub sft: SupervisedConfig,
    pub kd: SupervisedConfig,
    pub seqkd: SupervisedConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub toy: ToyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            task: TaskConfig::default(),
            sft: SupervisedConfig::default(),
            kd: SupervisedConfig::default(),
            seqkd: SupervisedConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            toy: ToyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Copies the run seed into every component that carries its own, so the
    /// snapshot written next to the outputs is the configuration actually used.
    pub fn resolve(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.distill.seed = self.seed;
        for c in [&mut self.sft, &mut self.kd, &mut self.seqkd] {
            c.eval_seed = self.seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |name: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{name}: {m}")),
                other => other,
            })
        };
        ctx("task", self.task.validate())?;
        ctx("sft", self.sft.validate())?;
        ctx("kd", self.kd.validate())?;
        ctx("seqkd", self.seqkd.validate())?;
        ctx("distill", self.distill.validate())?;
        ctx("toy", self.toy.validate())?;
        if self.eval.distinct_n == 0 {
            return Err(Error::Config("eval: distinct_n must be positive".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> Result<String> {
        fingerprint(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sft,
    Kd,
    SeqKd,
    MiniLlm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sft => "sft",
            Self::Kd => "kd",
            Self::SeqKd => "seqkd",
            Self::MiniLlm => "minillm",
        }
    }
}

/// One MiniLLM configuration of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoLengthNorm,
    NoTeacherMix,
    NoSingleStep,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Self::Full,
        Self::NoLengthNorm,
        Self::NoTeacherMix,
        Self::NoSingleStep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoLengthNorm => "no_length_norm",
            Self::NoTeacherMix => "no_teacher_mix",
            Self::NoSingleStep => "no_single_step",
        }
    }

    /// `base` with this variant's switch turned off.
    pub fn apply(self, base: &DistillConfig) -> DistillConfig {
        let mut c = base.clone();
        match self {
            Self::Full => {}
            Self::NoLengthNorm => c.length_norm = LengthNorm::Off,
            Self::NoTeacherMix => c.alpha = 0.0,
            Self::NoSingleStep => c.single_step_decomp = false,
        }
        c
    }
}

/// A generated task with its teacher and the untrained student.
pub struct Prepared {
    pub config: RunConfig,
    pub fingerprint: String,
    pub task: SyntheticTask,
    pub teacher: TabularLM,
    pub student_init: TabularLM,
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    let (task, teacher) =
        make_synthetic_task(&config.task, &mut stream(config.seed, Stream::Task))?;
    let student_init = TabularLM::uniform(*task.vocab(), config.task.student_order)?;
    Ok(Prepared {
        fingerprint: config.fingerprint()?,
        config: config.clone(),
        task,
        teacher,
        student_init,
    })
}

/// Result of one method. `selected` is the checkpoint with the highest
/// validation Rouge-L; for MiniLLM the initialization is not a candidate.
pub struct MethodRun {
    pub method: Method,
    pub selected: Checkpoint,
    pub last: Checkpoint,
    /// The SFT checkpoint MiniLLM started from.
    pub init: Option<Checkpoint>,
    pub supervised: Option<SupervisedOutcome>,
    pub distill: Option<DistillOutcome>,
}

impl Prepared {
    pub fn sft(&self) -> Result<SupervisedOutcome> {
        let c = &self.config;
        sft_train(
            &self.student_init,
            &self.task,
            &c.sft,
            &self.fingerprint,
            &mut stream(c.seed, Stream::Sft),
        )
    }

    pub fn word_kd(&self) -> Result<SupervisedOutcome> {
        let c = &self.config;
        word_kd_train(
            &self.student_init,
            &self.teacher,
            &self.task,
            &c.kd,
            &self.fingerprint,
            &mut stream(c.seed, Stream::Kd),
        )
    }

    pub fn seqkd(&self) -> Result<SupervisedOutcome> {
        let c = &self.config;
        seqkd_train(
            &self.student_init,
            &self.teacher,
            &self.task,
            &c.seqkd,
            &self.fingerprint,
            &mut stream(c.seed, Stream::SeqKd),
        )
    }

    /// MiniLLM from `init`, typically the lowest-validation-loss SFT checkpoint.
    pub fn minillm(&self, init: &Checkpoint, distill: &DistillConfig) -> Result<DistillOutcome> {
        minillm_train(
            init,
            &self.teacher,
            &self.task,
            distill,
            self.config.seed,
            &self.fingerprint,
        )
    }

    pub fn run(&self, method: Method) -> Result<MethodRun> {
        let supervised = |o: SupervisedOutcome| MethodRun {
            method,
            selected: o.best_rouge.clone(),
            last: o.last.clone(),
            init: None,
            supervised: Some(o),
            distill: None,
        };
        Ok(match method {
            Method::Sft => supervised(self.sft()?),
            Method::Kd => supervised(self.word_kd()?),
            Method::SeqKd => supervised(self.seqkd()?),
            Method::MiniLlm => {
                let init = self.sft()?.best_loss;
                let out = self.minillm(&init, &self.config.distill)?;
                MethodRun {
                    method,
                    selected: out.best.clone(),
                    last: out.last.clone(),
                    init: Some(init),
                    supervised: None,
                    distill: Some(out),
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        let err = RunConfig::from_json(r#"{"distill": {"alpah": 0.1}}"#).unwrap_err();
        assert!(err.to_string().contains("alpah"), "{err}");
        assert!(RunConfig::from_json(r#"{"sedd": 1}"#).is_err());
        let c = RunConfig::from_json(r#"{"distill": {"alpha": 0.1}}"#).unwrap();
        assert_eq!(c.distill.alpha, 0.1);
        assert_eq!(c.task, TaskConfig::default());
    }

    #[test]
    fn default_config_round_trips() {
        let c = RunConfig::default();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn resolve_propagates_the_seed() {
        let c = RunConfig::default().resolve(Some(9));
        assert_eq!(
            (c.seed, c.distill.seed, c.sft.eval_seed, c.seqkd.eval_seed),
            (9, 9, 9, 9)
        );
    }

    #[test]
    fn validation_names_the_section() {
        let mut c = RunConfig::default();
        c.distill.alpha = 2.0;
        assert!(c.validate().unwrap_err().to_string().contains("distill"));
    }

    #[test]
    fn ablations_flip_one_switch_each() {
        let base = DistillConfig::default();
        let diffs: Vec<usize> = Ablation::ALL
            .iter()
            .map(|a| {
                let c = a.apply(&base);
                [
                    c.length_norm != base.length_norm,
                    c.alpha != base.alpha,
                    c.single_step_decomp != base.single_step_decomp,
                ]
                .iter()
                .filter(|&&d| d)
                .count()
            })
            .collect();
        assert_eq!(diffs, vec![0, 1, 1, 1]);
    }
}
