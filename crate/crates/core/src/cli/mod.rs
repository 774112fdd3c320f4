//! The `kdlab` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error. Every command that produces artifacts writes them into a fresh run
//! directory together with `manifest.json` and the resolved `config.json`.

mod run_dir;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand_chacha::ChaCha8Rng;

pub use run_dir::{allocate, RunDir, RunManifest, CONFIG_SNAPSHOT_FILE, MANIFEST_FILE};

use crate::error::Error;
use crate::experiment::{Ablation, Method, Prepared, RunConfig};
use crate::io::to_jsonl;
use crate::metrics::{
    exposure_bias_curve, exposure_bias_curve_exact, ExposureBiasCurve, MetricReport,
};
use crate::toy::{density_csv, run_toy};
use crate::trainer::{evaluate, stream, Checkpoint, DistillOutcome, Stream, SupervisedOutcome};
use crate::verify::{all_passed, run_suite, Suite, VerifyConfig};
use crate::TabularLM;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "kdlab",
    version,
    about = "Reverse-KL distillation experiments on tabular language models"
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run gradient and estimator property suites on random instances.
    Verify {
        /// oracles, gradients, decomposition, importance or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student with one method and evaluate it.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        /// sft, kd, seqkd, minillm, or ablations (four MiniLLM variants).
        #[arg(long)]
        method: String,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exposure-bias curves of saved checkpoints against the task teacher.
    ExposureBias {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint or bare model file; repeat for several.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one Gaussian to a mixture under forward and reverse KL.
    ToyGaussian {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration document.
    DefaultConfig,
}

/// A command failure and the exit code it maps to.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return EXIT_USAGE;
        }
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let argv: Vec<String> = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let res = match cli.command {
        Command::Verify { suite, seed, out } => cmd_verify(&suite, seed, &out, argv),
        Command::Distill {
            config,
            method,
            seed,
            out,
        } => cmd_distill(config.as_deref(), &method, seed, &out, argv),
        Command::ExposureBias {
            config,
            seed,
            checkpoints,
            out,
        } => cmd_exposure_bias(config.as_deref(), seed, &checkpoints, &out, argv),
        Command::ToyGaussian { config, out } => cmd_toy_gaussian(config.as_deref(), &out, argv),
        Command::DefaultConfig => serde_json::to_string_pretty(&RunConfig::default())
            .map(|s| println!("{s}"))
            .map_err(runtime),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Runtime(m) => eprintln!("run failed: {m}"),
            }
            f.code()
        }
    }
}

/// Reads and validates the configuration; defaults when no path is given.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> crate::Result<RunConfig> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::from_json(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    let cfg = cfg.resolve(seed);
    cfg.validate()?;
    Ok(cfg)
}

/// Runs `body` inside a fresh run directory and records its exit status.
fn in_run_dir(
    out: &Path,
    command: &str,
    argv: Vec<String>,
    config_path: Option<&Path>,
    config: &impl serde::Serialize,
    seed: u64,
    body: impl FnOnce(&RunDir) -> CmdResult,
) -> CmdResult {
    let dir = RunDir::create(out, command, argv, config_path, config, seed).map_err(runtime)?;
    let res = body(&dir);
    let code = res.as_ref().err().map_or(EXIT_OK, Failure::code);
    let path = dir.path.clone();
    dir.finish(code).map_err(runtime)?;
    eprintln!("run directory: {}", path.display());
    res
}

fn cmd_verify(suite: &str, seed: u64, out: &Path, argv: Vec<String>) -> CmdResult {
    let suite: Suite = suite.parse().map_err(usage)?;
    let cfg = VerifyConfig::default();
    let snapshot = serde_json::json!({ "suite": suite, "seed": seed, "verify": cfg });
    in_run_dir(out, "verify", argv, None, &snapshot, seed, |dir| {
        let records = run_suite(suite, seed, &cfg).map_err(runtime)?;
        dir.write("report.jsonl", &to_jsonl(&records).map_err(runtime)?)
            .map_err(runtime)?;
        let failed: Vec<_> = records.iter().filter(|r| !r.passed).collect();
        println!("{} checks, {} failed", records.len(), failed.len());
        for r in &failed {
            println!(
                "FAIL {}/{} instance {}: error {:e} tolerance {:?}",
                r.suite, r.check, r.instance, r.error, r.tolerance
            );
        }
        if all_passed(&records) {
            Ok(())
        } else {
            Err(runtime(format!("{} hard checks failed", failed.len())))
        }
    })
}

fn save(dir: &RunDir, name: &str, ck: &Checkpoint) -> CmdResult {
    ck.save(&dir.file(name)).map_err(runtime)
}

fn metrics_csv(report: &MetricReport) -> String {
    format!("{}\n{}", MetricReport::CSV_HEADER, report.to_csv_rows())
}

fn write_supervised(dir: &RunDir, out: &SupervisedOutcome) -> CmdResult {
    save(dir, "best.json", &out.best_rouge)?;
    save(dir, "best_loss.json", &out.best_loss)?;
    save(dir, "last.json", &out.last)?;
    dir.write("trace.jsonl", &to_jsonl(&out.history).map_err(runtime)?)
        .map_err(runtime)
}

fn write_distill(dir: &RunDir, prefix: &str, out: &DistillOutcome) -> CmdResult {
    save(dir, &format!("{prefix}best.json"), &out.best)?;
    save(dir, &format!("{prefix}last.json"), &out.last)?;
    dir.write(
        &format!("{prefix}trace.jsonl"),
        &to_jsonl(&out.trace).map_err(runtime)?,
    )
    .map_err(runtime)
}

fn evaluate_to(
    dir: &RunDir,
    name: &str,
    model: &TabularLM,
    p: &Prepared,
) -> Result<MetricReport, Failure> {
    let c = &p.config;
    let report =
        evaluate(model, &p.teacher, &p.task, &c.eval, c.seed, &p.fingerprint).map_err(runtime)?;
    dir.write(name, &metrics_csv(&report)).map_err(runtime)?;
    Ok(report)
}

/// Keeps the last finite parameters of an aborted run on disk.
fn aborted(dir: &RunDir, e: Error, fp: &str) -> Failure {
    if let Error::TrainingAborted {
        step, last_good, ..
    } = &e
    {
        let ck = Checkpoint::new((**last_good).clone(), *step, fp);
        if let Err(save_err) = ck.save(&dir.file("last_good.json")) {
            return runtime(format!(
                "{e}; saving last good parameters failed: {save_err}"
            ));
        }
    }
    runtime(e)
}

fn parse_method(s: &str) -> Result<Option<Method>, Failure> {
    Ok(Some(match s {
        "sft" => Method::Sft,
        "kd" => Method::Kd,
        "seqkd" => Method::SeqKd,
        "minillm" => Method::MiniLlm,
        "ablations" => return Ok(None),
        _ => {
            return Err(usage(format!(
                "unknown method {s:?}, expected sft, kd, seqkd, minillm or ablations"
            )))
        }
    }))
}

fn cmd_distill(
    config: Option<&Path>,
    method: &str,
    seed: Option<u64>,
    out: &Path,
    argv: Vec<String>,
) -> CmdResult {
    let method = parse_method(method)?;
    let cfg = load_config(config, seed).map_err(usage)?;
    let name = method.map_or("ablations", Method::name);
    in_run_dir(
        out,
        &format!("distill {name}"),
        argv,
        config,
        &cfg,
        cfg.seed,
        |dir| {
            let p = crate::experiment::prepare(&cfg).map_err(runtime)?;
            save(
                dir,
                "teacher.json",
                &Checkpoint::new(p.teacher.clone(), 0, &p.fingerprint),
            )?;
            let fp = p.fingerprint.clone();
            match method {
                Some(m) => {
                    let run = p.run(m).map_err(|e| aborted(dir, e, &fp))?;
                    if let Some(o) = &run.supervised {
                        write_supervised(dir, o)?;
                    }
                    if let Some(o) = &run.distill {
                        save(
                            dir,
                            "init.json",
                            run.init.as_ref().expect("minillm has an init"),
                        )?;
                        write_distill(dir, "", o)?;
                    }
                    let report = evaluate_to(dir, "metrics.csv", &run.selected.model, &p)?;
                    evaluate_to(dir, "metrics_last.csv", &run.last.model, &p)?;
                    println!("{name}: selected step {}", run.selected.step);
                    for (k, v) in &report.metrics {
                        println!(
                            "  {k} = {}",
                            v.map_or("undefined".into(), |v| format!("{v:.6}"))
                        );
                    }
                    Ok(())
                }
                None => run_ablations(dir, &p),
            }
        },
    )
}

pub const ABLATION_CSV_HEADER: &str =
    "variant,final_valid_rouge_l,best_valid_rouge_l,best_step,rev_kld_teacher_nats,fwd_kld_teacher_nats,rouge_l_test";

fn run_ablations(dir: &RunDir, p: &Prepared) -> CmdResult {
    let fp = p.fingerprint.clone();
    let init = p.sft().map_err(|e| aborted(dir, e, &fp))?.best_loss;
    save(dir, "init.json", &init)?;
    let mut csv = format!("{ABLATION_CSV_HEADER}\n");
    for a in Ablation::ALL {
        let out = p
            .minillm(&init, &a.apply(&p.config.distill))
            .map_err(|e| aborted(dir, e, &fp))?;
        let prefix = format!("{}_", a.name());
        write_distill(dir, &prefix, &out)?;
        let report = evaluate_to(
            dir,
            &format!("{prefix}metrics_last.csv"),
            &out.last.model,
            p,
        )?;
        let final_rouge = out.trace.last().and_then(|r| r.valid_rouge);
        let best_rouge = out
            .trace
            .iter()
            .skip(1)
            .filter_map(|r| r.valid_rouge)
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
        let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            a.name(),
            opt(final_rouge),
            opt(best_rouge),
            out.best.step,
            opt(report.get("rev_kld_teacher_nats")),
            opt(report.get("fwd_kld_teacher_nats")),
            opt(report.get("rouge_l_test")),
        ));
        println!("{:16} final valid Rouge-L {}", a.name(), opt(final_rouge));
    }
    dir.write("ablations.csv", &csv).map_err(runtime)
}

fn exposure_curve(model: &TabularLM, p: &Prepared) -> crate::Result<ExposureBiasCurve> {
    let e = &p.config.eval;
    if e.exposure_exact {
        exposure_bias_curve_exact(model, &p.teacher, &p.task.prompts, e.exposure_max_l)
    } else {
        // every checkpoint sees the same prefix stream
        let mut rng: ChaCha8Rng = stream(p.config.seed, Stream::Eval);
        exposure_bias_curve(
            model,
            &p.teacher,
            &p.task.prompts,
            e.exposure_max_l,
            e.exposure_rollouts,
            &mut rng,
        )
    }
}

pub const EXPOSURE_SUMMARY_HEADER: &str = "checkpoint,l,regret,step_error,exaccerr_pct";

fn cmd_exposure_bias(
    config: Option<&Path>,
    seed: Option<u64>,
    checkpoints: &[PathBuf],
    out: &Path,
    argv: Vec<String>,
) -> CmdResult {
    let cfg = load_config(config, seed).map_err(usage)?;
    let p = crate::experiment::prepare(&cfg).map_err(runtime)?;
    let mut models = Vec::new();
    for path in checkpoints {
        let ck = Checkpoint::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        p.teacher
            .check_vocab(&ck.model)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        models.push((path, ck.model));
    }
    in_run_dir(out, "exposure-bias", argv, config, &cfg, cfg.seed, |dir| {
        let mut summary = format!("{EXPOSURE_SUMMARY_HEADER}\n");
        for (i, (path, model)) in models.iter().enumerate() {
            let curve = exposure_curve(model, &p).map_err(runtime)?;
            let stem = path
                .file_stem()
                .map_or("model".into(), |s| s.to_string_lossy().into_owned());
            dir.write(&format!("exposure_{i}_{stem}.csv"), &curve.to_csv())
                .map_err(runtime)?;
            if curve.all_undefined() {
                eprintln!(
                    "warning: {} matches the teacher on every prefix; ExAccErr is undefined",
                    path.display()
                );
            }
            let l = cfg.eval.exposure_max_l;
            if let Some((r, eps, ex)) = curve.at(l) {
                let ex = ex.map(|v| format!("{v:?}")).unwrap_or_default();
                summary.push_str(&format!("{},{l},{r:?},{eps:?},{ex}\n", path.display()));
                println!(
                    "{}: ExAccErr({l}) = {}",
                    path.display(),
                    if ex.is_empty() { "undefined" } else { &ex }
                );
            }
        }
        dir.write("exposure_summary.csv", &summary).map_err(runtime)
    })
}

fn cmd_toy_gaussian(config: Option<&Path>, out: &Path, argv: Vec<String>) -> CmdResult {
    let cfg = load_config(config, None).map_err(usage)?;
    let toy = cfg.toy.clone();
    in_run_dir(out, "toy-gaussian", argv, config, &toy, cfg.seed, |dir| {
        let res = run_toy(&toy).map_err(runtime)?;
        dir.write("densities.csv", &density_csv(&res, &toy.grid))
            .map_err(runtime)?;
        dir.write(
            "fit.json",
            &serde_json::to_string_pretty(&res).map_err(runtime)?,
        )
        .map_err(runtime)?;
        println!(
            "forward fit: mu {:.6} sigma {:.6}",
            res.forward.fit.mu, res.forward.fit.sigma
        );
        println!(
            "reverse fit: mu {:.6} sigma {:.6}",
            res.reverse.fit.mu, res.reverse.fit.sigma
        );
        Ok(())
    })
}
