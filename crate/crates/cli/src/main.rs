//! `crur` command-line interface.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crur_core::autodiff::Fault;
use crur_core::checkpoint::Checkpoint;
use crur_core::config::RunConfig;
use crur_core::corpus::{generate_corpus, load_corpus, write_corpus, CorpusConfig};
use crur_core::gradcheck::{run_suite, suite_config, SuiteOptions, TOLERANCE};
use crur_core::session::{decode_all, evaluate, evaluate_passthrough, Session};
use crur_core::tpr::{run_tpr_demo, TprDemoConfig};
use crur_core::CrurError;

/// Exit status for a failed verification (grad-check, TPR demo).
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(
    name = "crur",
    version,
    about = "Coupled recurrent captioning models on a synthetic corpus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus as train/val/test JSON Lines files.
    GenData(GenDataArgs),
    /// Train a model, writing a checkpoint after every epoch.
    Train(TrainArgs),
    /// Decode a split and print the metric report as JSON.
    Eval(EvalArgs),
    /// Caption a single sample.
    Caption(CaptionArgs),
    /// Bind, unbind and retrieve random sentences with Hadamard roles.
    TprDemo(TprDemoArgs),
    /// Compare backprop with finite differences for every component.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory with train.jsonl (and val.jsonl, test.jsonl).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Epoch log; defaults to the checkpoint path with a `.log` extension.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "passthrough")]
    ckpt: Option<PathBuf>,
    /// A JSON Lines split.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    /// Score each sample's first reference instead of decoding.
    #[arg(long)]
    passthrough: bool,
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A JSON Lines split holding the sample.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    sample_id: u64,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
}

#[derive(Args)]
struct TprDemoArgs {
    #[arg(long, default_value_t = 3)]
    k: u32,
    #[arg(long, default_value_t = 500)]
    vocab: usize,
    #[arg(long, default_value_t = 50)]
    dim: usize,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Model dimensions to check; small built-in dimensions otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Check at the all-zero parameter point.
    #[arg(long)]
    zero_params: bool,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

/// A failure with the exit status it maps to.
enum Failure {
    Error(CrurError),
    Verification(String),
}

impl From<CrurError> for Failure {
    fn from(e: CrurError) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

fn exit_code(e: &CrurError) -> u8 {
    match e {
        CrurError::Config { .. } | CrurError::Parameter(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Caption(a) => caption(a),
        Command::TprDemo(a) => tpr_demo(a),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(EXIT_VERIFY)
        }
    }
}

/// Applies `CRUR_SEED` on top of the configured seed.
fn seed_override(cfg: &mut RunConfig) -> Result<(), CrurError> {
    if let Ok(raw) = std::env::var("CRUR_SEED") {
        cfg.train.seed = raw.trim().parse().map_err(|_| CrurError::Config {
            msg: format!("CRUR_SEED must be an unsigned integer, got {raw:?}"),
            keys: vec!["seed".into()],
        })?;
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let corpus = generate_corpus(a.n, a.seed, &CorpusConfig::default())?;
    write_corpus(&a.out, &corpus)?;
    println!(
        "wrote {} train, {} val, {} test samples to {}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(&a.config)?;
    seed_override(&mut cfg)?;
    let train = load_corpus(&a.data.join("train.jsonl"))?;
    let mut session = match &a.resume {
        Some(path) => Session::resume(Checkpoint::load(path)?, &cfg, &train)?,
        None => Session::new(&cfg, &train)?,
    };
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log"));
    if a.resume.is_none() {
        std::fs::write(&log_path, "")?;
    }
    while let Some(stats) = session.next_epoch()? {
        append_line(&log_path, &stats.log_line())?;
        session.ckpt.save(&a.out)?;
        eprintln!("{}", stats.log_line());
    }
    while let Some(stats) = session.next_scst_step()? {
        eprintln!(
            "scst {}\tsampled {:.4}\tgreedy {:.4}",
            session.ckpt.scst_step, stats.sampled_reward, stats.greedy_reward
        );
    }
    session.ckpt.save(&a.out)?;
    Ok(())
}

fn append_line(path: &Path, line: &str) -> std::io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let samples = load_corpus(&a.data)?;
    let report = match (&a.ckpt, a.passthrough) {
        (_, true) => evaluate_passthrough(&samples)?,
        (Some(path), false) => evaluate(&Checkpoint::load(path)?, &samples, a.beam, a.max_len)?,
        (None, false) => unreachable!("clap requires --ckpt without --passthrough"),
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(CrurError::from)?
    );
    Ok(())
}

fn caption(a: CaptionArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let samples = load_corpus(&a.data)?;
    let sample = samples
        .into_iter()
        .find(|s| s.scene_id == a.sample_id)
        .ok_or_else(|| CrurError::Input(format!("no sample with id {}", a.sample_id)))?;
    let data = crur_core::training::encode_samples(
        std::slice::from_ref(&sample),
        &ckpt.vocab,
        ckpt.train.normalize_features,
    );
    let d = decode_all(&ckpt, &data, a.beam, a.max_len)?.remove(0);
    println!("{} <end>", d.words.join(" "));
    println!("log_prob {:.6}", d.log_prob);
    Ok(())
}

fn tpr_demo(a: TprDemoArgs) -> Result<(), Failure> {
    let report = run_tpr_demo(&TprDemoConfig {
        order: a.k,
        vocab: a.vocab,
        dim: a.dim,
        trials: a.trials,
        max_len: None,
        seed: a.seed,
    })?;
    for (trial, msg) in &report.capacity_failures {
        println!("trial {trial}: {msg}");
    }
    println!("accuracy {:.4}", report.accuracy());
    println!("max_unbind_error {:.3e}", report.max_unbind_error);
    println!("spectrum_max_error {:.3e}", report.spectrum_max_error);
    if report.correct != report.tokens || !report.capacity_failures.is_empty() {
        return Err(Failure::Verification(format!(
            "{} of {} tokens retrieved",
            report.correct, report.tokens
        )));
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<(), Failure> {
    let base = match &a.config {
        Some(path) => {
            let mut model = RunConfig::load(path)?.model;
            if model.vocab_size == 0 {
                model.vocab_size = suite_config().vocab_size;
            }
            model
        }
        None => suite_config(),
    };
    let opts = SuiteOptions {
        trials: a.trials,
        seed: a.seed,
        fault: if a.inject_fault {
            Fault::SigmoidGrad
        } else {
            Fault::None
        },
        zero_params: a.zero_params,
    };
    let reports = run_suite(&base, &opts)?;
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<16} {:.3e}  {status}  ({})",
            r.group, r.max_rel_error, r.worst_param
        );
        if !r.passed() {
            failed.push(r.group);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "relative error above {TOLERANCE:e} in {}",
            failed.join(", ")
        )))
    }
}
