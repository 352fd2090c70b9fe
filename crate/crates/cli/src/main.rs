use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use discwsod::commands::{self, Command, Overrides};
use discwsod::config::RunConfig;
use discwsod::verify::VerifyOptions;

/// Weakly supervised detection with a dissimilarity coefficient on synthetic
/// scenes.
///
/// Exit status: 0 success, 1 usage/contract/config error, 2 verification
/// failure.
#[derive(Debug, Parser)]
#[command(name = "discwsod", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides both scene.seed and train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    eval_dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Outer coordinate-descent rounds.
    #[arg(long, global = true)]
    rounds: Option<usize>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Conditional samples per image.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    epsilon: Option<f64>,
    /// Evaluation threshold for `eval`, sample post-processing otherwise.
    #[arg(long, global = true)]
    score_threshold: Option<f64>,
    /// Evaluation NMS for `eval`, sample post-processing otherwise.
    #[arg(long, global = true)]
    nms_iou: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate the training and evaluation datasets.
    GenData,
    /// Train both heads on --dataset; --checkpoint resumes.
    Train,
    /// Score --checkpoint on --dataset.
    Eval,
    /// Variant ablation and sweeps; trains on --dataset, scores on --eval-dataset.
    Ablate,
    /// Run the oracle suites.
    Verify {
        /// Negate analytic gradients so the gradient checks must fail.
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
}

enum Failure {
    Usage(String),
    Verification(String),
}

impl From<discwsod::Error> for Failure {
    fn from(e: discwsod::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    v.as_deref().ok_or_else(|| Failure::Usage(format!("--{flag} is required")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let c = &cli.common;
    let command = match cli.command {
        Cmd::GenData => Command::GenData,
        Cmd::Train => Command::Train,
        Cmd::Eval => Command::Eval,
        Cmd::Ablate => Command::Ablate,
        Cmd::Verify { .. } => Command::Verify,
    };
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Overrides {
        seed: c.seed,
        rounds: c.rounds,
        lambda: c.lambda,
        gamma: c.gamma,
        k: c.k,
        epsilon: c.epsilon,
        score_threshold: c.score_threshold,
        nms_iou: c.nms_iou,
    }
    .apply(&mut cfg, command)?;
    let out = required(&c.out, "out")?;

    match cli.command {
        Cmd::GenData => {
            let m = commands::gen_data(&cfg, out)?;
            println!("wrote {} to {} (config {})", m.artifacts.join(", "), out.display(), m.config_hash);
        }
        Cmd::Train => {
            commands::train(&cfg, required(&c.dataset, "dataset")?, c.checkpoint.as_deref(), out)?;
            print!("{}", std::fs::read_to_string(out.join(commands::METRICS)).map_err(discwsod::Error::from)?);
        }
        Cmd::Eval => {
            let (_, report) =
                commands::eval(&cfg, required(&c.checkpoint, "checkpoint")?, required(&c.dataset, "dataset")?, out)?;
            print!("{}", report.to_csv());
        }
        Cmd::Ablate => {
            let (_, ordered) = commands::ablate(
                &cfg,
                required(&c.dataset, "dataset")?,
                required(&c.eval_dataset, "eval-dataset")?,
                out,
            )?;
            print!("{}", std::fs::read_to_string(out.join("ablation_summary.csv")).map_err(discwsod::Error::from)?);
            if !ordered {
                eprintln!("warning: variant ordering violated; see ablation_ordering.csv");
            }
        }
        Cmd::Verify { inject_sign_flip } => {
            let opts = VerifyOptions {
                seed: cfg.train.seed,
                flip_gradient_sign: inject_sign_flip,
                ..VerifyOptions::default()
            };
            let (_, results) = commands::verify(&cfg, &opts, out)?;
            print!("{}", discwsod::verify::report_csv(&results));
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
            if !failed.is_empty() {
                return Err(Failure::Verification(format!("failed checks: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(2)
        }
    }
}
