use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hypirb_core::adversarial::{Controls, InitMode};
use hypirb_core::degradation::{gen_dataset, DatasetSpec};
use hypirb_core::harness::{self, DataFile, ExperimentConfig, HarnessError, PretrainKind};
use hypirb_core::metrics::{lemma_bound, predicted_steps, TheoryConstants};

#[derive(Parser)]
#[command(name = "hypirb", version, about = "Diffusion-initialized adversarial restoration at toy scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset synthesis.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train a pretrained asset: diffusion, mse, dae, ae or disc.
    Pretrain {
        kind: PretrainKind,
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint (default: <out_dir>/<kind>.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adversarial fine-tuning.
    Finetune(FinetuneArgs),
    /// Score a run checkpoint on its eval split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated subset of w2, tv, modes.
        #[arg(long, default_value = "w2,modes")]
        metrics: String,
    },
    /// Restore degraded samples with a trained generator.
    #[command(allow_negative_numbers = true)]
    Restore {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Observation noise scale.
        #[arg(long, default_value_t = 0.0)]
        rho: f64,
        /// Texture level in standardized units (conditioned models only).
        #[arg(long)]
        texture: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-form calculators.
    #[command(subcommand)]
    Theory(TheoryCommand),
    /// Summarize a directory of runs as CSV.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Write samples of a dataset spec to a JSON data file.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides train.steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides train.init_mode.
    #[arg(long, value_parser = parse_init_mode)]
    init_mode: Option<InitMode>,
    /// Overrides out_dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue from a run checkpoint of the same experiment.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Record wall-clock milliseconds in metrics (logs are then no longer reproducible byte for byte).
    #[arg(long)]
    timed: bool,
}

#[derive(Subcommand)]
enum TheoryCommand {
    /// Iterations for the loss gap to reach the target.
    #[command(allow_negative_numbers = true)]
    PredictSteps {
        #[arg(long = "L")]
        l: f64,
        #[arg(long)]
        mu: f64,
        /// Step size (default 1/L).
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        eps0: f64,
        #[arg(long)]
        dtar: f64,
        #[arg(long)]
        c2: f64,
    },
    /// Initial gradient bound √2·L_J·ε0.
    #[command(allow_negative_numbers = true)]
    LemmaBound {
        #[arg(long)]
        lj: f64,
        #[arg(long)]
        eps0: f64,
    },
}

fn parse_init_mode(s: &str) -> Result<InitMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("`{s}` is not one of diffusion, mse, dae, scratch"))
}

fn invalid(msg: impl ToString) -> HarnessError {
    HarnessError::Config(vec![msg.to_string()])
}

fn data_gen(spec: &Path, n: usize, seed: u64, out: &Path) -> Result<(), HarnessError> {
    let text = std::fs::read_to_string(spec).map_err(|e| HarnessError::Io { path: spec.into(), source: e })?;
    let spec: DatasetSpec = serde_json::from_str(&text).map_err(|e| invalid(format!("spec: {e}")))?;
    spec.validate().map_err(|e| invalid(format!("spec: {e}")))?;
    if n == 0 {
        return Err(invalid("n: must be at least 1"));
    }
    let ds = gen_dataset::<f64>(&spec, n, seed)?;
    let mut file = DataFile::from_tensor(&ds.x);
    file.labels = ds.labels;
    file.richness = ds.richness;
    harness::write_data_file(out, &file)
}

fn finetune(a: FinetuneArgs) -> Result<(), HarnessError> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(m) = a.init_mode {
        cfg.train.init_mode = m;
    }
    if let Some(d) = a.out_dir {
        cfg.out_dir = d;
    }
    cfg.validate()?;
    let path = harness::finetune(&cfg, a.resume.as_deref(), a.timed)?;
    println!("{}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Data(DataCommand::Gen { spec, n, seed, out }) => data_gen(&spec, n, seed, &out),
        Command::Pretrain { kind, config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            for p in harness::pretrain(&cfg, kind, out.as_deref())? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Finetune(a) => finetune(a),
        Command::Eval { checkpoint, metrics } => {
            let wanted: Vec<&str> = metrics.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            let report = harness::evaluate_checkpoint(&checkpoint, &wanted)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            Ok(())
        }
        Command::Restore { checkpoint, input, rho, texture, seed, out } => {
            if !(rho >= 0.0) {
                return Err(invalid(format!("rho: {rho} must be non-negative")));
            }
            harness::restore_file(&checkpoint, &input, &out, Controls { rho, texture, seed })
        }
        Command::Theory(TheoryCommand::PredictSteps { l, mu, eta, eps0, dtar, c2 }) => {
            let tc = TheoryConstants { l, mu, eta: eta.unwrap_or(1.0 / l), eps0, delta_tar: dtar, c2, l_j: 0.0 };
            let steps = predicted_steps(&tc).map_err(invalid)?;
            println!("{steps:.4e}");
            Ok(())
        }
        Command::Theory(TheoryCommand::LemmaBound { lj, eps0 }) => {
            println!("{:e}", lemma_bound(lj, eps0).map_err(invalid)?);
            Ok(())
        }
        Command::Report { runs, out } => {
            let report = harness::report(&runs)?;
            for p in &report.problems {
                eprintln!("skipped {p}");
            }
            std::fs::write(&out, &report.csv).map_err(|e| HarnessError::Io { path: out.clone(), source: e })?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
