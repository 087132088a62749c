use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use prefixprop::calibration::{collect_predictions, ece, DEFAULT_BINS};
use prefixprop::experiment::{
    bench_inference, render_summary, run_dir, run_experiment, verify_kernel, ExperimentConfig, Summary, SEED_ENV,
};
use prefixprop::model::{EncoderModel, TuningMode};
use prefixprop::tasks::Split;
use prefixprop::training::evaluate;
use prefixprop::Error;

#[derive(Parser)]
#[command(name = "prefixprop", version, about = "Prefix-propagation and prefix-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key.path=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured mode and seed and write result files.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        outdir: Option<PathBuf>,
        /// Comma-separated seeds; falls back to the config, then $PREFIXPROP_SEED.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Comma-separated tuning modes.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<TuningMode>,
    },
    /// Evaluate a saved checkpoint on one split of the configured task.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Also write the reliability table here.
        #[arg(long)]
        reliability: Option<PathBuf>,
    },
    /// Check the kernel decomposition against dense attention.
    VerifyKernel {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Time inference for the standard, prefix-tuning and propagation modes.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 256)]
        seq_len: usize,
        #[arg(long, default_value_t = 8)]
        inputs: usize,
        #[arg(long, default_value_t = 7)]
        repeats: usize,
    },
    /// Print the summary table of a finished run, or one reliability table.
    Report {
        #[arg(long)]
        outdir: PathBuf,
        /// Print `<outdir>/<mode>/<seed>/reliability.csv` instead.
        #[arg(long, requires = "seed")]
        mode: Option<TuningMode>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export a split of the configured task as JSON Lines.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Error(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

fn env_seed() -> Result<Option<u64>, Error> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}: {v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Loads the config. The seed environment variable fills in seeds only when
/// neither the file nor an override sets them.
fn load_config(args: &ConfigArgs, extra: Vec<String>) -> Result<ExperimentConfig, Error> {
    let text = match &args.config {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut overrides = Vec::new();
    let file_has_seeds = !text.trim().is_empty()
        && serde_json::from_str::<serde_json::Value>(&text).is_ok_and(|v| v.get("seeds").is_some());
    let set_has_seeds = args.overrides.iter().chain(&extra).any(|o| o.starts_with("seeds="));
    if !file_has_seeds && !set_has_seeds {
        if let Some(seed) = env_seed()? {
            overrides.push(format!("seeds=[{seed}]"));
        }
    }
    overrides.extend(args.overrides.iter().cloned());
    overrides.extend(extra);
    ExperimentConfig::from_json(&text, &overrides)
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, Error> {
    Ok(serde_json::to_string_pretty(v).map_err(Error::from)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { cfg, outdir, seeds, modes } => {
            let mut extra = Vec::new();
            if let Some(o) = outdir {
                extra.push(format!("outdir={}", serde_json::Value::String(o.display().to_string())));
            }
            if !seeds.is_empty() {
                extra.push(format!("seeds={seeds:?}"));
            }
            if !modes.is_empty() {
                let names: Vec<&str> = modes.iter().map(|m| m.name()).collect();
                extra.push(format!("modes={}", serde_json::to_string(&names).map_err(Error::from)?));
            }
            let config = load_config(&cfg, extra)?;
            let summary = run_experiment(&config)?;
            print!("{}", render_summary(&summary));
        }
        Command::Eval {
            cfg,
            checkpoint,
            split,
            reliability,
        } => {
            let config = load_config(&cfg, Vec::new())?;
            let model = EncoderModel::load(&checkpoint)?;
            let data = config
                .task
                .split(split.into(), model.config.vocab_size, model.config.max_len)?;
            let metrics = evaluate(&model, &data)?;
            if let Some(path) = reliability {
                let report = ece(&collect_predictions(&model, &data)?, DEFAULT_BINS)?;
                fs::write(path, report.reliability_csv())?;
            }
            println!("{}", to_json(&metrics)?);
        }
        Command::VerifyKernel { trials, seed, tol } => {
            let seed = match seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(0),
            };
            if !(tol >= 0.0) {
                return Err(Error::Config(format!("tol {tol} must be non-negative")).into());
            }
            let report = verify_kernel(trials, seed, tol)?;
            println!("{}", to_json(&report)?);
            if !report.passed {
                return Err(Failure::Verification(format!(
                    "max error {:e} not below tolerance {:e}",
                    report.max_error, tol
                )));
            }
        }
        Command::Bench {
            cfg,
            seq_len,
            inputs,
            repeats,
        } => {
            let config = load_config(&cfg, Vec::new())?;
            let seed = env_seed()?.unwrap_or(0);
            let report = bench_inference(&config.model, seq_len, inputs, repeats, seed)?;
            println!("{}", to_json(&report)?);
        }
        Command::Report { outdir, mode, seed } => {
            if let (Some(mode), Some(seed)) = (mode, seed) {
                print!("{}", fs::read_to_string(run_dir(&outdir, mode, seed).join("reliability.csv"))?);
            } else {
                let text = fs::read_to_string(outdir.join("summary.json"))?;
                let summary: Summary = serde_json::from_str(&text).map_err(Error::from)?;
                print!("{}", render_summary(&summary));
            }
        }
        Command::GenData { cfg, split, out } => {
            let config = load_config(&cfg, Vec::new())?;
            let data = config
                .task
                .split(split.into(), config.model.vocab_size, config.model.max_len)?;
            match out {
                Some(path) => data.write_jsonl(std::io::BufWriter::new(fs::File::create(path)?))?,
                None => data.write_jsonl(std::io::stdout().lock())?,
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
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Divergence { .. } => 3,
                _ => 1,
            })
        }
    }
}
