use std::path::PathBuf;
use std::process::ExitCode;

use cbplm::config::RunConfig;
use cbplm::intervene::{AttributionMethod, Direction};
use cbplm::{Error, Result};
use cbplm_cli::InterveneArgs;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cbplm", version, about = "Concept bottleneck protein language model pipeline")]
struct Cli {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted config override, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Out {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Ckpt {
    /// Checkpoint file (overrides paths.checkpoint).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a corpus with its concept table and normalization stats.
    Prepare {
        #[command(flatten)]
        out: Out,
        /// FASTA input (overrides data.fasta); synthetic corpus otherwise.
        #[arg(long)]
        fasta: Option<PathBuf>,
        /// TSV of extra concept annotations keyed by FASTA id.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Train a model on a prepared corpus.
    Train {
        #[command(flatten)]
        out: Out,
        /// Prepared corpus directory (overrides data.corpus).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Perplexity, intervention accuracy and correlations on the validation split.
    Eval {
        #[command(flatten)]
        out: Out,
        #[command(flatten)]
        ckpt: Ckpt,
        /// Prepared corpus directory; its validation split is evaluated.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Steer one sequence towards a concept value.
    Intervene {
        #[command(flatten)]
        ckpt: Ckpt,
        #[arg(long)]
        sequence: String,
        /// Concept name, e.g. `aromaticity`.
        #[arg(long)]
        concept: String,
        /// `+` or `-`.
        #[arg(long, default_value = "+", allow_hyphen_values = true)]
        direction: String,
        /// Target in normalized space (default 1 for `+`, 0 for `-`).
        #[arg(long)]
        target: Option<f64>,
        #[arg(long, default_value_t = 0.05)]
        mask_fraction: f64,
        #[arg(long, default_value_t = 1)]
        iterations: usize,
        #[arg(long, default_value = "grad_x_input_minus_mask")]
        attribution: String,
        /// Sample at this temperature instead of greedy decoding.
        #[arg(long)]
        temperature: Option<f64>,
        /// Clamp the concept at this multiple of its maximum activation.
        #[arg(long)]
        clamp: Option<f64>,
        /// Also write the result and config here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-residue attribution scores.
    Attribute {
        #[command(flatten)]
        ckpt: Ckpt,
        #[arg(long)]
        sequence: String,
        /// Single concept; all concepts when omitted.
        #[arg(long)]
        concept: Option<String>,
        #[arg(long, default_value = "grad_x_input_minus_mask")]
        method: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export effective decoder weights and the debugging report.
    Inspect {
        #[command(flatten)]
        out: Out,
        #[command(flatten)]
        ckpt: Ckpt,
        /// Corpus for per-concept validation MSE.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: String,
}

fn method(name: &str) -> Result<AttributionMethod> {
    AttributionMethod::from_name(name).ok_or_else(|| Error::Config(format!("unknown attribution method `{name}`")))
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut sets = cli.sets;
    let path_set = |key: &str, p: &Option<PathBuf>| p.as_ref().map(|p| format!("{key}={}", serde_json::Value::from(p.to_string_lossy().into_owned())));
    match &cli.command {
        Command::Prepare { fasta, annotations, .. } => sets.extend(path_set("data.fasta", fasta).into_iter().chain(path_set("data.annotations", annotations))),
        Command::Train { corpus, .. } => sets.extend(path_set("data.corpus", corpus)),
        Command::Eval { ckpt, corpus, .. } | Command::Inspect { ckpt, corpus, .. } => {
            sets.extend(path_set("paths.checkpoint", &ckpt.checkpoint).into_iter().chain(path_set("data.corpus", corpus)))
        }
        Command::Intervene { ckpt, .. } | Command::Attribute { ckpt, .. } => sets.extend(path_set("paths.checkpoint", &ckpt.checkpoint)),
    }
    let cfg = RunConfig::build(cli.config.as_deref(), &sets, cli.seed)?;
    match cli.command {
        Command::Prepare { out, .. } => print(&cbplm_cli::prepare(&cfg, &out.out)?),
        Command::Train { out, .. } => print(&cbplm_cli::train(&cfg, &out.out)?),
        Command::Eval { out, .. } => print(&cbplm_cli::eval(&cfg, &out.out)?),
        Command::Intervene { sequence, concept, direction, target, mask_fraction, iterations, attribution, temperature, clamp, out, .. } => {
            let args = InterveneArgs {
                sequence,
                concept,
                direction: Direction::parse(&direction).ok_or_else(|| Error::Config(format!("direction must be + or -, got `{direction}`")))?,
                target,
                mask_fraction,
                iterations,
                attribution: method(&attribution)?,
                temperature,
                clamp,
            };
            print(&cbplm_cli::intervene(&cfg, &args, out.as_deref())?)
        }
        Command::Attribute { sequence, concept, method: m, out, .. } => {
            print(&cbplm_cli::attribute(&cfg, &sequence, concept.as_deref(), method(&m)?, out.as_deref())?)
        }
        Command::Inspect { out, .. } => print(&cbplm_cli::inspect(&cfg, &out.out)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = ErrorRecord { error: e.kind(), message: e.to_string() };
            eprintln!("{}", serde_json::to_string(&record).unwrap_or_else(|_| e.to_string()));
            ExitCode::FAILURE
        }
    }
}
