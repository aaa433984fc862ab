//! File formats, configuration and subcommands of the `capcore` tool.

pub mod bytes;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod features;
pub mod manifest;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use toml::Value;

use config::{Decoding, Override};
use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "capcore", version, about = "Video captioning: features, training, generation and metrics")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Only report errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Extract per-frame features for every video in a manifest.
    Extract(ExtractArgs),
    /// Split a manifest into train and test manifests by video.
    Split(SplitArgs),
    /// Train a captioning model.
    Train(TrainArgs),
    /// Caption every video in a manifest.
    Generate(GenerateArgs),
    /// Score captions against reference captions.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Continue past records that fail.
    #[arg(long)]
    pub keep_going: bool,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub frames_per_video: Option<usize>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Fraction of videos held out for testing.
    #[arg(long)]
    pub fraction: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Wide,
    Half,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Continue from the newest checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Discard existing checkpoints and start over.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Micro-batches per update, or `off` for one.
    #[arg(long, value_name = "N|off")]
    pub accumulation: Option<String>,
    #[arg(long)]
    pub keep_last: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Train the text-only baseline.
    #[arg(long)]
    pub no_visual: bool,
    #[arg(long)]
    pub no_loss_scaling: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Greedy,
    Beam,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// `video_id TAB caption` file.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// Manifest holding the reference captions.
    #[arg(long)]
    pub references: Option<PathBuf>,
    /// Also write per-metric series for plotting.
    #[arg(long)]
    pub plot_data: bool,
    /// Print `key=value` lines.
    #[arg(long)]
    pub machine: bool,
    #[arg(long)]
    pub smoothing: bool,
    #[arg(long)]
    pub no_stemming: bool,
    #[arg(long)]
    pub rouge_beta: Option<f64>,
}

fn path_value(p: &std::path::Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn int(n: usize) -> Value {
    Value::Integer(n as i64)
}

/// Flag values as configuration overrides.
pub fn flag_overrides(cli: &Cli) -> CliResult<Vec<Override>> {
    let mut o: Vec<Override> = Vec::new();
    let mut put = |k: &str, v: Value| o.push((k.to_string(), v));
    if let Some(s) = cli.seed {
        put("seed", Value::Integer(i64::try_from(s).map_err(|_| CliError::Usage("seed too large".into()))?));
    }
    if let Some(p) = &cli.out {
        put("out", path_value(p));
    }
    match &cli.command {
        Command::Extract(a) => {
            if let Some(p) = &a.manifest {
                put("data.manifest", path_value(p));
            }
            if let Some(n) = a.frames_per_video {
                put("extract.frames_per_video", int(n));
            }
            if let Some(n) = a.input_size {
                put("extract.input_size", int(n));
            }
            if let Some(n) = a.feature_dim {
                put("extract.feature_dim", int(n));
            }
            if let Some(n) = a.threads {
                put("extract.threads", int(n));
            }
        }
        Command::Split(a) => {
            if let Some(p) = &a.manifest {
                put("data.manifest", path_value(p));
            }
            if let Some(f) = a.fraction {
                put("data.test_fraction", Value::Float(f));
            }
        }
        Command::Train(a) => {
            if let Some(p) = &a.manifest {
                put("data.manifest", path_value(p));
            }
            if let Some(n) = a.epochs {
                put("train.epochs", int(n));
            }
            if let Some(x) = a.learning_rate {
                put("train.learning_rate", Value::Float(x));
            }
            if let Some(n) = a.batch_size {
                put("train.batch_size", int(n));
            }
            if let Some(n) = a.heads {
                put("model.n_heads", int(n));
            }
            if let Some(acc) = &a.accumulation {
                let k = match acc.as_str() {
                    "off" => 1,
                    s => s
                        .parse()
                        .map_err(|_| CliError::Usage(format!("--accumulation expects a count or off, got {s:?}")))?,
                };
                put("train.accumulation_steps", int(k));
            }
            if let Some(n) = a.keep_last {
                put("train.keep_last", int(n));
            }
            if let Some(p) = a.precision {
                let v = match p {
                    PrecisionArg::Wide => "wide",
                    PrecisionArg::Half => "half",
                };
                put("train.precision", Value::String(v.into()));
            }
            if a.no_visual {
                put("model.use_visual_features", Value::Boolean(false));
            }
            if a.no_loss_scaling {
                put("train.loss_scaling", Value::Boolean(false));
            }
        }
        Command::Generate(a) => {
            if let Some(p) = &a.checkpoint {
                put("generate.checkpoint", path_value(p));
            }
            if let Some(p) = &a.manifest {
                put("data.manifest", path_value(p));
            }
            if let Some(s) = a.strategy {
                let v = match s {
                    StrategyArg::Greedy => Decoding::Greedy,
                    StrategyArg::Beam => Decoding::Beam,
                };
                put("generate.strategy", Value::try_from(v).expect("enum serializes"));
            }
            if let Some(n) = a.beam_width {
                put("generate.beam_width", int(n));
            }
            if let Some(n) = a.max_len {
                put("generate.max_len", int(n));
            }
        }
        Command::Evaluate(a) => {
            if let Some(p) = &a.captions {
                put("data.captions", path_value(p));
            }
            if let Some(p) = &a.references {
                put("data.references", path_value(p));
            }
            if a.smoothing {
                put("metrics.bleu_smoothing", Value::Boolean(true));
            }
            if a.no_stemming {
                put("metrics.stemming", Value::Boolean(false));
            }
            if let Some(b) = a.rouge_beta {
                put("metrics.rouge_beta", Value::Float(b));
            }
        }
    }
    Ok(o)
}

fn execute(cli: &Cli) -> CliResult<()> {
    let env = config::env_overrides(std::env::vars());
    let cfg = config::resolve(cli.config.as_deref(), env, flag_overrides(cli)?)?;
    match &cli.command {
        Command::Extract(a) => {
            commands::echo_config(&cfg, "extract")?;
            commands::extract(&cfg, a.keep_going, a.force)
        }
        Command::Split(_) => {
            commands::echo_config(&cfg, "split")?;
            commands::split_cmd(&cfg)
        }
        Command::Train(a) => {
            commands::echo_config(&cfg, "train")?;
            commands::train(&cfg, a.resume, a.force).map(|_| ())
        }
        Command::Generate(_) => {
            commands::echo_config(&cfg, "generate")?;
            commands::generate_cmd(&cfg)
        }
        Command::Evaluate(a) => {
            commands::echo_config(&cfg, "evaluate")?;
            commands::evaluate(&cfg, a.machine, a.plot_data).map(|_| ())
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code:
/// 0 success, 1 usage or configuration error, 2 data error, 3 numeric failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = if cli.quiet { log::LevelFilter::Error } else { log::LevelFilter::Info };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}
