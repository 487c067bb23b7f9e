//! Command-line front end: dataset generation, training, evaluation,
//! ablation and map export. `run` is the whole program; `main` only
//! forwards the process arguments and exit code.

pub mod config;
pub mod manifest;

mod commands;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use subdepth_core::train::ObjectiveMode;

pub use config::RunConfig;
pub use manifest::RunManifest;

/// Bad invocation: reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "subdepth", version, about = "Self-supervised depth training on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file, or a run_manifest.json to repeat a run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any config key, e.g. `--set train.lr_initial=3e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

fn parse_mode(s: &str) -> Result<ObjectiveMode, String> {
    s.parse().map_err(|e: subdepth_core::Error| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        triplets: Option<usize>,
        #[arg(long)]
        eval_triplets: Option<usize>,
        #[arg(long, value_parser = config::parse_resolution, value_name = "WxH")]
        resolution: Option<(usize, usize)>,
    },
    /// Photometric pretraining of the teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train a student against a frozen teacher.
    TrainSubdepth {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        teacher_ckpt: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        objective_mode: Option<ObjectiveMode>,
    },
    /// Median-scaled metrics of a checkpoint on the eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Every objective mode over several seeds with one shared teacher.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        teacher_ckpt: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
        modes: Option<Vec<ObjectiveMode>>,
    },
    /// Write depth, error and uncertainty images for eval triplets.
    ExportMaps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Export the first N triplets.
        #[arg(long, conflicts_with = "hardest")]
        limit: Option<usize>,
        /// Export the N triplets with the largest abs_rel.
        #[arg(long)]
        hardest: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::TrainSubdepth { .. } => "train-subdepth",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::ExportMaps { .. } => "export-maps",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::TrainTeacher { common, .. }
            | Command::TrainSubdepth { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common, .. }
            | Command::ExportMaps { common, .. } => common,
        }
    }

    /// Config overrides implied by dedicated flags.
    fn flag_overrides(&self) -> Vec<(Vec<String>, Value)> {
        let mut out = Vec::new();
        let mut put = |path: &str, v: Value| out.push((path.split('.').map(str::to_string).collect(), v));
        if let Some(s) = self.common().seed {
            put("seed", json!(s));
        }
        let train = match self {
            Command::TrainTeacher { train, .. } | Command::TrainSubdepth { train, .. } | Command::Ablate { train, .. } => {
                Some(train)
            }
            _ => None,
        };
        if let Some(t) = train {
            if let Some(e) = t.epochs {
                put("train.epochs", json!(e));
            }
            if let Some(b) = t.batch_size {
                put("train.batch_size", json!(b));
            }
        }
        match self {
            Command::GenData {
                triplets,
                eval_triplets,
                resolution,
                ..
            } => {
                if let Some(n) = triplets {
                    put("data.triplets", json!(n));
                }
                if let Some(n) = eval_triplets {
                    put("data.eval_triplets", json!(n));
                }
                if let Some((w, h)) = resolution {
                    put("scene.width", json!(w));
                    put("scene.height", json!(h));
                }
            }
            Command::TrainSubdepth {
                objective_mode: Some(m), ..
            } => put("train.objective_mode", json!(m)),
            Command::Ablate { seeds, modes, .. } => {
                if let Some(s) = seeds {
                    put("ablate.seeds", json!(s));
                }
                if let Some(m) = modes {
                    put("ablate.modes", json!(m));
                }
            }
            _ => {}
        }
        out
    }
}

fn resolve_config(cmd: &Command) -> anyhow::Result<RunConfig> {
    let common = cmd.common();
    let file = common.config.as_deref().map(config::read_config_file).transpose()?;
    let mut overrides = Vec::new();
    for s in &common.set {
        overrides.push(config::parse_override(s).map_err(|e| UsageError(e.to_string()))?);
    }
    overrides.extend(cmd.flag_overrides());
    config::resolve(file, &overrides).map_err(|e| UsageError(format!("{e:#}")).into())
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("SUBDEPTH_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Run one command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let recorded: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = resolve_config(&cli.command).and_then(|cfg| commands::dispatch(&cli.command, cfg, &recorded));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                2
            } else {
                1
            }
        }
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some() || matches!(c.downcast_ref::<subdepth_core::Error>(), Some(subdepth_core::Error::Config(_)))
    })
}
