//! `pathonet`: synthesis, label preparation, training, inference, cell
//! detection, evaluation, scoring and threshold tuning.

mod commands;
mod error;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pathonet::config::RunConfig;

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "pathonet", version, about = "Density-map cell detection and Ki-67/TIL scoring")]
struct Cli {
    /// Flat `key = value` run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable. Applied after the config
    /// file and `PATHONET_*` variables, before dedicated flags.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for batch steps [default: logical cores].
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic tiles with exact annotations.
    Synth(SynthArgs),
    /// Render the density label of an annotation file.
    RenderLabels(RenderArgs),
    /// Tile, split and augment annotated images into training data.
    Prepare(PrepareArgs),
    /// Train a network on prepared tiles.
    Train(TrainArgs),
    /// Predict density maps.
    Infer(InferArgs),
    /// Predict cell centers.
    Detect(DetectArgs),
    /// Compare predicted cells with ground truth.
    Eval(EvalArgs),
    /// Ki-67 and TIL scores with cut-off bands.
    Score(ScoreArgs),
    /// Pick per-class thresholds by F1 on a validation set.
    TuneThresholds(TuneArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory for `tile_NNNN.png` / `.json` pairs.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Probability that a cell is placed touching another.
    #[arg(long, default_value_t = 0.0)]
    pub overlap: f64,
    #[arg(long)]
    pub tile_size: Option<u32>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Annotation file.
    #[arg(long)]
    pub cells: PathBuf,
    /// Image whose size the label takes.
    #[arg(long, conflicts_with = "size", required_unless_present = "size")]
    pub image: Option<PathBuf>,
    /// Label size as `WxH`.
    #[arg(long)]
    pub size: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Directory of `NAME.png` images with `NAME.json` annotations.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tile_size: Option<u32>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Write training tiles without the six flip/rotation variants.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of `NAME.png` tiles with `NAME.dmap` labels.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Four comma-separated channel widths, each double the previous.
    #[arg(long)]
    pub widths: Option<String>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Input image; repeatable.
    #[arg(long, required = true)]
    pub image: Vec<PathBuf>,
    /// Output file (single image).
    #[arg(long, conflicts_with = "out_dir")]
    pub out: Option<PathBuf>,
    /// Output directory, one `NAME.dmap` per image.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[arg(long, required_unless_present = "density")]
    pub model: Option<PathBuf>,
    /// Input image; repeatable.
    #[arg(long, conflicts_with = "density")]
    pub image: Vec<PathBuf>,
    /// Detect on an existing density map instead of running the network.
    #[arg(long)]
    pub density: Option<PathBuf>,
    /// Per-class thresholds `POS,NEG,LYM`.
    #[arg(long)]
    pub thresholds: Option<String>,
    #[arg(long)]
    pub min_separation: Option<f64>,
    /// `distance` or `density`.
    #[arg(long)]
    pub seed_source: Option<String>,
    #[arg(long, conflicts_with = "out_dir")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Ground-truth annotation file, or a directory of them.
    #[arg(long)]
    pub gt: PathBuf,
    /// Predicted annotation file, or a directory with the same file names.
    #[arg(long)]
    pub pred: PathBuf,
    /// Matching radius in pixels.
    #[arg(long)]
    pub radius: Option<f64>,
    /// Lines of `IMAGE PATIENT` for per-patient aggregation.
    #[arg(long)]
    pub patients: Option<PathBuf>,
    /// Also write the metrics as a `key = value` document.
    #[arg(long)]
    pub kv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Annotation file, or a counts document (`immunopositive = N` lines
    /// or a JSON object).
    #[arg(long, required_unless_present = "counts", conflicts_with = "counts")]
    pub cells: Option<PathBuf>,
    /// Counts as `POS,NEG,LYM`.
    #[arg(long)]
    pub counts: Option<String>,
}

#[derive(Args, Debug)]
pub struct TuneArgs {
    /// Directory of `NAME.json` annotations with `NAME.png` images (when
    /// `--model` is given) or predicted `NAME.dmap` maps.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub radius: Option<f64>,
    /// Write the result as a config snippet.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    /// Dedicated flags as configuration keys.
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        let mut put = |k: &'static str, val: Option<String>| {
            if let Some(val) = val {
                v.push((k, val));
            }
        };
        match self {
            Command::Synth(a) => {
                put("seed", a.seed.map(|s| s.to_string()));
                put("tile_size", a.tile_size.map(|s| s.to_string()));
            }
            Command::Prepare(a) => {
                put("seed", a.seed.map(|s| s.to_string()));
                put("tile_size", a.tile_size.map(|s| s.to_string()));
                put("train_fraction", a.train_fraction.map(|s| s.to_string()));
            }
            Command::Train(a) => {
                put("seed", a.seed.map(|s| s.to_string()));
                put("epochs", a.epochs.map(|s| s.to_string()));
                put("base_lr", a.lr.map(|s| s.to_string()));
                put("batch_size", a.batch_size.map(|s| s.to_string()));
                put("widths", a.widths.clone());
            }
            Command::Detect(a) => {
                put("thresholds", a.thresholds.clone());
                put("min_separation", a.min_separation.map(|s| s.to_string()));
                put("seed_source", a.seed_source.clone());
            }
            Command::Eval(a) => put("match_radius", a.radius.map(|s| s.to_string())),
            Command::TuneThresholds(a) => put("match_radius", a.radius.map(|s| s.to_string())),
            Command::RenderLabels(_) | Command::Infer(_) | Command::Score(_) => {}
        }
        v
    }
}

/// Defaults, then the config file, then `PATHONET_*`, then `--set`, then
/// dedicated flags.
fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_text(&files::read_text(path)?)?;
    }
    cfg.apply_env(std::env::vars())?;
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    for (k, v) in cli.command.overrides() {
        cfg.set(k, &v)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    match &cli.command {
        Command::Synth(a) => commands::synth(a, &cfg),
        Command::RenderLabels(a) => commands::render_labels(a, &cfg),
        Command::Prepare(a) => commands::prepare(a, &cfg),
        Command::Train(a) => commands::train(a, &cfg),
        Command::Infer(a) => commands::infer(a),
        Command::Detect(a) => commands::detect(a, &cfg),
        Command::Eval(a) => commands::eval(a, &cfg),
        Command::Score(a) => commands::score(a),
        Command::TuneThresholds(a) => commands::tune(a, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", line.trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
