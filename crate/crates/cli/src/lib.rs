//! Command-line driver: data generation, training, attacks, evaluation and rendering.
//!
//! Every command writes its artifacts plus a `config.snapshot` into the
//! directory given by `--out`. `advframe replay --snapshot <file> --out <dir>`
//! re-runs the recorded command and reproduces the artifacts byte for byte.

mod commands;
mod error;
mod snapshot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

pub use error::CliError;
pub use snapshot::{Snapshot, SNAPSHOT_FILE};

#[derive(Parser, Debug)]
#[command(name = "advframe", version, about = "Universal adversarial framings for image and video classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate train/val splits of synthetic shapes or moving-shape clips.
    GenData(GenDataArgs),
    /// Train the victim classifier on a generated dataset.
    TrainClassifier(TrainClassifierArgs),
    /// Train one adversarial framing against a frozen classifier.
    TrainFraming(TrainFramingArgs),
    /// Evaluate a framing (trained or baseline) on the validation split.
    Eval(EvalArgs),
    /// Train and evaluate AF/RF/BF framings over several widths and strategies.
    Sweep(SweepArgs),
    /// Train one targeted framing per target class and summarise success rates.
    TargetedSuite(TargetedSuiteArgs),
    /// Grad-CAM renders of a clean and a framed input.
    Gradcam(GradcamArgs),
    /// Write framed validation inputs as PPM images.
    Render(RenderArgs),
    /// Re-run a command from its config snapshot.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    /// `image` or `clip`.
    #[arg(long, default_value = "image")]
    pub kind: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training examples [default: 4096 images, 2048 clips].
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Validation examples [default: 1024 images, 512 clips].
    #[arg(long)]
    pub n_val: Option<usize>,
    /// Number of classes [default: 8 images, 6 clips].
    #[arg(long)]
    pub classes: Option<usize>,
    /// Frames per clip.
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Example height [default: 32 images, 16 clips].
    #[arg(long)]
    pub height: Option<usize>,
    /// Example width [default: 32 images, 16 clips].
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainClassifierArgs {
    /// Directory holding train.afds and val.afds.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Learning-rate factor applied every `decay-period` epochs.
    #[arg(long, default_value_t = 0.3)]
    pub decay: f64,
    #[arg(long, default_value_t = 5)]
    pub decay_period: usize,
    /// Largest random context border added to training batches (0 disables).
    #[arg(long, default_value_t = 4)]
    pub pad_augment: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Framing optimiser settings shared by the commands that train framings.
#[derive(Args, Debug, Clone)]
pub struct FramingOpts {
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Train on at most this many training examples.
    #[arg(long)]
    pub max_examples: Option<usize>,
    /// `color` (one value per channel) or `gray` (one value per pixel).
    #[arg(long, default_value = "color")]
    pub channels: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct TrainFramingArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Classifier checkpoint (.afck).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub width: usize,
    /// `untargeted` or `targeted:<class>`.
    #[arg(long, default_value = "untargeted")]
    pub objective: String,
    /// vanilla, frame-resize, resize-frame or occlude.
    #[arg(long, default_value = "vanilla")]
    pub strategy: String,
    #[command(flatten)]
    pub opts: FramingOpts,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Trained framing file (.affr).
    #[arg(long, conflicts_with = "baseline")]
    pub framing: Option<PathBuf>,
    /// `random:<seed>` or `black`.
    #[arg(long, required_unless_present = "framing")]
    pub baseline: Option<String>,
    /// Baseline framing width.
    #[arg(long, default_value_t = 2)]
    pub width: usize,
    #[arg(long, default_value = "vanilla")]
    pub strategy: String,
    #[arg(long, default_value = "color")]
    pub channels: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    pub widths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "random:0,black")]
    pub baselines: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "vanilla")]
    pub strategies: Vec<String>,
    #[command(flatten)]
    pub opts: FramingOpts,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TargetedSuiteArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Number of distinct target classes, drawn with `--seed`.
    #[arg(long, default_value_t = 8)]
    pub targets: usize,
    #[arg(long, default_value_t = 4)]
    pub width: usize,
    #[arg(long, default_value = "vanilla")]
    pub strategy: String,
    #[command(flatten)]
    pub opts: FramingOpts,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct GradcamArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Validation example to render.
    #[arg(long, default_value_t = 0)]
    pub image_index: usize,
    /// Framing for the attacked panel (Vanilla composition).
    #[arg(long)]
    pub framing: Option<PathBuf>,
    /// Validation examples scored for border-vs-interior saliency.
    #[arg(long, default_value_t = 100)]
    pub sample: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct RenderArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub framing: PathBuf,
    #[arg(long, default_value = "vanilla")]
    pub strategy: String,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    pub indices: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    /// A config.snapshot written by an earlier run.
    #[arg(long)]
    pub snapshot: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let root = Cli::command();
    let matches = root.clone().try_get_matches_from(args).map_err(CliError::Usage)?;
    let cli = Cli::from_arg_matches(&matches).map_err(CliError::Usage)?;
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    match cli.command {
        Command::Replay(r) => {
            let snap = Snapshot::read(&r.snapshot)?;
            let mut argv = vec![OsString::from("advframe")];
            argv.extend(snap.to_args().into_iter().map(OsString::from));
            argv.push("--out".into());
            argv.push(r.out.into_os_string());
            run(argv)
        }
        command => {
            let cmd = root.find_subcommand(name).expect("matched subcommand is defined");
            let snap = Snapshot::from_matches(cmd, sub)?;
            commands::execute(command, &snap)
        }
    }
}
