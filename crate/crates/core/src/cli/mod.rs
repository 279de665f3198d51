//! Command-line front end. [`run`] parses arguments, dispatches to one
//! command and returns the process exit status (see [`crate::exit`]).

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{write_alignment, GRADCHECK_SEED};

#[derive(Debug, Parser)]
#[command(
    name = "lipmel",
    version,
    about = "Silent video to speech: training, synthesis and scoring"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus of paired frame containers and WAVs.
    Gendata(GendataArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Decode a frame container to a waveform.
    Synthesize(SynthesizeArgs),
    /// Score hypothesis waveforms against a manifest.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every primitive and of the whole model.
    Gradcheck(GradcheckArgs),
    /// Describe a checkpoint, model, container, WAV, mel or manifest file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GendataArgs {
    /// Corpus description (TOML); defaults apply to missing keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `n_clips`.
    #[arg(long)]
    pub clips: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML with [model], [train] and [data] tables).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest of training clips.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written under the same configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Start from a checkpoint's weights with a fresh optimizer.
    #[arg(long, conflicts_with = "resume")]
    pub init_from: Option<PathBuf>,
    /// Resume even if the checkpoint's configuration differs.
    #[arg(long)]
    pub allow_config_change: bool,
    /// Overrides `train.fine_tune` (learning rate divided by ten).
    #[arg(long)]
    pub fine_tune: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.total_steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Overrides `train.lr_initial`.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Overrides `train.checkpoint_every`.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Return after this many steps (a resumable checkpoint is written).
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Preprocessing threads; defaults to the available parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Progress line every this many steps; zero is silent.
    #[arg(long, default_value_t = 100)]
    pub progress: usize,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    /// Training checkpoint or standalone model file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Frame container.
    #[arg(long)]
    pub video: PathBuf,
    #[arg(long, default_value_t = 25.0)]
    pub fps: f64,
    #[arg(long)]
    pub out_wav: PathBuf,
    /// Refined log-mel frames in the binary mel format.
    #[arg(long)]
    pub out_mel: Option<PathBuf>,
    /// Attention weights as a text matrix, one decoder step per line.
    #[arg(long)]
    pub out_alignment: Option<PathBuf>,
    /// Fail (exit 5) when decoding reaches the step cap.
    #[arg(long)]
    pub strict: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = crate::dsp::DEFAULT_GL_ITERS)]
    pub gl_iters: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Reference manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding `<id>.wav` and optionally `<id>.txt` per clip.
    #[arg(long)]
    pub hyp_dir: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Preprocessing settings for the mel comparison; defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fail when any clip could not be scored.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model configuration (TOML) for the whole-network check; the built-in
    /// micro configuration when omitted.
    #[arg(long)]
    pub micro_config: Option<PathBuf>,
    #[arg(long, default_value_t = GRADCHECK_SEED)]
    pub seed: u64,
    /// Test hook: corrupt the backward rule of one op kind.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                crate::exit::CONFIG
            } else {
                crate::exit::OK
            };
        }
    };
    let result = match cli.command {
        Command::Gendata(a) => commands::gendata(&a),
        Command::Train(a) => commands::train(&a),
        Command::Synthesize(a) => commands::synthesize(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Inspect(a) => commands::inspect(&a),
    };
    match result {
        Ok(()) => crate::exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
