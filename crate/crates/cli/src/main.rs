use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod settings;

use settings::Settings;

#[derive(Debug)]
pub enum CliError {
    /// Bad or missing arguments; exit status 2.
    Usage(String),
    Run(flowhmm::Error),
}

impl From<flowhmm::Error> for CliError {
    fn from(e: flowhmm::Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "flowhmm",
    version,
    about = "HMM sequence classifiers with normalizing-flow or GMM emissions",
    arg_required_else_help = true
)]
struct Cli {
    /// Worker threads for per-class and per-utterance work.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// JSON object of flag values (keys are long flag names); flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Feature extraction and noise injection.
    #[command(subcommand, arg_required_else_help = true)]
    Features(FeaturesCommand),
    /// Synthetic corpora.
    #[command(subcommand, arg_required_else_help = true)]
    Synth(SynthCommand),
    /// Train one model per class.
    Train(TrainArgs),
    /// Score utterances under every class model and pick the best.
    Classify(ClassifyArgs),
    /// Majority vote over several prediction files.
    Fuse(FuseArgs),
    /// Accuracy, precision, recall, F1 and confusion matrix.
    Eval(EvalArgs),
    /// Run the built-in invariant checks.
    Selftest(SelftestArgs),
}

#[derive(Subcommand, Debug)]
enum FeaturesCommand {
    /// MFCC (+ deltas, + CMVN) for every WAV into one archive.
    Extract(ExtractArgs),
    /// Mix noise into WAVs at a fixed SNR.
    Noise(NoiseArgs),
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Directory of .wav files; ids are the file stems.
    #[arg(long, value_name = "DIR")]
    pub wav_dir: Option<PathBuf>,
    /// Manifest whose paths point at WAV files.
    #[arg(long, value_name = "MANIFEST")]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_name = "ARCHIVE")]
    pub out: Option<PathBuf>,
    /// Write a manifest pointing into the new archive (needs --manifest).
    #[arg(long, value_name = "MANIFEST")]
    pub manifest_out: Option<PathBuf>,
    /// JSON feature configuration.
    #[arg(long, value_name = "FILE")]
    pub mfcc_config: Option<PathBuf>,
    #[arg(long)]
    pub no_deltas: bool,
    #[arg(long)]
    pub no_cmvn: bool,
}

#[derive(Args, Debug)]
pub struct NoiseArgs {
    /// WAV directory or WAV manifest.
    #[arg(long = "in", value_name = "DIR|MANIFEST")]
    pub input: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "DB", allow_negative_numbers = true)]
    pub snr: Option<f64>,
    /// white, pink or file.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long, value_name = "WAV")]
    pub noise_file: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum SynthCommand {
    /// Sample a synthetic corpus.
    Make(MakeArgs),
    /// Pass every frame of a feature corpus through a fixed bijection.
    Warp(WarpArgs),
}

#[derive(Args, Debug)]
pub struct MakeArgs {
    /// desk (feature sequences) or audio (WAV files).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON overrides for the preset's fields.
    #[arg(long, value_name = "FILE")]
    pub preset_config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct WarpArgs {
    #[arg(long = "in", value_name = "DIR")]
    pub input: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub bend: Option<f64>,
    #[arg(long)]
    pub cubic: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// gmm, nvp or glow.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, value_name = "MANIFEST")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub states: Option<usize>,
    /// Mixture components per state.
    #[arg(long)]
    pub nmix: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Sequences per minibatch.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Relative-change convergence threshold.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Consecutive convergence hits required.
    #[arg(long)]
    pub streak: Option<usize>,
    #[arg(long)]
    pub inner_max: Option<usize>,
    #[arg(long)]
    pub outer_iters: Option<usize>,
    #[arg(long)]
    pub lr_decay_factor: Option<f64>,
    #[arg(long)]
    pub lr_decay_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub coupling_layers: Option<usize>,
    #[arg(long)]
    pub flow_steps: Option<usize>,
    #[arg(long)]
    pub hidden_width: Option<usize>,
    /// Save a resumable checkpoint after every outer iteration.
    #[arg(long)]
    pub checkpoint: bool,
    /// Continue from the checkpoints in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    /// Model sets written by `train`, or single model containers.
    #[arg(long, value_delimiter = ',', value_name = "DIR[,DIR...]")]
    pub models: Vec<PathBuf>,
    #[arg(long, value_name = "MANIFEST")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "PRED")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long, value_delimiter = ',', value_name = "P1,P2,P3")]
    pub preds: Vec<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "PRED")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "PRED")]
    pub pred: Option<PathBuf>,
    #[arg(long, value_name = "MANIFEST")]
    pub truth: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub by_class: bool,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    /// Fewer random instances per check.
    #[arg(long)]
    pub fast: bool,
}

fn dispatch(command: Command, settings: &mut Settings) -> Result<(), CliError> {
    match command {
        Command::Features(FeaturesCommand::Extract(a)) => commands::extract(a, settings),
        Command::Features(FeaturesCommand::Noise(a)) => commands::noise(a, settings),
        Command::Synth(SynthCommand::Make(a)) => commands::synth_make(a, settings),
        Command::Synth(SynthCommand::Warp(a)) => commands::synth_warp(a, settings),
        Command::Train(a) => commands::train(a, settings),
        Command::Classify(a) => commands::classify(a, settings),
        Command::Fuse(a) => commands::fuse(a, settings),
        Command::Eval(a) => commands::eval(a, settings),
        Command::Selftest(a) => commands::selftest(a, settings),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    let jobs = match cli.jobs {
        Some(j) => Some(j),
        None => settings.opt::<usize>("jobs", None)?,
    };
    match jobs {
        Some(0) => Err(CliError::Usage("--jobs must be at least 1".into())),
        Some(n) => flowhmm::par::with_threads(n, || dispatch(cli.command, &mut settings)),
        None => dispatch(cli.command, &mut settings),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("Run 'flowhmm --help' for usage.");
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
