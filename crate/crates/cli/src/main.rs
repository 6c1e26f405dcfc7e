use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod spectrogram;

#[derive(Parser, Debug)]
#[command(
    name = "amdm",
    version,
    about = "Attention-based multichannel diffusion speech enhancement"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset of noisy reverberant scenes.
    Simulate(SimulateArgs),
    /// Train a score network on a simulated dataset.
    Train(TrainArgs),
    /// Enhance one recording or a directory of recordings.
    Enhance(EnhanceArgs),
    /// Score enhanced files against dataset targets.
    Evaluate(EvaluateArgs),
    /// Render a log-magnitude spectrogram as PNG or CSV.
    Spectrogram(SpectrogramArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<String>,
    #[arg(long)]
    n_val: Option<String>,
    #[arg(long)]
    n_test: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// `standard` or `custom`.
    #[arg(long)]
    protocol: Option<String>,
    /// Number of microphones; with the standard protocol, a prefix of its array.
    #[arg(long)]
    mics: Option<String>,
    /// Utterance length in seconds.
    #[arg(long)]
    duration: Option<String>,
    /// `babble` or `white`.
    #[arg(long)]
    noise: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    channels: Option<String>,
    /// `on` or `off`.
    #[arg(long)]
    attention: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    max_steps: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    base_width: Option<String>,
    #[arg(long)]
    val_every: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    /// Number of validation utterances scored; 0 uses all.
    #[arg(long)]
    val_subset: Option<String>,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A WAV file, a directory of WAV files, or a dataset split directory.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reverse diffusion steps.
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Refuse checkpoints trained with a different attention setting.
    #[arg(long)]
    attention: Option<String>,
    /// Refuse checkpoints trained for a different microphone count.
    #[arg(long)]
    channels: Option<String>,
    /// Use the first M channels of inputs that have more than the model's M.
    #[arg(long)]
    first_channels: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    enhanced: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Expect every scene of this split.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args, Debug)]
struct SpectrogramArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Output path; `.png` renders an image, `.csv` dumps dB values.
    #[arg(long)]
    out: PathBuf,
    /// `on` applies magnitude compression before taking the log.
    #[arg(long, default_value = "off")]
    compressed: String,
    #[arg(long, default_value_t = 0)]
    channel: usize,
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("AMDM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("AMDM_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            anyhow::bail!("AMDM_THREADS must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Simulate(a) => commands::simulate(
            &a.out,
            a.config.as_deref(),
            &[
                ("n_train", a.n_train),
                ("n_val", a.n_val),
                ("n_test", a.n_test),
                ("seed", a.seed),
                ("protocol", a.protocol),
                ("mics", a.mics),
                ("duration_s", a.duration),
                ("noise", a.noise),
            ],
        ),
        Command::Train(a) => commands::train(
            &a.data,
            &a.out,
            a.config.as_deref(),
            &[
                ("channels", a.channels),
                ("attention", a.attention),
                ("seed", a.seed),
                ("max_steps", a.max_steps),
                ("batch_size", a.batch_size),
                ("learning_rate", a.learning_rate),
                ("base_width", a.base_width),
                ("val_every", a.val_every),
                ("patience", a.patience),
                ("val_subset", a.val_subset),
            ],
        ),
        Command::Enhance(a) => commands::enhance(
            &a.ckpt,
            &a.input,
            &a.out,
            a.config.as_deref(),
            &[("n_steps", a.steps), ("seed", a.seed)],
            commands::Expect {
                attention: a.attention,
                channels: a.channels,
                first_channels: a.first_channels,
            },
        ),
        Command::Evaluate(a) => commands::evaluate(&a.enhanced, &a.data, &a.report, a.split.as_deref()),
        Command::Spectrogram(a) => spectrogram::run(&a.input, &a.out, &a.compressed, a.channel),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

/// `path` with its parent directories created.
pub(crate) fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).map_err(|e| anyhow::anyhow!("creating {}: {e}", p.display()))?;
    }
    Ok(())
}
