//! Command-line front end: corpus generation, training, evaluation, scoring,
//! per-block probing and embedding export.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rxeend::Error;

#[derive(Parser, Debug)]
#[command(name = "rxeend", version, about = "End-to-end neural speaker diarization")]
struct Cli {
    /// Print every configuration default as TOML and exit.
    #[arg(long)]
    dump_defaults: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a labelled two-speaker corpus.
    GenData(GenDataArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Decode a corpus with a checkpoint and report DER.
    Eval(EvalArgs),
    /// Report DER of every block's embeddings.
    Probe(ProbeArgs),
    /// Score a hypothesis segment file against a reference.
    Score(ScoreArgs),
    /// Export one block's embeddings for one recording.
    DumpEmbeddings(DumpArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Target overlap ratio.
    #[arg(long, default_value_t = 0.34)]
    overlap: f64,
    /// Frames per dialogue.
    #[arg(long, default_value_t = 200)]
    frames: usize,
    #[arg(long, default_value_t = 2)]
    speakers: usize,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    signature_std: Option<f64>,
    #[arg(long)]
    mean_utt: Option<f64>,
    #[arg(long)]
    mean_pause: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    Base,
    Deep,
    Large,
    Small,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Aux {
    None,
    Shared,
    Indiv,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long, value_enum)]
    residual: Option<Switch>,
    #[arg(long, value_enum)]
    aux: Option<Aux>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    lr_scale: Option<f64>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    threshold: Option<f64>,
    /// Median filter width in frames (odd).
    #[arg(long)]
    median: Option<usize>,
    /// Collar in seconds around reference boundaries.
    #[arg(long)]
    collar: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Score the reference labels as the hypothesis instead of the model.
    #[arg(long)]
    reference_as_hypothesis: bool,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long, default_value_t = rxeend::metrics::DEFAULT_COLLAR_SEC)]
    collar: f64,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    recording: String,
    /// Block index, 1-based.
    #[arg(long)]
    block: usize,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Divergence { .. } | Error::NonFiniteGradient(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match (cli.dump_defaults, cli.command) {
        (true, _) => {
            print!("{}", config::RunConfig::default().to_toml());
            Ok(())
        }
        (false, None) => {
            eprintln!("error: a subcommand is required (see --help)");
            return ExitCode::from(2);
        }
        (false, Some(cmd)) => match cmd {
            Command::GenData(a) => commands::gen_data(&a),
            Command::Train(a) => commands::train(&a),
            Command::Eval(a) => commands::eval(&a),
            Command::Probe(a) => commands::probe(&a),
            Command::Score(a) => commands::score(&a),
            Command::DumpEmbeddings(a) => commands::dump_embeddings(&a),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
