//! `spkstyle` command-line entry point.
//!
//! Exit status: 0 on success, 2 for usage errors, 3 for configuration or data
//! validation failures, 1 for anything else. Failures print one JSON line on
//! stderr: `{"error": <kind>, "message": <text>}`.

mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spkstyle::error::Error;

#[derive(Debug, Parser)]
#[command(name = "spkstyle", version, about = "Speaker and style disentanglement toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config file and SPKSTYLE_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Run every data-parallel map on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract log-mel features for an audio manifest.
    Prep(PrepArgs),
    /// Generate a synthetic corpus with known factors.
    SynthData(SynthArgs),
    /// Train the disentanglement model.
    Train(TrainArgs),
    /// Speaker-verification EER of one embedding stream.
    EvalSv(EvalSvArgs),
    /// Probe-classifier accuracy of one embedding stream.
    EvalProbe(EvalProbeArgs),
    /// Swap speaker and/or style embeddings between two feature files.
    Convert(ConvertArgs),
    /// Write pooled embeddings of a manifest to CSV.
    ExportEmb(ExportArgs),
    /// Project an embedding CSV to two dimensions.
    #[command(name = "project-2d")]
    Project2d(ProjectArgs),
}

#[derive(Debug, Args)]
struct PrepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_mels: Option<usize>,
    #[arg(long)]
    frame_rate: Option<u32>,
    #[arg(long)]
    rir_dir: Option<PathBuf>,
    #[arg(long)]
    rirs_per_utt: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    speakers: usize,
    #[arg(long, default_value_t = 4)]
    styles: usize,
    #[arg(long, default_value_t = 10)]
    utts_per_cell: usize,
    /// Utterance duration in seconds.
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
    #[arg(long)]
    out: PathBuf,
    /// Keep every style in training instead of holding the last one out.
    #[arg(long)]
    no_reserved_style: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint whose weights initialize the run.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Parameter group left fixed; repeatable.
    #[arg(long)]
    freeze: Vec<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct EvalSvArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "speaker")]
    stream: String,
    #[arg(long, default_value = "unconstrained")]
    condition: String,
    /// Only records with this split tag.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    n_target: Option<usize>,
    #[arg(long)]
    n_nontarget: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct EvalProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Manifest field to predict.
    #[arg(long, default_value = "style_id")]
    label: String,
    #[arg(long, default_value = "style")]
    stream: String,
    #[arg(long, default_value = "train")]
    train_split: String,
    #[arg(long, default_value = "test")]
    test_split: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Feature file providing the content.
    #[arg(long)]
    src: PathBuf,
    /// Feature file providing the swapped embedding(s).
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long, default_value = "style")]
    mode: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "speaker")]
    stream: String,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct ProjectArgs {
    /// Embedding CSV written by export-emb.
    #[arg(long)]
    emb: PathBuf,
    /// Stream the table was exported from; recorded in the report.
    #[arg(long, default_value = "speaker")]
    stream: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Numeric(_) => 1,
        _ => 3,
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "message": message.replace('\n', " ") });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            return fail("usage", first, 2);
        }
    };
    match commands::dispatch(cli.command) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), &e.to_string(), exit_code(&e)),
    }
}
