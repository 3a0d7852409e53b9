mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::ConfigArgs;

/// Env var naming the directory outputs go under when `--out` is absent.
pub const OUTPUT_ROOT_ENV: &str = "VPBSD_OUTPUT_ROOT";

#[derive(Parser)]
#[command(
    name = "vpbsd",
    version,
    about = "Vessel-pattern codebook distillation for 3D vessel segmentation"
)]
#[command(after_help = "Outputs default to subdirectories of $VPBSD_OUTPUT_ROOT (or ./runs).")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic vessel dataset with a manifest.
    GenData(GenData),
    /// Reconstruction pretraining of the teacher and its codebook.
    Pretrain(Pretrain),
    /// Supervised fine-tuning of the teacher's segmentation head.
    Finetune(Finetune),
    /// Train the student, with or without teacher supervision.
    Distill(Distill),
    /// Segment volumes with a teacher or student checkpoint.
    Infer(Infer),
    /// Compare predicted masks with ground truth.
    Evaluate(Evaluate),
    /// Dump codebook entries and usage of a teacher checkpoint.
    InspectCodebook(InspectCodebook),
    /// Write per-stage loss curves from a run's metrics log as CSV.
    ExportCurves(ExportCurves),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    unlabeled: usize,
    #[arg(long, default_value_t = 8)]
    labeled: usize,
    #[arg(long, default_value_t = 0)]
    test: usize,
    /// Edge length of the cubic volumes.
    #[arg(long, default_value_t = 32)]
    dims: usize,
    /// Dataset directory [default: $VPBSD_OUTPUT_ROOT/data].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum QuantizerArg {
    Gumbel,
    Hard,
}

#[derive(Args)]
struct Pretrain {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum)]
    quantizer: Option<QuantizerArg>,
    #[arg(long)]
    codebook_size: Option<usize>,
    /// Continue from this pretraining checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Finetune {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Pretrained teacher checkpoint.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Args)]
struct Distill {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Fine-tuned teacher checkpoint.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Supervised student only, no teacher.
    #[arg(long, conflicts_with = "teacher")]
    baseline: bool,
    /// Peak weight of the pseudo-label term.
    #[arg(long)]
    beta: Option<f64>,
    /// Weight of the codebook feature term.
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args)]
struct Infer {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A volume file, a directory of volumes, or a dataset manifest.
    #[arg(long)]
    input: PathBuf,
    /// Split to segment when the input is a manifest.
    #[arg(long, default_value = "test")]
    split: String,
    /// Output directory [default: $VPBSD_OUTPUT_ROOT/predictions].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    /// Intensity percentile clipped at before normalization.
    #[arg(long)]
    clip: Option<f64>,
    /// Also write probability maps under prob/.
    #[arg(long)]
    probabilities: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Evaluate {
    /// Predicted mask file or directory.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth mask file or directory.
    #[arg(long)]
    gt: PathBuf,
    /// Write per-volume metrics as JSON lines here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Row label of the summary table.
    #[arg(long, default_value = "prediction")]
    label: String,
}

#[derive(Args)]
struct InspectCodebook {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Write the dump here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportCurves {
    /// Run directory holding metrics.jsonl.
    #[arg(long)]
    run: PathBuf,
    /// Directory for the CSV files [default: the run directory].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::from(e.use_stderr()));
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Distill(a) => commands::distill(a),
        Command::Infer(a) => commands::infer(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::InspectCodebook(a) => commands::inspect_codebook(a),
        Command::ExportCurves(a) => commands::export_curves(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
