use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use patchmil::Error;

mod ablate;
mod commands;
mod common;

#[derive(Parser)]
#[command(
    name = "patchmil",
    version,
    about = "Weakly supervised patch network: synthetic data, training, evaluation, discovery, ablations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape dataset.
    GenData(GenDataArgs),
    /// Train a model; writes a checkpoint directory and a loss CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint: per-class AP and CorLoc on a dataset.
    Eval(EvalArgs),
    /// Dump discovered boxes as CSV (image_id,class,score,lx,ly,rx,ry).
    Discover(DiscoverArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate the comparison grid; writes ablation.csv.
    Ablate(AblateArgs),
}

#[derive(clap::Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = 500)]
    pub num: usize,
    /// Number of shape classes (at most 5).
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Smallest image side.
    #[arg(long)]
    pub min_size: Option<usize>,
    /// Largest image side.
    #[arg(long)]
    pub max_size: Option<usize>,
    /// Fewest objects per image.
    #[arg(long)]
    pub min_objects: Option<usize>,
    /// Most objects per image.
    #[arg(long)]
    pub max_objects: Option<usize>,
    /// Smallest object side.
    #[arg(long)]
    pub min_object: Option<usize>,
    /// Largest object side.
    #[arg(long)]
    pub max_object: Option<usize>,
    /// Distractor elements per image.
    #[arg(long)]
    pub clutter: Option<usize>,
}

#[derive(clap::Args)]
pub struct TrainArgs {
    /// Dataset directory (manifest.json + images/).
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss CSV path (default: OUT/loss.csv).
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    /// 'sw' for sliding windows, or a proposal CSV path.
    #[arg(long)]
    pub proposals: Option<String>,
    /// Optional JSON config file; explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Learning-rate schedule, e.g. 2500:0.0003,500:0.0001.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Images per mini-batch.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Weight decay.
    #[arg(long)]
    pub wd: Option<f64>,
    /// multi-task | cls | dis.
    #[arg(long)]
    pub mode: Option<String>,
    /// Training scales, comma separated (e.g. 64,96,128).
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<u32>>,
    /// Disable random horizontal flips.
    #[arg(long)]
    pub no_flip: bool,
    /// Weight on the discovery loss term.
    #[arg(long)]
    pub dis_weight: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainArgs {
    fn overrides(&self) -> common::TrainOverrides {
        common::TrainOverrides {
            schedule: self.schedule.clone(),
            batch: self.batch,
            momentum: self.momentum,
            weight_decay: self.wd,
            mode: self.mode.clone(),
            scales: self.scales.clone(),
            no_flip: self.no_flip,
            dis_weight: self.dis_weight,
            seed: self.seed,
        }
    }
}

#[derive(clap::Args)]
pub struct EvalArgs {
    /// Dataset directory with ground truth.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// 'sw' for sliding windows, or a proposal CSV path.
    #[arg(long)]
    pub proposals: Option<String>,
    /// Test scales, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<u32>>,
    /// IoU threshold for a correct localization.
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    /// Report output directory (default: the checkpoint directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional JSON config file; explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct DiscoverArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// 'sw' for sliding windows, or a proposal CSV path.
    #[arg(long)]
    pub proposals: Option<String>,
    /// Test scales, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<u32>>,
    /// Output CSV path (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Emit boxes for every class, not only the image's labels.
    #[arg(long)]
    pub all_classes: bool,
    /// Boxes per image and class (default 1).
    #[arg(long)]
    pub topk: Option<usize>,
    /// Suppress overlapping boxes above this IoU before ranking.
    #[arg(long)]
    pub nms: Option<f64>,
    /// Optional JSON config file; explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct GradcheckArgs {
    /// Seed of the first toy model; model i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of seeded toy models to check.
    #[arg(long, default_value_t = 5)]
    pub models: usize,
    /// multi-task | cls | dis.
    #[arg(long, default_value = "multi-task")]
    pub mode: String,
    /// Relative-error tolerance (default 1e-4).
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Finite-difference step (default 1e-5).
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Weight on the discovery loss term.
    #[arg(long, default_value_t = 1.0)]
    pub dis_weight: f64,
}

#[derive(clap::Args)]
pub struct AblateArgs {
    /// Output directory for ablation.csv and per-seed datasets.
    #[arg(long)]
    pub out: PathBuf,
    /// Training images per seed.
    #[arg(long, default_value_t = 500)]
    pub train_num: usize,
    /// Held-out images per seed.
    #[arg(long, default_value_t = 200)]
    pub test_num: usize,
    /// Seeds, comma separated; the grid runs once per seed.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Learning-rate schedule for every cell.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Optional JSON config file; explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// 0 success, 1 usage, 2 data, 3 numerical.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => 1,
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> patchmil::Result<ExitCode> {
    match cli.command {
        Command::GenData(args) => commands::gen_data(&args),
        Command::Train(args) => commands::cmd_train(&args),
        Command::Eval(args) => commands::cmd_eval(&args),
        Command::Discover(args) => commands::cmd_discover(&args),
        Command::Gradcheck(args) => commands::cmd_gradcheck(&args),
        Command::Ablate(args) => ablate::cmd_ablate(&args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code_for(&e))
        }
    }
}
