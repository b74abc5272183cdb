//! `dlspeed` command-line driver.
//!
//! Exit codes: 0 success, 1 usage, 2 data/format error, 3 numeric failure.

mod commands;
mod corpus;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "dlspeed", version, about = "Accelerated multi-coil MRI reconstruction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a variable-density Poisson-disc sampling mask.
    Mask(MaskArgs),
    /// Simulate a phantom corpus.
    Simulate(SimulateArgs),
    /// Train the unrolled network on a corpus.
    Train(TrainArgs),
    /// Reconstruct one acquisition or a range of corpus cases.
    Recon(ReconArgs),
    /// Score reconstructions against references, or aggregate reports.
    Eval(EvalArgs),
}

#[derive(Args)]
struct MaskArgs {
    /// Grid extents, e.g. 64x64.
    #[arg(long, value_parser = parse_extents)]
    shape: Extents,
    #[arg(long)]
    accel: f64,
    /// Fully sampled calibration extents, e.g. 12x12.
    #[arg(long, value_parser = parse_extents)]
    center: Extents,
    /// Exclude points outside the inscribed ellipse.
    #[arg(long)]
    corner_cut: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write a plain-text PBM picture of the mask.
    #[arg(long)]
    pbm: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    cases: usize,
    #[arg(long, value_parser = parse_extents, default_value = "64x64")]
    shape: Extents,
    #[arg(long, default_value_t = 8)]
    coils: usize,
    /// k-space noise std relative to the peak image magnitude.
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 10.0)]
    accel: f64,
    #[arg(long, value_parser = parse_extents, default_value = "12x12")]
    center: Extents,
    #[arg(long)]
    corner_cut: bool,
    /// Use coil maps estimated from the calibration region.
    #[arg(long)]
    estimate_maps: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Index of the first case (cases are addressed by corpus seed + index).
    #[arg(long, default_value_t = 0)]
    start: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    jobs: Jobs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving best.mrvx, last.mrvx and train_log.jsonl.
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Number of trailing corpus cases held out for validation.
    #[arg(long)]
    val_cases: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Rescale gradients whose global norm exceeds this value.
    #[arg(long)]
    clip_norm: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Zero,
    Cs,
    Dlspeed,
}

impl Method {
    fn report_name(self) -> &'static str {
        match self {
            Method::Zero => "zero_filled",
            Method::Cs => "cs_tv",
            Method::Dlspeed => "dlspeed",
        }
    }
}

#[derive(Args)]
struct CsArgs {
    #[arg(long, default_value_t = 200)]
    cs_iters: usize,
    /// Quantile of difference magnitudes used as the threshold.
    #[arg(long, default_value_t = 0.6)]
    cs_quantile: f64,
    /// Fixed threshold; overrides --cs-quantile.
    #[arg(long)]
    cs_threshold: Option<f64>,
}

#[derive(Args)]
struct Jobs {
    /// Worker threads for independent cases (capped by MRVX_THREADS).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ReconArgs {
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, required_unless_present = "corpus")]
    kspace: Option<PathBuf>,
    #[arg(long, required_unless_present = "corpus")]
    maps: Option<PathBuf>,
    #[arg(long, required_unless_present = "corpus")]
    mask: Option<PathBuf>,
    #[arg(long, required_unless_present = "corpus")]
    out: Option<PathBuf>,
    /// 8-bit magnitude export of one slice (min-max normalized).
    #[arg(long)]
    pgm: Option<PathBuf>,
    /// Slice along the first axis exported for 3-D volumes (default: middle).
    #[arg(long)]
    pgm_slice: Option<usize>,
    /// Reconstruct corpus cases instead of single files.
    #[arg(long, conflicts_with_all = ["kspace", "maps", "mask", "out"], requires = "out_dir")]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Skip this many manifest cases.
    #[arg(long, default_value_t = 0)]
    skip: usize,
    /// Reconstruct at most this many cases.
    #[arg(long)]
    take: Option<usize>,
    #[command(flatten)]
    cs: CsArgs,
    #[command(flatten)]
    jobs: Jobs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present_any = ["aggregate", "corpus"])]
    recon: Option<PathBuf>,
    #[arg(long, required_unless_present_any = ["aggregate", "corpus"])]
    reference: Option<PathBuf>,
    /// Mask container supplying the seed and achieved R for the report.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value = "unknown")]
    method: String,
    #[arg(long, default_value = "case")]
    case_id: String,
    /// Score every reconstruction in --recon-dir against the corpus.
    #[arg(long, conflicts_with_all = ["recon", "reference", "aggregate"], requires = "recon_dir")]
    corpus: Option<PathBuf>,
    #[arg(long)]
    recon_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    skip: usize,
    #[arg(long)]
    take: Option<usize>,
    /// Aggregate existing report files (mean and standard deviation per method).
    #[arg(long, num_args = 1.., conflicts_with_all = ["recon", "reference"])]
    aggregate: Vec<PathBuf>,
    /// Report destination; standard output when omitted.
    #[arg(long)]
    out_report: Option<PathBuf>,
    #[command(flatten)]
    jobs: Jobs,
}

/// Grid extents written `AxB[xC]`.
#[derive(Clone, Debug)]
struct Extents(Vec<usize>);

fn parse_extents(s: &str) -> Result<Extents, String> {
    let v = s
        .split(['x', 'X', ','])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad extent {p:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if v.is_empty() || v.contains(&0) {
        return Err(format!("extents must be positive, got {s:?}"));
    }
    Ok(Extents(v))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Mask(a) => commands::mask(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Train(a) => commands::train(a),
        Command::Recon(a) => commands::recon(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
