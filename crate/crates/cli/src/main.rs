mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Large kernel attention re-identification toolkit.
#[derive(Parser)]
#[command(name = "lkareid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the large-kernel decomposition and the channel-attention kernel size.
    Inspect(InspectArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train on a synthetic dataset and score the held-out split.
    Train(TrainArgs),
    /// Score a query/gallery split with a checkpoint or precomputed features.
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct InspectArgs {
    /// Large kernel size.
    #[arg(long = "K", default_value_t = 21)]
    pub kernel: usize,
    /// Dilation.
    #[arg(long = "d", default_value_t = 3)]
    pub dilation: usize,
    /// Channels.
    #[arg(long = "C", default_value_t = 256)]
    pub channels: usize,
    /// Feature-map height for FLOP counts.
    #[arg(long = "H", default_value_t = 14)]
    pub height: usize,
    /// Feature-map width for FLOP counts.
    #[arg(long = "W", default_value_t = 14)]
    pub width: usize,
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 2.0)]
    pub b: f64,
    /// Machine-readable output.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// all, lka, hca, model or losses.
    #[arg(long, default_value = "all")]
    pub scope: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long)]
    pub json: bool,
    /// Multiplies analytic gradients before comparison.
    #[arg(long, hide = true, default_value_t = 1.0)]
    pub corrupt_analytic: f64,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// key=value override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Model checkpoint; without it the manifests must carry features.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    /// Output directory for report.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub max_rank: usize,
    /// Images per feature-extraction batch.
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Inspect(a) => commands::inspect(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
