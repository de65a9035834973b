//! `deform`: dataset generation, training, fitting, editing, analysis and
//! the HTTP service behind one binary.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.

mod commands;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "deform", version, about = "Deformable surface model toolkit")]
pub struct Cli {
    /// JSON config for the command; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for all randomness (default: the config's, else 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for this run.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Trained model checkpoint.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Omit wall-clock timestamps from the manifest. Reductions are always
    /// ordered, so results are already reproducible.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Replace an existing output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "DEFORM_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic template and deformed examples.
    Datagen(DatagenArgs),
    /// Train the hypernetwork auto-decoder.
    Train(TrainArgs),
    /// Fit a latent code to an unseen mesh.
    Fit(FitArgs),
    /// Recover shape and pose from 2D landmarks.
    Reconstruct(ReconstructArgs),
    /// Move handle vertices through the latent space.
    EditHandles(EditHandlesArgs),
    /// Move a latent along a semantic direction.
    EditSemantic(EditSemanticArgs),
    /// Learn semantic directions from labeled training latents.
    Directions(DirectionsArgs),
    /// Decode random latents drawn from the latent distribution.
    Sample(SampleArgs),
    /// Decode at the vertices of a subdivided template.
    SubdivideDecode(SubdivideArgs),
    /// Count principal components needed to explain a variance fraction.
    AnalyzePca(PcaArgs),
    /// Train all four decoder variants under one budget and compare.
    BenchAblation(BenchArgs),
    /// Run the HTTP editing service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct LatentArgs {
    /// Row of the trained latent table.
    #[arg(long, conflicts_with = "latent_file")]
    pub latent_index: Option<usize>,
    /// JSON array holding a latent code.
    #[arg(long)]
    pub latent_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub examples: Option<usize>,
    /// Number of deformation fields.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `datagen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Hold out this many trailing examples for validation.
    #[arg(long, default_value_t = 0)]
    pub val_count: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub lambda_reg: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Target OBJ sharing the template's connectivity.
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// JSON list of `{vertex, x, y}`.
    #[arg(long)]
    pub landmarks: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub subdiv: usize,
}

#[derive(Debug, Args)]
pub struct EditHandlesArgs {
    /// JSON list of `{vertex, dx, dy, dz}`.
    #[arg(long)]
    pub handles: PathBuf,
    #[command(flatten)]
    pub latent: LatentArgs,
    #[arg(long, default_value_t = 0)]
    pub subdiv: usize,
}

#[derive(Debug, Args)]
pub struct EditSemanticArgs {
    /// JSON list of directions written by `directions`.
    #[arg(long)]
    pub directions: PathBuf,
    #[arg(long)]
    pub label: String,
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: f64,
    #[command(flatten)]
    pub latent: LatentArgs,
    #[arg(long, default_value_t = 0)]
    pub subdiv: usize,
}

#[derive(Debug, Args)]
pub struct DirectionsArgs {
    /// JSON object mapping each label to one +1/-1 per training latent.
    #[arg(long)]
    pub labels: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, short, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub subdiv: usize,
}

#[derive(Debug, Args)]
pub struct SubdivideArgs {
    #[arg(long, default_value_t = 1)]
    pub levels: usize,
    #[command(flatten)]
    pub latent: LatentArgs,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Fraction of variance to explain.
    #[arg(long, default_value_t = 0.99)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Trailing examples held out for the test error.
    #[arg(long)]
    pub test_count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// JSON list of semantic directions to expose.
    #[arg(long)]
    pub directions: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size thread pool: {e}");
        }
    }
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

pub(crate) fn require_out(cli: &Cli) -> Result<PathBuf, CliError> {
    cli.out.clone().ok_or_else(|| CliError::Config("--out is required for this command".into()))
}
