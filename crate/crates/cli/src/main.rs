//! `noniid`: command-line experiments with iid and non-iid Fisher vector
//! encoders.

mod commands;
mod config;
mod data;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "noniid", version, about = "Non-iid image representations and their Fisher vectors")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Seed for every random choice; required by stochastic commands.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism). Outputs do not
    /// depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// `key=value` file of option defaults; flags on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More logging (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a PCA rotation on training descriptors.
    PcaFit(PcaFitArgs),
    /// Train the MoG visual vocabulary.
    GmmTrain(GmmTrainArgs),
    /// Cache per-image sufficient statistics under the vocabulary.
    Stats(StatsArgs),
    /// Fit a Pólya (Dirichlet) prior on training word histograms.
    FitPolya(FitPolyaArgs),
    /// Train PLSA topics on training word histograms.
    PlsaTrain(PlsaTrainArgs),
    /// Fit LDA priors from a trained PLSA model.
    LdaFit(LdaFitArgs),
    /// Initialize latent MoG hyper-parameters by moment matching.
    LatmogInit(LatmogInitArgs),
    /// Learn latent MoG hyper-parameters.
    LatmogTrain(LatmogTrainArgs),
    /// Encode every image as a normalized Fisher vector.
    Encode(EncodeArgs),
    /// Train one-vs-rest linear SVMs with cross-validated C.
    SvmTrain(SvmTrainArgs),
    /// Score images and report per-class performance.
    Eval(EvalArgs),
    /// Paired bootstrap comparison of two prediction files.
    Compare(CompareArgs),
    /// Log-likelihood versus classification across (D, K) pairs.
    Sweep(SweepArgs),
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Pólya count transfer curve ψ(α + n).
    Curve(CurveArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Bow,
    Polya,
    Plsa,
    Lda,
    Mog,
    Latmog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricArg {
    Map11,
    Accuracy,
}

impl From<MetricArg> for noniid::eval::Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Map11 => noniid::eval::Metric::Map11,
            MetricArg::Accuracy => noniid::eval::Metric::Accuracy,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct PcaFitArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Number of leading components kept.
    #[arg(long)]
    pub keep: usize,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long, default_value_t = 100_000)]
    pub sample_cap: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct GmmTrainArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub pca: Option<PathBuf>,
    /// Number of components.
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long, default_value_t = 100_000)]
    pub sample_cap: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub gmm: PathBuf,
    #[arg(long)]
    pub pca: Option<PathBuf>,
    /// Keep only the K' largest posteriors of every descriptor.
    #[arg(long)]
    pub clip: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct FitPolyaArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Statistics directory written by `stats`.
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct PlsaTrainArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub topics: usize,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long, default_value_t = 1e-7)]
    pub tol: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct LdaFitArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub plsa: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct LatmogInitArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    /// Per-image precisions are truncated at this multiple of the global
    /// precision.
    #[arg(long, default_value_t = 4.0)]
    pub trunc: f64,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct LatmogTrainArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    /// Initial model from `latmog-init`.
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub iters: usize,
    #[arg(long, default_value_t = 5)]
    pub inner_steps: usize,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EncodeArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub gmm: PathBuf,
    #[arg(long)]
    pub pca: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: ModelKind,
    /// Model file for polya, plsa, lda and latmog.
    #[arg(long)]
    pub model_file: Option<PathBuf>,
    /// Power-normalization exponent.
    #[arg(long, default_value_t = 0.5)]
    pub rho: f64,
    /// Encode the cells of a spatial pyramid (default 1×1, 2×2, 3 stripes).
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub spm: bool,
    /// Pyramid levels as `colsxrows` pairs, e.g. `1x1,2x2,1x3`.
    #[arg(long)]
    pub spm_levels: Option<String>,
    #[arg(long)]
    pub clip: Option<usize>,
    /// Standardize dimensions with statistics of the training split.
    #[arg(long, num_args = 0..=1, default_value_t = true, default_missing_value = "true")]
    pub whiten: bool,
    /// Optimize latent MoG assignments per image instead of keeping the
    /// vocabulary posteriors.
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub infer_assignments: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SvmTrainArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Fisher vector directory written by `encode`.
    #[arg(long)]
    pub fv: PathBuf,
    #[arg(long, value_enum, default_value = "accuracy")]
    pub metric: MetricArg,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Candidate values of C, comma-separated.
    #[arg(long, default_value = "0.001,0.01,0.1,1,10,100,1000")]
    pub c_grid: String,
    #[arg(long, default_value_t = 3)]
    pub folds: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub fv: PathBuf,
    #[arg(long)]
    pub svm: PathBuf,
    #[arg(long, value_enum, default_value = "accuracy")]
    pub metric: MetricArg,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Per-class report (`class,metric`).
    #[arg(long)]
    pub out: PathBuf,
    /// Decision values as `image_id,class,score`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Predictions of system A.
    #[arg(long)]
    pub a: PathBuf,
    /// Predictions of system B.
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, value_enum, default_value = "accuracy")]
    pub metric: MetricArg,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// `DxK` pairs, comma-separated, e.g. `8x64,16x32`.
    #[arg(long)]
    pub pairs: String,
    #[arg(long, default_value_t = 300_000)]
    pub loglik_cap: usize,
    #[arg(long, default_value_t = 100_000)]
    pub train_cap: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value = "polya")]
    pub kind: String,
    #[arg(long, default_value_t = 2)]
    pub n_classes: usize,
    #[arg(long, default_value_t = 50)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 200)]
    pub descriptors: usize,
    #[arg(long, default_value_t = 16)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub topics: usize,
    /// Dirichlet precision of the per-image word (or topic) distribution.
    #[arg(long, default_value_t = 2.0)]
    pub precision: f64,
    #[arg(long, default_value_t = 1.0)]
    pub class_shift: f64,
    #[arg(long, default_value_t = 5.0)]
    pub base_concentration: f64,
    #[arg(long, default_value_t = 5.0)]
    pub codebook_scale: f64,
    #[arg(long, default_value_t = 0.2)]
    pub word_noise: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[arg(long, default_value_t = 5.0)]
    pub gamma_shape: f64,
    #[arg(long, default_value_t = 5.0)]
    pub gamma_rate: f64,
    /// Output directory (descriptor files and `index.tsv`).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct CurveArgs {
    /// Dirichlet parameter of the word.
    #[arg(long, conflicts_with = "model_file")]
    pub alpha: Option<f64>,
    /// Pólya model file; the curve of word `--word` is emitted.
    #[arg(long)]
    pub model_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub word: usize,
    #[arg(long, default_value_t = 50)]
    pub n_max: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// A command line that parsed but cannot run as given.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let argv = match config::splice_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
