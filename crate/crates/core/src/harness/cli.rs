//! Argument parsing for the `svae` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::{
    cmd_ablate, cmd_encode, cmd_eval_fid, cmd_fit_gmm, cmd_generate, cmd_train, DatasetSource, FidTarget, RunConfig,
    SamplerKind, ENV_THREADS,
};
use crate::error::{Error, Result};
use crate::fid::ExtractorSpec;
use crate::latent::CovarianceKind;
use crate::loss::BetaMode;
use crate::nn::Activation;
use crate::vae::HeadKind;

#[derive(Debug, Parser)]
#[command(name = "svae", version, about = "Train, sample and evaluate split variational autoencoders")]
pub struct Cli {
    /// Worker threads for data-parallel kernels.
    #[arg(long, global = true, env = ENV_THREADS)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints plus an epoch log.
    Train(RunArgs),
    /// Sample images from a checkpoint.
    Generate(GenerateArgs),
    /// Fit the ex-post latent mixture and store it in a checkpoint.
    FitGmm(FitGmmArgs),
    /// Fréchet distance between two datasets, or between a dataset and samples.
    EvalFid(EvalFidArgs),
    /// Encode a dataset to latent matrix files.
    Encode(EncodeArgs),
    /// Train vanilla and split twins side by side and compare them.
    Ablate(AblateArgs),
}

/// Every `RunConfig` field as an optional flag; set flags override the file.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<DatasetSource>,
    #[arg(long)]
    pub synth_count: Option<usize>,
    #[arg(long)]
    pub synth_size: Option<usize>,
    #[arg(long)]
    pub dataset_limit: Option<usize>,
    #[arg(long, value_parser = parse_head)]
    pub model: Option<HeadKind>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub beta0: Option<f64>,
    #[arg(long, value_parser = parse_beta_mode)]
    pub beta_mode: Option<BetaMode>,
    #[arg(long)]
    pub ema_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub gmm_components: Option<usize>,
    #[arg(long)]
    pub gmm_max_iters: Option<usize>,
    #[arg(long)]
    pub gmm_tol: Option<f64>,
    #[arg(long, value_parser = parse_covariance)]
    pub covariance: Option<CovarianceKind>,
    #[arg(long)]
    pub fid_samples: Option<usize>,
    #[arg(long)]
    pub fid_epoch_samples: Option<usize>,
    #[arg(long)]
    pub extractor: Option<ExtractorSpec>,
    #[arg(long)]
    pub track_fid: Option<bool>,
    #[arg(long)]
    pub save_every: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub base_dim: Option<usize>,
    #[arg(long)]
    pub num_scales: Option<usize>,
    #[arg(long)]
    pub scale_blocks: Option<usize>,
    #[arg(long)]
    pub residual_blocks: Option<usize>,
    #[arg(long)]
    pub convs_per_block: Option<usize>,
    #[arg(long, value_parser = parse_activation)]
    pub activation: Option<Activation>,
    #[arg(long)]
    pub dense_block_width: Option<usize>,
}

fn parse_head(s: &str) -> std::result::Result<HeadKind, String> {
    match s {
        "vanilla" => Ok(HeadKind::Vanilla),
        "split" => Ok(HeadKind::Split),
        _ => Err(format!("model must be vanilla or split, got `{s}`")),
    }
}

fn parse_beta_mode(s: &str) -> std::result::Result<BetaMode, String> {
    match s {
        "fixed" => Ok(BetaMode::Fixed),
        "balanced" => Ok(BetaMode::Balanced),
        _ => Err(format!("beta mode must be fixed or balanced, got `{s}`")),
    }
}

fn parse_covariance(s: &str) -> std::result::Result<CovarianceKind, String> {
    match s {
        "full" => Ok(CovarianceKind::Full),
        "diagonal" => Ok(CovarianceKind::Diagonal),
        _ => Err(format!("covariance must be full or diagonal, got `{s}`")),
    }
}

fn parse_activation(s: &str) -> std::result::Result<Activation, String> {
    match s {
        "relu" => Ok(Activation::Relu),
        "leaky_relu" => Ok(Activation::LeakyRelu),
        _ => Err(format!("activation must be relu or leaky_relu, got `{s}`")),
    }
}

macro_rules! override_fields {
    ($args:expr, $cfg:expr, [$($field:ident),*], arch [$($arch:ident),*]) => {
        $( if let Some(v) = $args.$field.clone() { $cfg.$field = v; } )*
        $( if let Some(v) = $args.$arch.clone() { $cfg.arch.$arch = v; } )*
    };
}

impl RunArgs {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(n) = self.dataset_limit {
            cfg.dataset_limit = Some(n);
        }
        override_fields!(self, cfg, [
            dataset, synth_count, synth_size, model, latent_dim, beta0, beta_mode, ema_decay, epochs,
            batch_size, lr, seed, gmm_components, gmm_max_iters, gmm_tol, covariance, fid_samples,
            fid_epoch_samples, extractor, track_fid, save_every, output_dir
        ], arch [
            base_dim, num_scales, scale_blocks, residual_blocks, convs_per_block, activation, dense_block_width
        ]);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SamplerKind::Prior)]
    pub sampler: SamplerKind,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub grid_cols: usize,
}

#[derive(Debug, Args)]
pub struct FitGmmArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Destination; defaults to rewriting the input checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EvalFidArgs {
    /// Second dataset; mutually exclusive with `--checkpoint`.
    #[arg(long, conflicts_with = "checkpoint")]
    pub set_b: Option<DatasetSource>,
    /// Checkpoint whose samples are compared against the reference dataset.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SamplerKind::Prior)]
    pub sampler: SamplerKind,
    /// Images per set; defaults to the run configuration's `fid_samples`.
    #[arg(long)]
    pub count: Option<usize>,
    /// JSON report destination.
    #[arg(long)]
    pub out: PathBuf,
    /// Reference dataset and extractor come from the run configuration.
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Matrix file for the posterior means.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    /// Start vanilla and split twins from identical trunk weights.
    #[arg(long)]
    pub shared_init: bool,
    #[command(flatten)]
    pub run: RunArgs,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train(a) => {
            let r = cmd_train(&a.resolve()?)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Generate(a) => {
            let r = cmd_generate(&a.checkpoint, a.sampler, a.count, a.seed, &a.out, a.grid_cols)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::FitGmm(a) => {
            let out = a.out.clone().unwrap_or_else(|| a.checkpoint.clone());
            let g = cmd_fit_gmm(&a.checkpoint, &a.run.resolve()?, &out)?;
            println!(
                "fitted {} components; final mean log-likelihood {:.6}; written to {}",
                g.n_components(),
                g.log_likelihood_trace.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::EvalFid(a) => {
            let cfg = a.run.resolve()?;
            let count = a.count.unwrap_or(cfg.fid_samples);
            let other;
            let target = match (&a.set_b, &a.checkpoint) {
                (Some(b), None) => {
                    other = RunConfig { dataset: b.clone(), ..cfg.clone() };
                    FidTarget::Dataset(&other)
                }
                (None, Some(p)) => FidTarget::Checkpoint { path: p, sampler: a.sampler },
                _ => return Err(Error::Config("pass exactly one of --set-b or --checkpoint".into())),
            };
            let r = cmd_eval_fid(&cfg, target, &cfg.extractor, count, cfg.seed, &a.out)?;
            for (name, rep) in &r.scores {
                println!("{name}: {:.6}", rep.fid);
            }
        }
        Command::Encode(a) => {
            let r = cmd_encode(&a.checkpoint, &a.run.resolve()?, &a.out)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Ablate(a) => {
            let r = cmd_ablate(&a.run.resolve()?, a.trials, a.shared_init)?;
            for s in &r.final_summary {
                println!("{}: fid {:.4} ± {:.4}, active {:.2}", s.variant, s.fid_mean, s.fid_std, s.active_units_mean);
            }
        }
    }
    Ok(())
}

/// Entry point used by the binary.
pub fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}
