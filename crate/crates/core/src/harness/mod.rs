//! Command implementations behind the `svae` binary. Every command is a plain
//! function so it can be driven from code as well as from the command line.

mod ablate;
pub mod cli;
mod config;

pub use ablate::{cmd_ablate, run_ablation, AblationReport, AblationRow, SummaryRow, Variant};
pub use config::{DatasetSource, RunConfig, ENV_OUTPUT_ROOT, ENV_THREADS};

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{export_grid, load_checkpoint, save_checkpoint, save_matrix, Checkpoint, Dataset};
use crate::error::{invalid, shape_err, Error, Result};
use crate::fid::{fid_from_features, Extractor, ExtractorSpec, FeatureMatrix, FidReport};
use crate::latent::{active_units, fit_gmm, GaussianMixture, LatentBatch, COLLAPSE_THRESHOLD};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;
use crate::train::{EpochLog, EpochStats, Trainer};
use crate::vae::{generate, slice_rows, GenerationConfig, Generated, Sampler, SplitOutput, Vae};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const INIT_CHECKPOINT: &str = "init.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CONFIG_ECHO: &str = "config.toml";
const LOCK_FILE: &str = ".lock";

/// Exclusive claim on an output directory, released on drop.
pub struct RunLock {
    path: PathBuf,
    _file: File,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Config(format!("{} is locked by another run ({})", dir.display(), path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes the resolved configuration next to the run outputs.
pub fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    let mut resolved = cfg.clone();
    resolved.output_dir = dir.to_path_buf();
    let path = dir.join(CONFIG_ECHO);
    fs::write(&path, resolved.to_toml()?)?;
    Ok(path)
}

/// Real images used as the FID reference, capped at `count`.
fn reference_images(data: &Dataset, count: usize) -> Result<Tensor> {
    slice_rows(&data.images, 0, count.min(data.len()))
}

/// A fitted extractor plus the features of its reference set.
pub struct FidReference {
    pub extractor: Extractor,
    pub features: FeatureMatrix,
}

impl FidReference {
    pub fn new(spec: &ExtractorSpec, reference: &Tensor, seed: u64) -> Result<Self> {
        let extractor = spec.build(reference, derive_seed(seed, "extractor"))?;
        let features = extractor.extract(reference)?;
        Ok(Self { extractor, features })
    }

    pub fn score(&self, images: &Tensor) -> Result<FidReport> {
        fid_from_features(&self.features, &self.extractor.extract(images)?)
    }
}

/// Per-sample random choice between the two split branches, `p = ½`.
pub fn random_mix(split: &SplitOutput, seed: u64) -> Result<Tensor> {
    let (n, ..) = split.x1.nhwc()?;
    let per = split.x1.len() / n;
    let mut rng = rng_for(seed, "mix");
    let mut data = Vec::with_capacity(split.x1.len());
    for i in 0..n {
        let src = if rng.random_bool(0.5) { &split.x1 } else { &split.x2 };
        data.extend_from_slice(&src.data()[i * per..(i + 1) * per]);
    }
    Tensor::new(split.x1.shape().to_vec(), data)
}

/// Scores for a generated batch: `x_hat` always; `x1`, `x2`, `mix` for split models.
pub fn score_generated(reference: &FidReference, generated: &Generated, seed: u64) -> Result<BTreeMap<String, FidReport>> {
    let mut out = BTreeMap::new();
    out.insert("x_hat".to_string(), reference.score(&generated.images)?);
    if let Some(split) = &generated.split {
        out.insert("x1".to_string(), reference.score(&split.x1)?);
        out.insert("x2".to_string(), reference.score(&split.x2)?);
        out.insert("mix".to_string(), reference.score(&random_mix(split, seed)?)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub output_dir: PathBuf,
    pub last: PathBuf,
    pub best: Option<PathBuf>,
    pub best_fid: Option<f64>,
}

/// Trains from scratch, writing `init.ckpt`, `last.ckpt`, the epoch log and,
/// when FID tracking is on, `best.ckpt`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let data = cfg.load_dataset()?;
    cfg.validate_for(data.shape())?;
    let dir = cfg.resolved_output_dir();
    let _lock = RunLock::acquire(&dir)?;
    echo_config(cfg, &dir)?;

    let model = Vae::new(cfg.model_config(data.shape()), cfg.init_seed())?;
    let mut trainer = Trainer::new(model, cfg.train_config())?;
    let mut init = trainer.checkpoint();
    init.train.seed = cfg.init_seed();
    save_checkpoint(&init, dir.join(INIT_CHECKPOINT))?;

    let reference = if cfg.track_fid {
        let imgs = reference_images(&data, cfg.fid_epoch_samples)?;
        Some(FidReference::new(&cfg.extractor, &imgs, cfg.seed)?)
    } else {
        None
    };
    let mut log = EpochLog::create(dir.join(TRAIN_LOG))?;
    let mut epochs = Vec::new();
    let last = dir.join(LAST_CHECKPOINT);
    let best = dir.join(BEST_CHECKPOINT);
    for e in 0..cfg.epochs {
        let stats = trainer.train_epoch(&data)?;
        info!(
            "epoch {} recon {:.4} kl {:.4} beta {:.4} active {}",
            stats.epoch, stats.recon, stats.kl, stats.beta_effective, stats.active_units
        );
        log.append(&stats)?;
        epochs.push(stats);
        if let Some(r) = &reference {
            let g = generate(
                &trainer.model,
                &GenerationConfig {
                    sampler: Sampler::Prior,
                    count: cfg.fid_epoch_samples,
                    seed: derive_seed(cfg.seed, "track-fid"),
                },
            )?;
            let fid = r.score(&g.images)?.fid;
            info!("epoch {} fid {fid:.4}", e + 1);
            if trainer.state.best_fid.is_none_or(|b| fid < b) {
                trainer.state.best_fid = Some(fid);
                save_checkpoint(&checkpoint_with_seed(&trainer, cfg), &best)?;
            }
        }
        if (e + 1) % cfg.save_every == 0 || e + 1 == cfg.epochs {
            save_checkpoint(&checkpoint_with_seed(&trainer, cfg), &last)?;
        }
    }
    Ok(TrainReport {
        epochs,
        output_dir: dir,
        last,
        best: reference.as_ref().map(|_| best),
        best_fid: trainer.state.best_fid,
    })
}

/// Training checkpoints record the init seed so the model can be rebuilt.
fn checkpoint_with_seed(trainer: &Trainer, cfg: &RunConfig) -> Checkpoint {
    let mut c = trainer.checkpoint();
    c.train.seed = cfg.init_seed();
    c
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Prior,
    Gmm,
}

fn sampler_for<'a>(kind: SamplerKind, ckpt: &'a Checkpoint) -> Result<Sampler<'a>> {
    match kind {
        SamplerKind::Prior => Ok(Sampler::Prior),
        SamplerKind::Gmm => ckpt
            .gmm
            .as_ref()
            .map(Sampler::Gmm)
            .ok_or_else(|| Error::InvalidArgument("checkpoint has no fitted mixture; run fit-gmm first".into())),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerateReport {
    pub count: usize,
    pub images: PathBuf,
    pub grid: PathBuf,
    pub sigma_grid: Option<PathBuf>,
}

/// Decodes `count` samples; writes them as a matrix file and a preview grid.
/// Split models get the four-row layout (σ, x̂₁, x̂₂, x̂) plus a σ-only grid.
pub fn cmd_generate(
    checkpoint: &Path,
    sampler: SamplerKind,
    count: usize,
    seed: u64,
    out_dir: &Path,
    grid_cols: usize,
) -> Result<GenerateReport> {
    if grid_cols == 0 {
        return invalid("grid_cols must be positive");
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.build_model()?;
    let g = generate(&model, &GenerationConfig { sampler: sampler_for(sampler, &ckpt)?, count, seed })?;
    fs::create_dir_all(out_dir)?;
    let images = out_dir.join("generated.mat");
    save_matrix(&images, &g.images.clone().reshape(&[count, g.images.len() / count])?)?;
    let cols = grid_cols.min(count);
    let head = |t: &Tensor| slice_rows(t, 0, cols);
    let grid = out_dir.join("grid.png");
    let mut sigma_grid = None;
    match &g.split {
        Some(s) => {
            export_grid(&[head(&s.sigma_map)?, head(&s.x1)?, head(&s.x2)?, head(&s.composed)?], &grid)?;
            let p = out_dir.join("sigma.png");
            export_grid(&[head(&s.sigma_map)?], &p)?;
            sigma_grid = Some(p);
        }
        None => {
            let rows = (count / cols).clamp(1, 4);
            let stacks = (0..rows).map(|r| slice_rows(&g.images, r * cols, (r + 1) * cols)).collect::<Result<Vec<_>>>()?;
            export_grid(&stacks, &grid)?;
        }
    }
    Ok(GenerateReport { count, images, grid, sigma_grid })
}

/// Adds a mixture to a checkpoint after checking its dimension.
pub fn attach_gmm(ckpt: &mut Checkpoint, gmm: GaussianMixture) -> Result<()> {
    if gmm.dim() != ckpt.model.latent_dim {
        return shape_err(
            "fit-gmm",
            format!("mixture dimension {} differs from latent_dim {}", gmm.dim(), ckpt.model.latent_dim),
        );
    }
    ckpt.gmm = Some(gmm);
    Ok(())
}

/// Encodes `data` to posterior means and fits a mixture to them.
pub fn fit_gmm_for(model: &Vae, data: &Dataset, cfg: &RunConfig, seed: u64) -> Result<GaussianMixture> {
    if cfg.gmm_components > data.len() {
        return invalid(format!("{} components exceed {} samples", cfg.gmm_components, data.len()));
    }
    let (mu, _) = model.encode(&data.images)?;
    fit_gmm(&mu, &cfg.gmm_config(seed))
}

/// Fits the ex-post mixture and stores it in `out` (a copy of `checkpoint`).
pub fn cmd_fit_gmm(checkpoint: &Path, cfg: &RunConfig, out: &Path) -> Result<GaussianMixture> {
    cfg.validate()?;
    let mut ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.build_model()?;
    let data = cfg.load_dataset()?;
    let gmm = fit_gmm_for(&model, &data, cfg, derive_seed(cfg.seed, "gmm"))?;
    attach_gmm(&mut ckpt, gmm.clone())?;
    save_checkpoint(&ckpt, out)?;
    Ok(gmm)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FidScores {
    pub extractor: String,
    pub count: usize,
    pub scores: BTreeMap<String, FidReport>,
}

/// What the second FID set is.
pub enum FidTarget<'a> {
    Dataset(&'a RunConfig),
    Checkpoint { path: &'a Path, sampler: SamplerKind },
}

/// FID between the dataset of `reference` and either another dataset or
/// samples from a checkpoint. Writes the scores as JSON to `out`.
pub fn cmd_eval_fid(
    reference: &RunConfig,
    target: FidTarget<'_>,
    extractor: &ExtractorSpec,
    count: usize,
    seed: u64,
    out: &Path,
) -> Result<FidScores> {
    if count < 2 {
        return invalid("FID needs at least 2 samples per set");
    }
    let ref_data = reference.load_dataset()?;
    let ref_imgs = reference_images(&ref_data, count)?;
    let r = FidReference::new(extractor, &ref_imgs, seed)?;
    let scores = match target {
        FidTarget::Dataset(other) => {
            let d = other.load_dataset()?;
            let imgs = reference_images(&d, count)?;
            BTreeMap::from([("sets".to_string(), r.score(&imgs)?)])
        }
        FidTarget::Checkpoint { path, sampler } => {
            let ckpt = load_checkpoint(path)?;
            let model = ckpt.build_model()?;
            let g = generate(&model, &GenerationConfig { sampler: sampler_for(sampler, &ckpt)?, count, seed })?;
            score_generated(&r, &g, seed)?
        }
    };
    let report = FidScores { extractor: extractor.to_string(), count, scores };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncodeReport {
    pub rows: usize,
    pub latent_dim: usize,
    pub active_units: usize,
    pub per_unit_kl: Vec<f64>,
    pub means: PathBuf,
    pub logvars: PathBuf,
}

/// Writes posterior means and log-variances as matrix files, plus a JSON
/// summary with the per-unit KL.
pub fn cmd_encode(checkpoint: &Path, cfg: &RunConfig, out: &Path) -> Result<EncodeReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.build_model()?;
    let data = cfg.load_dataset()?;
    let (mu, logvar) = model.encode(&data.images)?;
    let batch = LatentBatch::from_posteriors(&mu, &logvar)?;
    let active = active_units(&batch.per_unit_kl, COLLAPSE_THRESHOLD)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let logvars = out.with_extension("logvar.mat");
    save_matrix(out, &mu)?;
    save_matrix(&logvars, &logvar)?;
    let report = EncodeReport {
        rows: mu.shape()[0],
        latent_dim: mu.shape()[1],
        active_units: active.count,
        per_unit_kl: batch.per_unit_kl,
        means: out.to_path_buf(),
        logvars,
    };
    fs::write(out.with_extension("json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
