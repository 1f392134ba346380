use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{load_cifar_batches, load_idx, load_idx_labels, load_image_dir, synth_dataset, Dataset, SynthKind};
use crate::error::{Error, Result};
use crate::fid::ExtractorSpec;
use crate::latent::{CovarianceKind, GmmConfig};
use crate::loss::BetaMode;
use crate::nn::{ArchConfig, ImageShape};
use crate::seed::derive_seed;
use crate::train::TrainConfig;
use crate::vae::{HeadKind, ModelConfig};

/// Environment variable naming a root directory for relative output paths.
pub const ENV_OUTPUT_ROOT: &str = "SVAE_OUTPUT_ROOT";
/// Environment variable setting the worker thread count.
pub const ENV_THREADS: &str = "SVAE_THREADS";

/// Where images come from:
/// `synth:shapes`, `synth:two-gaussians`, `idx:IMAGES[,LABELS]`,
/// `cifar:BATCH[,BATCH...]`, `dir:PATH` (RGB) or `dir-gray:PATH`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DatasetSource {
    Synth(SynthKind),
    Idx { images: PathBuf, labels: Option<PathBuf> },
    Cifar(Vec<PathBuf>),
    Dir { path: PathBuf, channels: usize },
}

impl FromStr for DatasetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("dataset `{s}` must look like KIND:ARG")))?;
        let paths = || rest.split(',').filter(|p| !p.is_empty()).map(PathBuf::from).collect::<Vec<_>>();
        match kind {
            "synth" => Ok(DatasetSource::Synth(rest.parse()?)),
            "idx" => {
                let mut p = paths().into_iter();
                let images = p.next().ok_or_else(|| Error::Config("idx dataset needs an image file".into()))?;
                Ok(DatasetSource::Idx { images, labels: p.next() })
            }
            "cifar" if !rest.is_empty() => Ok(DatasetSource::Cifar(paths())),
            "dir" if !rest.is_empty() => Ok(DatasetSource::Dir { path: rest.into(), channels: 3 }),
            "dir-gray" if !rest.is_empty() => Ok(DatasetSource::Dir { path: rest.into(), channels: 1 }),
            _ => Err(Error::Config(format!("unknown dataset `{s}`"))),
        }
    }
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |ps: &[&PathBuf]| ps.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",");
        match self {
            DatasetSource::Synth(SynthKind::Shapes) => write!(f, "synth:shapes"),
            DatasetSource::Synth(SynthKind::TwoGaussians) => write!(f, "synth:two-gaussians"),
            DatasetSource::Idx { images, labels } => {
                let mut ps = vec![images];
                ps.extend(labels);
                write!(f, "idx:{}", join(&ps))
            }
            DatasetSource::Cifar(ps) => write!(f, "cifar:{}", join(&ps.iter().collect::<Vec<_>>())),
            DatasetSource::Dir { path, channels: 1 } => write!(f, "dir-gray:{}", path.display()),
            DatasetSource::Dir { path, .. } => write!(f, "dir:{}", path.display()),
        }
    }
}

impl TryFrom<String> for DatasetSource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DatasetSource> for String {
    fn from(d: DatasetSource) -> String {
        d.to_string()
    }
}

/// Everything a command needs. Precedence: built-in defaults, then the config
/// file, then command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub synth_count: usize,
    pub synth_size: usize,
    pub dataset_limit: Option<usize>,
    pub model: HeadKind,
    pub latent_dim: usize,
    pub beta0: f64,
    pub beta_mode: BetaMode,
    pub ema_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub gmm_components: usize,
    pub gmm_max_iters: usize,
    pub gmm_tol: f64,
    pub covariance: CovarianceKind,
    pub fid_samples: usize,
    pub fid_epoch_samples: usize,
    pub extractor: ExtractorSpec,
    pub track_fid: bool,
    pub save_every: usize,
    pub output_dir: PathBuf,
    pub arch: ArchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synth(SynthKind::Shapes),
            synth_count: 2000,
            synth_size: 16,
            dataset_limit: None,
            model: HeadKind::Split,
            latent_dim: 16,
            beta0: 3.0,
            beta_mode: BetaMode::Fixed,
            ema_decay: 0.9,
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            gmm_components: 10,
            gmm_max_iters: 200,
            gmm_tol: 1e-6,
            covariance: CovarianceKind::Full,
            fid_samples: 10_000,
            fid_epoch_samples: 1_000,
            extractor: ExtractorSpec::default(),
            track_fid: false,
            save_every: 1,
            output_dir: PathBuf::from("runs/default"),
            arch: ArchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path.as_ref())?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("synth_count", self.synth_count),
            ("latent_dim", self.latent_dim),
            ("epochs", self.epochs),
            ("gmm_components", self.gmm_components),
            ("gmm_max_iters", self.gmm_max_iters),
            ("fid_samples", self.fid_samples),
            ("fid_epoch_samples", self.fid_epoch_samples),
            ("save_every", self.save_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.dataset_limit == Some(0) {
            return Err(Error::Config("dataset_limit must be positive".into()));
        }
        if self.fid_samples < 2 || self.fid_epoch_samples < 2 {
            return Err(Error::Config("FID needs at least 2 samples per set".into()));
        }
        for (name, v) in [("beta0", self.beta0), ("lr", self.lr), ("gmm_tol", self.gmm_tol)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        self.arch.validate()
    }

    /// Checks that the architecture accepts `image` before any training starts.
    pub fn validate_for(&self, image: ImageShape) -> Result<()> {
        self.validate()?;
        let factor = 1usize << self.arch.num_scales;
        if image.height % factor != 0 || image.width % factor != 0 {
            return Err(Error::Config(format!(
                "{}x{} images are not divisible by 2^num_scales = {factor}",
                image.height, image.width
            )));
        }
        self.model_config(image).validate()
    }

    pub fn model_config(&self, image: ImageShape) -> ModelConfig {
        ModelConfig { image, latent_dim: self.latent_dim, head: self.model, arch: self.arch.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            beta0: self.beta0,
            beta_mode: self.beta_mode,
            ema_decay: self.ema_decay,
            seed: derive_seed(self.seed, "train"),
        }
    }

    pub fn gmm_config(&self, seed: u64) -> GmmConfig {
        GmmConfig {
            n_components: self.gmm_components,
            max_iters: self.gmm_max_iters,
            tol: self.gmm_tol,
            kind: self.covariance,
            seed,
        }
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init")
    }

    /// The output directory, placed under `SVAE_OUTPUT_ROOT` when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(ENV_OUTPUT_ROOT) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let d = match &self.dataset {
            DatasetSource::Synth(kind) => synth_dataset(*kind, self.synth_count, self.synth_size, derive_seed(self.seed, "data"))?,
            DatasetSource::Idx { images, labels } => {
                let mut d = load_idx(images)?;
                if let Some(l) = labels {
                    d = Dataset::new(d.images, Some(load_idx_labels(l)?), d.split)?;
                }
                d
            }
            DatasetSource::Cifar(paths) => load_cifar_batches(paths)?,
            DatasetSource::Dir { path, channels } => load_image_dir(path, *channels)?,
        };
        match self.dataset_limit {
            Some(n) => d.take(n),
            None => Ok(d),
        }
    }
}
