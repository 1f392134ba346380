//! Minibatch training with Adam and resumable state.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Checkpoint, Dataset, TrainState};
use crate::error::{invalid, Result};
use crate::latent::{active_units, COLLAPSE_THRESHOLD};
use crate::loss::{total_loss, BetaMode, BetaSchedule, LossBreakdown};
use crate::optim::Adam;
use crate::seed::rng_for;
use crate::tensor::{Tape, Tensor};
use crate::vae::Vae;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta0: f64,
    pub beta_mode: BetaMode,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-3,
            beta0: 1.0,
            beta_mode: BetaMode::Fixed,
            ema_decay: 0.9,
            seed: 0,
        }
    }
}

/// One CSV row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u64,
    pub recon: f64,
    pub kl: f64,
    pub beta_effective: f64,
    pub active_units: usize,
    pub total: f64,
    #[serde(skip)]
    pub kl_per_unit: Vec<f64>,
}

pub struct Trainer {
    pub model: Vae,
    pub optimizer: Adam,
    pub schedule: BetaSchedule,
    pub state: TrainState,
    cfg: TrainConfig,
}

impl Trainer {
    pub fn new(model: Vae, cfg: TrainConfig) -> Result<Self> {
        if cfg.batch_size < 2 {
            return invalid("batch size must be at least 2 for batch normalization");
        }
        if !(cfg.lr > 0.0) {
            return invalid("learning rate must be positive");
        }
        let schedule = BetaSchedule::new(cfg.beta0, cfg.beta_mode, cfg.ema_decay)?;
        Ok(Self {
            model,
            optimizer: Adam::new(cfg.lr),
            schedule,
            state: TrainState { seed: cfg.seed, ..TrainState::default() },
            cfg,
        })
    }

    /// Resumes from a checkpoint including optimizer moments and the beta schedule.
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let mut t = Self::new(ckpt.build_model()?, cfg)?;
        if let Some(o) = &ckpt.optimizer {
            t.optimizer = o.clone();
        }
        if let Some(s) = &ckpt.schedule {
            t.schedule = s.clone();
        }
        t.state = ckpt.train.clone();
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_model(&self.model);
        c.optimizer = Some(self.optimizer.clone());
        c.schedule = Some(self.schedule.clone());
        c.train = self.state.clone();
        c
    }

    fn noise(&self, n: usize) -> Result<Tensor> {
        let k = self.model.latent_dim();
        let mut rng = rng_for(self.state.seed, &format!("noise-{}", self.state.step));
        Tensor::new(vec![n, k], (0..n * k).map(|_| StandardNormal.sample(&mut rng)).collect())
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: Tensor) -> Result<LossBreakdown> {
        let n = batch.shape()[0];
        let noise = self.noise(n)?;
        let mut tape = Tape::new();
        let fwd = self.model.forward_train(&mut tape, batch, noise)?;
        let (vars, breakdown) = total_loss(&mut tape, &fwd, &mut self.schedule)?;
        tape.backward(vars.total)?;
        let grads: Vec<&[f64]> = fwd
            .params
            .iter()
            .map(|p| tape.grad(*p).expect("parameters always receive gradients"))
            .collect();
        self.optimizer.update(self.model.params_mut().tensors_mut(), &grads)?;
        self.state.step += 1;
        Ok(breakdown)
    }

    /// One pass over `data` in an order derived from the seed and epoch.
    /// A trailing batch of a single item is skipped.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochStats> {
        let m = data.len();
        if m < 2 {
            return invalid("training needs at least two images");
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng_for(self.state.seed, &format!("shuffle-{}", self.state.epoch)));
        let per = data.images.len() / m;
        let mut shape = data.images.shape().to_vec();
        let (mut recon, mut kl, mut total, mut seen) = (0.0, 0.0, 0.0, 0usize);
        let mut per_unit = vec![0.0; self.model.latent_dim()];
        let mut beta = self.cfg.beta0;
        for chunk in order.chunks(self.cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut buf = Vec::with_capacity(chunk.len() * per);
            for &i in chunk {
                buf.extend_from_slice(&data.images.data()[i * per..(i + 1) * per]);
            }
            shape[0] = chunk.len();
            let b = self.step(Tensor::new(shape.clone(), buf)?)?;
            let w = chunk.len() as f64;
            recon += b.recon * w;
            kl += b.kl * w;
            total += b.total * w;
            per_unit.iter_mut().zip(&b.kl_per_unit).for_each(|(a, v)| *a += v * w);
            beta = b.beta_effective;
            seen += chunk.len();
        }
        let s = seen as f64;
        per_unit.iter_mut().for_each(|v| *v /= s);
        self.state.epoch += 1;
        Ok(EpochStats {
            epoch: self.state.epoch,
            recon: recon / s,
            kl: kl / s,
            beta_effective: beta,
            active_units: active_units(&per_unit, COLLAPSE_THRESHOLD)?.count,
            total: total / s,
            kl_per_unit: per_unit,
        })
    }
}

/// Appends epoch rows to a CSV log with the header
/// `epoch,recon,kl,beta_effective,active_units,total`.
pub struct EpochLog {
    writer: csv::Writer<std::fs::File>,
}

impl EpochLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self { writer: csv::Writer::from_path(path)? })
    }

    pub fn append(&mut self, row: &EpochStats) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}
