//! Negative ELBO: squared-error reconstruction, closed-form Gaussian KL, and
//! the β schedule that weights them.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::vae::{Forward, LatentParams};

/// `½(mu² + exp(logvar) − logvar − 1)` for one unit.
pub fn kl_unit(mu: f64, logvar: f64) -> f64 {
    0.5 * (mu * mu + logvar.exp() - logvar - 1.0)
}

/// KL divergence from the standard normal prior, total and per unit.
pub fn kl_gaussian(params: &LatentParams) -> Result<(f64, Vec<f64>)> {
    if params.mu.len() != params.logvar.len() {
        return shape_err("kl_gaussian", format!("mu {} vs logvar {}", params.mu.len(), params.logvar.len()));
    }
    if params.mu.iter().chain(&params.logvar).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kl_gaussian input"));
    }
    let per: Vec<f64> = params.mu.iter().zip(&params.logvar).map(|(m, l)| kl_unit(*m, *l)).collect();
    let total = per.iter().sum();
    if !f64::is_finite(total) {
        return Err(Error::NonFinite("kl_gaussian"));
    }
    Ok((total, per))
}

/// Per-unit KL averaged over the rows of `[n, k]` posterior moments.
pub fn mean_kl_per_unit(mu: &Tensor, logvar: &Tensor) -> Result<Vec<f64>> {
    if mu.shape() != logvar.shape() || mu.rank() != 2 {
        return shape_err("kl", format!("mu {:?} vs logvar {:?}", mu.shape(), logvar.shape()));
    }
    let (n, k) = (mu.shape()[0], mu.shape()[1]);
    let mut acc = vec![0.0; k];
    for (m, l) in mu.data().chunks(k).zip(logvar.data().chunks(k)) {
        let (_, per) = kl_gaussian(&LatentParams { mu: m.to_vec(), logvar: l.to_vec() })?;
        acc.iter_mut().zip(per).for_each(|(a, p)| *a += p);
    }
    Ok(acc.into_iter().map(|a| a / n as f64).collect())
}

/// Batch mean of the summed per-unit KL, on the tape.
pub fn kl_term(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let n = tape.shape(mu)[0] as f64;
    let mu2 = tape.square(mu)?;
    let var = tape.exp(logvar)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, logvar)?;
    let per = tape.affine(b, 0.5, -0.5)?;
    let s = tape.sum(per)?;
    tape.scale(s, 1.0 / n)
}

/// Squared error summed per sample, averaged over the batch.
pub fn recon_loss(tape: &mut Tape, x: Var, x_hat: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(x_hat) {
        return shape_err("recon_loss", format!("{:?} vs {:?}", tape.shape(x), tape.shape(x_hat)));
    }
    let n = tape.shape(x)[0] as f64;
    let d = tape.sub(x_hat, x)?;
    let d2 = tape.square(d)?;
    let s = tape.sum(d2)?;
    tape.scale(s, 1.0 / n)
}

pub fn recon_loss_value(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return shape_err("recon_loss", format!("{:?} vs {:?}", x.shape(), x_hat.shape()));
    }
    let n = x.shape()[0] as f64;
    Ok(x.data().iter().zip(x_hat.data()).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() / n)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    #[default]
    Fixed,
    Balanced,
}

/// β weighting of the KL term. In balanced mode β follows the ratio between
/// the smoothed per-pixel reconstruction error and its first measurement, so
/// it shrinks as reconstruction improves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub beta0: f64,
    pub mode: BetaMode,
    pub ema_decay: f64,
    pub recon_ema: Option<f64>,
    pub initial: Option<f64>,
}

impl BetaSchedule {
    pub fn new(beta0: f64, mode: BetaMode, ema_decay: f64) -> Result<Self> {
        if !(beta0 >= 0.0) || !beta0.is_finite() {
            return invalid(format!("beta0 must be non-negative, got {beta0}"));
        }
        if !(0.0..1.0).contains(&ema_decay) {
            return invalid(format!("ema_decay must lie in [0, 1), got {ema_decay}"));
        }
        Ok(Self { beta0, mode, ema_decay, recon_ema: None, initial: None })
    }

    pub fn fixed(beta0: f64) -> Self {
        Self { beta0, mode: BetaMode::Fixed, ema_decay: 0.0, recon_ema: None, initial: None }
    }

    /// Folds in a new per-pixel reconstruction error and returns the β to use.
    pub fn update(&mut self, recon_per_pixel: f64) -> Result<f64> {
        if self.mode == BetaMode::Fixed {
            return Ok(self.beta0);
        }
        if !(recon_per_pixel > 0.0) || !recon_per_pixel.is_finite() {
            return invalid(format!("reconstruction error must be positive, got {recon_per_pixel}"));
        }
        let ema = match self.recon_ema {
            None => {
                self.initial = Some(recon_per_pixel);
                recon_per_pixel
            }
            Some(old) => self.ema_decay * old + (1.0 - self.ema_decay) * recon_per_pixel,
        };
        self.recon_ema = Some(ema);
        self.beta_effective()
    }

    pub fn beta_effective(&self) -> Result<f64> {
        match (self.mode, self.recon_ema, self.initial) {
            (BetaMode::Fixed, _, _) => Ok(self.beta0),
            (BetaMode::Balanced, Some(ema), Some(init)) => Ok(self.beta0 * (ema / init)),
            _ => invalid("balanced beta requested before any reconstruction measurement"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub kl_per_unit: Vec<f64>,
    pub beta_effective: f64,
    pub total: f64,
    pub recon_per_pixel: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub recon: Var,
    pub kl: Var,
    pub total: Var,
}

/// `recon + β·kl` with a given β. Only the composed reconstruction enters.
pub fn total_loss_with_beta(tape: &mut Tape, fwd: &Forward, beta: f64) -> Result<(LossVars, LossBreakdown)> {
    let recon = recon_loss(tape, fwd.input, fwd.head.reconstruction())?;
    let kl = kl_term(tape, fwd.mu, fwd.logvar)?;
    let weighted = tape.scale(kl, beta)?;
    let total = tape.add(recon, weighted)?;
    let breakdown = breakdown(tape, fwd, recon, kl, total, beta)?;
    Ok((LossVars { recon, kl, total }, breakdown))
}

/// Like [`total_loss_with_beta`], with β taken from (and advancing) the schedule.
pub fn total_loss(tape: &mut Tape, fwd: &Forward, schedule: &mut BetaSchedule) -> Result<(LossVars, LossBreakdown)> {
    let recon = recon_loss(tape, fwd.input, fwd.head.reconstruction())?;
    let per_sample = tape.value(fwd.input).len() / tape.shape(fwd.input)[0];
    let beta = schedule.update(tape.value(recon).data()[0] / per_sample as f64)?;
    let kl = kl_term(tape, fwd.mu, fwd.logvar)?;
    let weighted = tape.scale(kl, beta)?;
    let total = tape.add(recon, weighted)?;
    let breakdown = breakdown(tape, fwd, recon, kl, total, beta)?;
    Ok((LossVars { recon, kl, total }, breakdown))
}

fn breakdown(tape: &Tape, fwd: &Forward, recon: Var, kl: Var, total: Var, beta: f64) -> Result<LossBreakdown> {
    let per_sample = tape.value(fwd.input).len() / tape.shape(fwd.input)[0];
    let recon_v = tape.value(recon).data()[0];
    Ok(LossBreakdown {
        recon: recon_v,
        kl: tape.value(kl).data()[0],
        kl_per_unit: mean_kl_per_unit(tape.value(fwd.mu), tape.value(fwd.logvar))?,
        beta_effective: beta,
        total: tape.value(total).data()[0],
        recon_per_pixel: recon_v / per_sample as f64,
    })
}
