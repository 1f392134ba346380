use std::fmt;
use std::fs;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{echo_config, fit_gmm_for, random_mix, reference_images, FidReference, RunConfig, RunLock};
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::latent::{active_units, COLLAPSE_THRESHOLD};
use crate::loss::mean_kl_per_unit;
use crate::seed::derive_seed;
use crate::train::Trainer;
use crate::vae::{generate, GenerationConfig, HeadKind, Sampler, Vae};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    Split,
    SplitX1,
    SplitX2,
    SplitMix,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Vanilla, Variant::Split, Variant::SplitX1, Variant::SplitX2, Variant::SplitMix];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Vanilla => "vanilla",
            Variant::Split => "split",
            Variant::SplitX1 => "split_x1",
            Variant::SplitX2 => "split_x2",
            Variant::SplitMix => "split_mix",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub epoch: usize,
    pub trial: usize,
    pub variant: Variant,
    pub fid: f64,
    pub active_units: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub epoch: usize,
    pub variant: Variant,
    pub fid_mean: f64,
    pub fid_std: f64,
    pub active_units_mean: f64,
    pub active_units_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub trial_seeds: Vec<u64>,
    /// Per-epoch scores from `fid_epoch_samples` generated images.
    pub rows: Vec<AblationRow>,
    /// Scores after the last epoch from `fid_samples` generated images.
    pub final_rows: Vec<AblationRow>,
    pub summary: Vec<SummaryRow>,
    pub final_summary: Vec<SummaryRow>,
}

impl AblationReport {
    pub fn final_fid(&self, trial: usize, variant: Variant) -> Option<f64> {
        self.final_rows.iter().find(|r| r.trial == trial && r.variant == variant).map(|r| r.fid)
    }

    pub fn final_active_units(&self, trial: usize, variant: Variant) -> Option<usize> {
        self.final_rows.iter().find(|r| r.trial == trial && r.variant == variant).map(|r| r.active_units)
    }

    /// Whether both split branches score below the composed split image in
    /// the final mean scores.
    pub fn branches_beat_composed(&self) -> Option<bool> {
        let mean = |v| self.final_summary.iter().find(|s| s.variant == v).map(|s| s.fid_mean);
        Some(mean(Variant::SplitX1)? < mean(Variant::Split)? && mean(Variant::SplitX2)? < mean(Variant::Split)?)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn summarize(rows: &[AblationRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(usize, Variant)> = rows.iter().map(|r| (r.epoch, r.variant)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(epoch, variant)| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.epoch == epoch && r.variant == variant).collect();
            let (fid_mean, fid_std) = mean_std(&sel.iter().map(|r| r.fid).collect::<Vec<_>>());
            let (au_mean, au_std) = mean_std(&sel.iter().map(|r| r.active_units as f64).collect::<Vec<_>>());
            SummaryRow { epoch, variant, fid_mean, fid_std, active_units_mean: au_mean, active_units_std: au_std }
        })
        .collect()
}

/// Active units from evaluation-mode posteriors over the dataset.
fn dataset_active_units(model: &Vae, data: &Dataset) -> Result<usize> {
    let (mu, logvar) = model.encode(&data.images)?;
    Ok(active_units(&mean_kl_per_unit(&mu, &logvar)?, COLLAPSE_THRESHOLD)?.count)
}

/// GMM-resampled scores for one model.
fn evaluate(
    model: &Vae,
    data: &Dataset,
    reference: &FidReference,
    cfg: &RunConfig,
    seed: u64,
    count: usize,
    epoch: usize,
    trial: usize,
) -> Result<Vec<AblationRow>> {
    let gmm = fit_gmm_for(model, data, cfg, derive_seed(seed, "gmm"))?;
    let g = generate(model, &GenerationConfig { sampler: Sampler::Gmm(&gmm), count, seed: derive_seed(seed, "sample") })?;
    let active = dataset_active_units(model, data)?;
    let row = |variant, fid| AblationRow { epoch, trial, variant, fid, active_units: active };
    Ok(match &g.split {
        None => vec![row(Variant::Vanilla, reference.score(&g.images)?.fid)],
        Some(s) => vec![
            row(Variant::Split, reference.score(&g.images)?.fid),
            row(Variant::SplitX1, reference.score(&s.x1)?.fid),
            row(Variant::SplitX2, reference.score(&s.x2)?.fid),
            row(Variant::SplitMix, reference.score(&random_mix(s, derive_seed(seed, "mix"))?)?.fid),
        ],
    })
}

/// Trains vanilla/split twins for each trial and scores them after every
/// epoch. With `shared_init` both twins start from the same trunk weights;
/// otherwise the split twin draws its own initialization.
pub fn run_ablation(cfg: &RunConfig, data: &Dataset, trials: usize, shared_init: bool) -> Result<AblationReport> {
    if trials == 0 {
        return invalid("ablation needs at least one trial");
    }
    cfg.validate_for(data.shape())?;
    let reference = FidReference::new(&cfg.extractor, &reference_images(data, cfg.fid_samples)?, cfg.seed)?;
    let trial_seeds: Vec<u64> = (0..trials).map(|t| derive_seed(cfg.seed, &format!("trial-{t}"))).collect();
    let mut rows = Vec::new();
    let mut final_rows = Vec::new();
    for (trial, &ts) in trial_seeds.iter().enumerate() {
        let mut vanilla_cfg = cfg.model_config(data.shape());
        vanilla_cfg.head = HeadKind::Vanilla;
        let vanilla = Vae::new(vanilla_cfg, derive_seed(ts, "init"))?;
        let split = if shared_init {
            Vae::twin_of(&vanilla, HeadKind::Split, derive_seed(ts, "init"))?
        } else {
            let mut c = cfg.model_config(data.shape());
            c.head = HeadKind::Split;
            Vae::new(c, derive_seed(ts, "init-split"))?
        };
        let mut tcfg = cfg.train_config();
        tcfg.seed = derive_seed(ts, "train");
        let mut twins = [Trainer::new(vanilla, tcfg.clone())?, Trainer::new(split, tcfg)?];
        for epoch in 1..=cfg.epochs {
            for t in twins.iter_mut() {
                let stats = t.train_epoch(data)?;
                info!(
                    "trial {trial} {:?} epoch {epoch}: total {:.4} active {}",
                    t.model.head_kind(),
                    stats.total,
                    stats.active_units
                );
                let eval_seed = derive_seed(ts, &format!("eval-{epoch}"));
                rows.extend(evaluate(&t.model, data, &reference, cfg, eval_seed, cfg.fid_epoch_samples, epoch, trial)?);
            }
        }
        for t in &twins {
            let eval_seed = derive_seed(ts, "eval-final");
            final_rows.extend(evaluate(&t.model, data, &reference, cfg, eval_seed, cfg.fid_samples, cfg.epochs, trial)?);
        }
    }
    let report = AblationReport {
        trial_seeds,
        summary: summarize(&rows),
        final_summary: summarize(&final_rows),
        rows,
        final_rows,
    };
    match report.branches_beat_composed() {
        Some(true) => info!("expected trend holds: both split branches score below the composed image"),
        _ => warn!("expected trend not observed: split branches do not both score below the composed image"),
    }
    Ok(report)
}

/// Runs the ablation and writes `ablation.csv`, `ablation_final.csv`,
/// `ablation_summary.csv` and `ablation_final_summary.csv`.
pub fn cmd_ablate(cfg: &RunConfig, trials: usize, shared_init: bool) -> Result<AblationReport> {
    cfg.validate()?;
    let data = cfg.load_dataset()?;
    cfg.validate_for(data.shape())?;
    let dir = cfg.resolved_output_dir();
    let _lock = RunLock::acquire(&dir)?;
    echo_config(cfg, &dir)?;
    let report = run_ablation(cfg, &data, trials, shared_init)?;
    let write = |name: &str, rows: &[AblationRow]| -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join(name))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    };
    write("ablation.csv", &report.rows)?;
    write("ablation_final.csv", &report.final_rows)?;
    for (name, rows) in [("ablation_summary.csv", &report.summary), ("ablation_final_summary.csv", &report.final_summary)] {
        let mut w = csv::Writer::from_path(dir.join(name))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    fs::write(dir.join("trial_seeds.json"), serde_json::to_string_pretty(&report.trial_seeds)?)?;
    Ok(report)
}
