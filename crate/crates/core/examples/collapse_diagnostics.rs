//! Per-unit KL and active-unit counts for vanilla and split twins.

use svae::data::{synth_dataset, SynthKind};
use svae::latent::{active_units, COLLAPSE_THRESHOLD};
use svae::loss::mean_kl_per_unit;
use svae::nn::{ArchConfig, ImageShape};
use svae::train::{TrainConfig, Trainer};
use svae::vae::{HeadKind, ModelConfig, Vae};

fn main() -> svae::Result<()> {
    let data = synth_dataset(SynthKind::Shapes, 512, 16, 4)?;
    let cfg = ModelConfig {
        image: ImageShape::new(16, 16, 1),
        latent_dim: 12,
        head: HeadKind::Vanilla,
        arch: ArchConfig { base_dim: 8, dense_block_width: 32, ..ArchConfig::default() },
    };
    let vanilla = Vae::new(cfg, 4)?;
    let split = Vae::twin_of(&vanilla, HeadKind::Split, 4)?;
    for model in [vanilla, split] {
        let kind = model.head_kind();
        let mut t = Trainer::new(model, TrainConfig { batch_size: 32, beta0: 4.0, ..TrainConfig::default() })?;
        for _ in 0..4 {
            t.train_epoch(&data)?;
        }
        let (mu, logvar) = t.model.encode(&data.images)?;
        let kl = mean_kl_per_unit(&mu, &logvar)?;
        let au = active_units(&kl, COLLAPSE_THRESHOLD)?;
        let bars: String = au.collapsed.iter().map(|c| if *c { '.' } else { '#' }).collect();
        println!("{kind:?}: {} active [{bars}]", au.count);
        println!("  per-unit kl {:.3?}", kl);
    }
    Ok(())
}
