//! Trains a small split model on synthetic shapes and writes a sample grid.
//!
//! `cargo run --release --example train_split_vae -- [OUT_DIR]`

use std::path::PathBuf;

use svae::data::{export_grid, synth_dataset, SynthKind};
use svae::nn::{ArchConfig, ImageShape};
use svae::train::{TrainConfig, Trainer};
use svae::vae::{generate, slice_rows, GenerationConfig, HeadKind, ModelConfig, Sampler, Vae};

fn main() -> svae::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("svae-train"));
    std::fs::create_dir_all(&out)?;
    let data = synth_dataset(SynthKind::Shapes, 512, 16, 0)?;
    let cfg = ModelConfig {
        image: ImageShape::new(16, 16, 1),
        latent_dim: 8,
        head: HeadKind::Split,
        arch: ArchConfig { base_dim: 8, dense_block_width: 32, ..ArchConfig::default() },
    };
    let mut trainer = Trainer::new(Vae::new(cfg, 0)?, TrainConfig { batch_size: 32, ..TrainConfig::default() })?;
    for _ in 0..5 {
        let s = trainer.train_epoch(&data)?;
        println!(
            "epoch {}: total {:.3} recon {:.3} kl {:.3} active units {}",
            s.epoch, s.total, s.recon, s.kl, s.active_units
        );
    }

    let g = generate(&trainer.model, &GenerationConfig { sampler: Sampler::Prior, count: 8, seed: 1 })?;
    let s = g.split.expect("split model");
    let rows = [&s.sigma_map, &s.x1, &s.x2, &s.composed].map(|t| slice_rows(t, 0, 8)).into_iter();
    let path = out.join("samples.png");
    export_grid(&rows.collect::<svae::Result<Vec<_>>>()?, &path)?;
    println!("rows: sigma, x1, x2, composed -> {}", path.display());
    Ok(())
}
