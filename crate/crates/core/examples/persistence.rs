//! Saving and reloading checkpoints alongside matrix and grid files.

use svae::data::{
    export_grid, load_checkpoint, load_matrix, read_image, save_checkpoint, save_matrix, synth_dataset, SynthKind,
};
use svae::nn::{ArchConfig, ImageShape};
use svae::train::{TrainConfig, Trainer};
use svae::vae::{slice_rows, HeadKind, ModelConfig, Vae};

fn main() -> svae::Result<()> {
    let dir = std::env::temp_dir().join("svae-persistence");
    std::fs::create_dir_all(&dir)?;
    let data = synth_dataset(SynthKind::Shapes, 32, 16, 0)?;
    let cfg = ModelConfig {
        image: ImageShape::new(16, 16, 1),
        latent_dim: 4,
        head: HeadKind::Split,
        arch: ArchConfig { base_dim: 8, dense_block_width: 16, ..ArchConfig::default() },
    };
    let mut t = Trainer::new(Vae::new(cfg, 0)?, TrainConfig { batch_size: 16, ..TrainConfig::default() })?;
    t.train_epoch(&data)?;

    let ckpt_path = dir.join("model.ckpt");
    save_checkpoint(&t.checkpoint(), &ckpt_path)?;
    let back = load_checkpoint(&ckpt_path)?;
    let resumed = Trainer::resume(&back, t.config().clone())?;
    println!(
        "checkpoint: {} bytes, step {}, identical parameters: {}",
        std::fs::metadata(&ckpt_path)?.len(),
        resumed.state.step,
        resumed.model.params() == t.model.params()
    );

    let (mu, _) = t.model.encode(&data.images)?;
    let mat = dir.join("latents.mat");
    save_matrix(&mat, &mu)?;
    println!("latent matrix {:?} round trip exact: {}", mu.shape(), load_matrix(&mat)? == mu);

    let grid = dir.join("inputs.png");
    export_grid(&[slice_rows(&data.images, 0, 8)?, slice_rows(&data.images, 8, 16)?], &grid)?;
    println!("grid {:?} written to {}", read_image(&grid)?.shape(), grid.display());
    Ok(())
}
