//! Drives the harness from a TOML run configuration, like the `svae` binary.

use svae::harness::{cmd_encode, cmd_fit_gmm, cmd_generate, cmd_train, RunConfig, SamplerKind};

const CONFIG: &str = r#"
dataset = "synth:shapes"
synth_count = 256
synth_size = 16
model = "split"
latent_dim = 6
epochs = 2
batch_size = 32
gmm_components = 4

[arch]
base_dim = 8
dense_block_width = 32
"#;

fn main() -> svae::Result<()> {
    let dir = std::env::temp_dir().join("svae-run-config");
    let _ = std::fs::remove_dir_all(&dir);
    let mut cfg = RunConfig::from_toml(CONFIG)?;
    cfg.output_dir = dir.join("run");

    let report = cmd_train(&cfg)?;
    for e in &report.epochs {
        println!("epoch {}: total {:.3}", e.epoch, e.total);
    }
    let gmm = cmd_fit_gmm(&report.last, &cfg, &report.last)?;
    println!("mixture with {} components stored in {}", gmm.n_components(), report.last.display());
    let g = cmd_generate(&report.last, SamplerKind::Gmm, 20, 0, &dir.join("samples"), 10)?;
    println!("samples: {} and {}", g.images.display(), g.grid.display());
    let enc = cmd_encode(&report.last, &cfg, &dir.join("latents.mat"))?;
    println!("{}", serde_json::to_string(&enc)?);
    Ok(())
}
