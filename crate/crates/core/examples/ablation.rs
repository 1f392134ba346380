//! A miniature vanilla/split ablation over two seeds.

use svae::fid::ExtractorSpec;
use svae::harness::{run_ablation, RunConfig};

fn main() -> svae::Result<()> {
    let mut cfg = RunConfig {
        synth_count: 256,
        synth_size: 16,
        latent_dim: 8,
        epochs: 2,
        batch_size: 32,
        gmm_components: 5,
        fid_samples: 256,
        fid_epoch_samples: 128,
        extractor: ExtractorSpec::Pca(16),
        ..RunConfig::default()
    };
    cfg.arch.base_dim = 8;
    cfg.arch.dense_block_width = 32;
    let data = cfg.load_dataset()?;
    let report = run_ablation(&cfg, &data, 2, true)?;
    println!("{:>10} {:>9} {:>7} {:>7}", "variant", "fid", "±", "active");
    for s in &report.final_summary {
        println!("{:>10} {:>9.3} {:>7.3} {:>7.1}", s.variant.to_string(), s.fid_mean, s.fid_std, s.active_units_mean);
    }
    println!("branches below composed image: {:?}", report.branches_beat_composed());
    Ok(())
}
