//! Fits a mixture to encoded latents and compares prior and mixture sampling.

use svae::data::{synth_dataset, SynthKind};
use svae::fid::ExtractorSpec;
use svae::harness::FidReference;
use svae::latent::{fit_gmm, CovarianceKind, GmmConfig};
use svae::nn::{ArchConfig, ImageShape};
use svae::train::{TrainConfig, Trainer};
use svae::vae::{generate, GenerationConfig, HeadKind, ModelConfig, Sampler, Vae};

fn main() -> svae::Result<()> {
    let data = synth_dataset(SynthKind::Shapes, 512, 16, 3)?;
    let cfg = ModelConfig {
        image: ImageShape::new(16, 16, 1),
        latent_dim: 8,
        head: HeadKind::Vanilla,
        arch: ArchConfig { base_dim: 8, dense_block_width: 32, ..ArchConfig::default() },
    };
    let mut trainer = Trainer::new(Vae::new(cfg, 3)?, TrainConfig { batch_size: 32, ..TrainConfig::default() })?;
    for _ in 0..4 {
        trainer.train_epoch(&data)?;
    }
    let model = trainer.model;

    let (mu, _) = model.encode(&data.images)?;
    let gmm = fit_gmm(&mu, &GmmConfig { n_components: 10, kind: CovarianceKind::Full, ..GmmConfig::default() })?;
    println!(
        "{} components, {} EM iterations, mean log-likelihood {:.3}",
        gmm.n_components(),
        gmm.log_likelihood_trace.len(),
        gmm.log_likelihood_trace.last().unwrap()
    );
    let mut weights = gmm.weights.clone();
    weights.sort_by(|a, b| b.total_cmp(a));
    println!("largest weights {:.3?}", &weights[..3]);

    let reference = FidReference::new(&ExtractorSpec::Pca(32), &data.images, 0)?;
    for (name, sampler) in [("prior", Sampler::Prior), ("mixture", Sampler::Gmm(&gmm))] {
        let g = generate(&model, &GenerationConfig { sampler, count: 512, seed: 9 })?;
        println!("{name:>8}: fid {:.3}", reference.score(&g.images)?.fid);
    }
    Ok(())
}
