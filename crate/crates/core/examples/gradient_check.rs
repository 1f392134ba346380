//! Finite-difference checks for a single op and for a whole split model.

use svae::data::{synth_dataset, SynthKind};
use svae::loss::total_loss_with_beta;
use svae::nn::{ArchConfig, ImageShape};
use svae::tensor::{grad_check, grad_check_noise_aware, Padding, RunningStats};
use svae::vae::{HeadKind, ModelConfig, Vae};
use svae::{Tape, Tensor, Var};

fn main() -> svae::Result<()> {
    let x = Tensor::from_fn(&[2, 5, 5, 2], |i| ((i * 37 % 17) as f64 - 8.0) / 8.0);
    let k = Tensor::from_fn(&[3, 3, 2, 3], |i| ((i * 11 % 7) as f64 - 3.0) / 5.0);
    let err = grad_check(
        |t: &mut Tape, v: &[Var]| {
            let y = t.conv2d(v[0], v[1], 1, Padding::Same)?;
            let g = t.constant(Tensor::full(&[3], 1.2));
            let b = t.constant(Tensor::full(&[3], -0.1));
            let y = t.batch_norm(y, g, b, &mut RunningStats::new(3), true)?;
            let w = t.constant(Tensor::from_fn(&[2, 5, 5, 3], |i| 0.5 + (i % 7) as f64 / 7.0));
            let y = t.mul(y, w)?;
            t.sum(y)
        },
        &[x, k],
        1e-6,
    )?;
    println!("conv -> batch norm -> weighted sum: max relative error {err:.2e}");

    let cfg = ModelConfig {
        image: ImageShape::new(8, 8, 1),
        latent_dim: 2,
        head: HeadKind::Split,
        arch: ArchConfig { base_dim: 2, dense_block_width: 4, ..ArchConfig::default() },
    };
    let model = Vae::new(cfg, 1)?;
    let images = synth_dataset(SynthKind::Shapes, 4, 8, 0)?.images;
    let noise = Tensor::from_fn(&[4, 2], |i| (i as f64 - 3.5) / 3.0);
    let err = grad_check_noise_aware(
        |t: &mut Tape, v: &[Var]| {
            let fwd = model.forward_with(t, v, images.clone(), noise.clone(), true)?;
            Ok(total_loss_with_beta(t, &fwd, 3.0)?.0.total)
        },
        model.params().tensors(),
        1e-6,
    )?;
    println!("split model, {} parameter tensors: max relative error {err:.2e}", model.params().len());
    Ok(())
}
