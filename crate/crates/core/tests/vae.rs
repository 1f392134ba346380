mod common;

use common::{model_config, rng, uniform};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};
use svae::latent::{CovarianceKind, GaussianMixture};
use svae::loss::total_loss_with_beta;
use svae::vae::{
    compose, generate, reparameterize, sample_latents, split_head, vanilla_head, GenerationConfig, HeadKind,
    LatentParams, Sampler, Vae,
};
use svae::{Tape, Tensor};

#[test]
fn zero_noise_returns_the_mean() {
    let p = LatentParams { mu: vec![0.3, -1.2, 4.0], logvar: vec![0.5, -2.0, 1.0] };
    assert_eq!(reparameterize(&p, &[0.0; 3]).unwrap(), p.mu);
}

#[test]
fn standard_posterior_passes_noise_through() {
    let p = LatentParams { mu: vec![0.0; 4], logvar: vec![0.0; 4] };
    assert_eq!(reparameterize(&p, &[1.0, 0.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn reparameterize_rejects_length_mismatch() {
    let p = LatentParams { mu: vec![0.0; 3], logvar: vec![0.0; 3] };
    assert!(reparameterize(&p, &[0.0; 2]).is_err());
}

#[test]
fn reparameterized_draws_have_the_posterior_moments() {
    let p = LatentParams { mu: vec![0.7, -1.5], logvar: vec![0.4, -1.0] };
    let mut r = rng(42);
    let n = 1_000_000;
    let mut sum = [0.0f64; 2];
    let mut sq = [0.0f64; 2];
    for _ in 0..n {
        let eps: [f64; 2] = [StandardNormal.sample(&mut r), StandardNormal.sample(&mut r)];
        let z = reparameterize(&p, &eps).unwrap();
        for j in 0..2 {
            sum[j] += z[j];
            sq[j] += z[j] * z[j];
        }
    }
    for j in 0..2 {
        let mean = sum[j] / n as f64;
        let var = sq[j] / n as f64 - mean * mean;
        assert!((mean - p.mu[j]).abs() < 0.01, "mean {mean}");
        let want = p.logvar[j].exp();
        assert!((var / want - 1.0).abs() < 0.01, "var {var} vs {want}");
    }
}

#[test]
fn split_head_emits_one_plus_two_c_channels() {
    assert_eq!(HeadKind::Split.head_channels(1), 3);
    assert_eq!(HeadKind::Split.head_channels(3), 7);
    assert_eq!(HeadKind::Vanilla.head_channels(1), 1);
    for c in [1, 3] {
        let model = Vae::new(model_config(16, c, 4, HeadKind::Split, 8), 0).unwrap();
        let k = model.params().get("head.kernel").unwrap();
        assert_eq!(*k.shape().last().unwrap(), 1 + 2 * c);
    }
}

#[test]
fn split_head_rejects_wrong_channel_count() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(&[1, 2, 2, 4]));
    assert!(split_head(&mut tape, l, 1).is_err());
    assert!(vanilla_head(&mut tape, l, 3).is_err());
}

#[test]
fn saturated_sigma_selects_the_first_branch() {
    let mut r = rng(5);
    let c = 3;
    let mut logits = uniform(&[2, 4, 4, 1 + 2 * c], -3.0, 3.0, &mut r);
    for px in logits.data_mut().chunks_mut(1 + 2 * c) {
        px[0] = 20.0;
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let s = split_head(&mut tape, l, c).unwrap().values(&tape);
    assert!(s.sigma_map.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    assert!(common::max_abs_diff(s.composed.data(), s.x1.data()) < 1e-6);
}

#[test]
fn vanilla_head_is_strictly_inside_unit_interval() {
    let mut tape = Tape::new();
    let logits = Tensor::new(vec![1, 1, 4, 1], vec![-1000.0, -5.0, 5.0, 1000.0]).unwrap();
    let l = tape.constant(logits);
    let x = vanilla_head(&mut tape, l, 1).unwrap();
    assert_eq!(tape.shape(x), &[1, 1, 4, 1]);
    assert!(tape.value(x).data().iter().all(|v| *v > 0.0 && *v < 1.0));
}

#[test]
fn compose_hand_cases() {
    let x1 = uniform(&[1, 3, 3, 2], 0.0, 1.0, &mut rng(1));
    let x2 = uniform(&[1, 3, 3, 2], 0.0, 1.0, &mut rng(2));
    assert_eq!(compose(&Tensor::full(&[1, 3, 3, 1], 1.0), &x1, &x2).unwrap(), x1);
    let half = compose(&Tensor::full(&[1, 3, 3, 1], 0.5), &Tensor::zeros(&[1, 3, 3, 2]), &Tensor::full(&[1, 3, 3, 2], 1.0));
    assert!(half.unwrap().data().iter().all(|v| *v == 0.5));
}

#[test]
fn compose_matches_loop_oracle() {
    let mut r = rng(3);
    let (n, h, w, c) = (2, 5, 4, 3);
    let sigma = uniform(&[n, h, w, 1], 0.0, 1.0, &mut r);
    let x1 = uniform(&[n, h, w, c], -2.0, 2.0, &mut r);
    let x2 = uniform(&[n, h, w, c], -2.0, 2.0, &mut r);
    let got = compose(&sigma, &x1, &x2).unwrap();
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let p = (b * h + i) * w + j;
                let s = sigma.data()[p];
                for ch in 0..c {
                    let q = p * c + ch;
                    let want = s * x1.data()[q] + (1.0 - s) * x2.data()[q];
                    assert!((got.data()[q] - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn compose_rejects_bad_inputs() {
    let x = Tensor::zeros(&[1, 2, 2, 1]);
    assert!(compose(&Tensor::full(&[1, 2, 2, 1], 1.5), &x, &x).is_err());
    assert!(compose(&Tensor::full(&[1, 2, 2, 1], 0.5), &x, &Tensor::zeros(&[1, 2, 2, 2])).is_err());
    assert!(compose(&Tensor::full(&[1, 3, 2, 1], 0.5), &x, &x).is_err());
}

#[test]
fn twins_share_pre_head_activations() {
    let vanilla = Vae::new(model_config(16, 1, 6, HeadKind::Vanilla, 8), 7).unwrap();
    let split = Vae::twin_of(&vanilla, HeadKind::Split, 7).unwrap();
    let z = uniform(&[3, 6], -2.0, 2.0, &mut rng(8));
    assert_eq!(vanilla.decoder_features(&z).unwrap(), split.decoder_features(&z).unwrap());
}

#[test]
fn generation_is_deterministic_per_seed() {
    let model = Vae::new(model_config(16, 1, 6, HeadKind::Split, 8), 1).unwrap();
    let cfg = GenerationConfig { sampler: Sampler::Prior, count: 25, seed: 99 };
    let a = generate(&model, &cfg).unwrap();
    let b = generate(&model, &cfg).unwrap();
    assert_eq!(a.images, b.images);
    assert_eq!(a.latents.shape(), &[25, 6]);
    assert_eq!(a.images.shape(), &[25, 16, 16, 1]);
    let parts = a.split.unwrap();
    assert_eq!(parts.sigma_map.shape(), &[25, 16, 16, 1]);
    let other = generate(&model, &GenerationConfig { seed: 100, ..cfg }).unwrap();
    assert_ne!(a.images, other.images);
}

#[test]
fn prior_latents_look_standard_normal() {
    let z = sample_latents(4, &GenerationConfig { sampler: Sampler::Prior, count: 20_000, seed: 3 }).unwrap();
    let n = z.shape()[0] as f64;
    for j in 0..4 {
        let col: Vec<f64> = z.data().chunks(4).map(|r| r[j]).collect();
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.03 && (var - 1.0).abs() < 0.05, "{mean} {var}");
    }
}

#[test]
fn one_component_mixture_sampler_has_its_moments() {
    let cov = vec![2.0, 0.6, 0.6, 0.5];
    let gmm = GaussianMixture::from_parts(CovarianceKind::Full, vec![1.0], vec![vec![1.0, -2.0]], vec![cov.clone()]).unwrap();
    let z = sample_latents(2, &GenerationConfig { sampler: Sampler::Gmm(&gmm), count: 100_000, seed: 4 }).unwrap();
    let n = z.shape()[0] as f64;
    let rows: Vec<&[f64]> = z.data().chunks(2).collect();
    let mean: Vec<f64> = (0..2).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    assert!((mean[0] - 1.0).abs() < 0.02 && (mean[1] + 2.0).abs() < 0.02, "{mean:?}");
    for a in 0..2 {
        for b in 0..2 {
            let c = rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / n;
            assert!((c - cov[a * 2 + b]).abs() < 0.03, "cov[{a}{b}] = {c}");
        }
    }
    let wrong = sample_latents(3, &GenerationConfig { sampler: Sampler::Gmm(&gmm), count: 4, seed: 0 });
    assert!(wrong.is_err());
}

#[test]
fn reconstruction_gradient_reaches_all_head_groups() {
    let c = 3;
    let mut r = rng(12);
    let mut tape = Tape::new();
    let logits = tape.leaf(uniform(&[2, 4, 4, 1 + 2 * c], -2.0, 2.0, &mut r), true);
    let target = tape.constant(uniform(&[2, 4, 4, c], 0.0, 1.0, &mut r));
    let s = split_head(&mut tape, logits, c).unwrap();
    let loss = svae::loss::recon_loss(&mut tape, target, s.composed).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(logits).unwrap();
    let mut norms = [0.0f64; 3];
    for px in g.chunks(1 + 2 * c) {
        norms[0] += px[0] * px[0];
        norms[1] += px[1..1 + c].iter().map(|v| v * v).sum::<f64>();
        norms[2] += px[1 + c..].iter().map(|v| v * v).sum::<f64>();
    }
    assert!(norms.iter().all(|n| *n > 0.0), "{norms:?}");

    let mut model = Vae::new(model_config(16, c, 4, HeadKind::Split, 8), 2).unwrap();
    let x = uniform(&[2, 16, 16, c], 0.0, 1.0, &mut r);
    let noise = uniform(&[2, 4], -1.0, 1.0, &mut r);
    let mut tape = Tape::new();
    let fwd = model.forward_train(&mut tape, x, noise).unwrap();
    let (vars, _) = total_loss_with_beta(&mut tape, &fwd, 1.0).unwrap();
    tape.backward(vars.total).unwrap();
    let idx = model.params().names().iter().position(|n| n == "head.kernel").unwrap();
    let gk = tape.grad(fwd.params[idx]).unwrap();
    let out = 1 + 2 * c;
    let group = |range: std::ops::Range<usize>| {
        gk.chunks(out).map(|row| row[range.clone()].iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
    };
    assert!(group(0..1) > 0.0 && group(1..1 + c) > 0.0 && group(1 + c..out) > 0.0);
}

fn triple() -> impl Strategy<Value = (Vec<u32>, Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|n| {
        (
            proptest::collection::vec(0u32..=(1 << 24), n),
            proptest::collection::vec(-5.0f64..5.0, n),
            proptest::collection::vec(-5.0f64..5.0, n),
        )
    })
}

fn as_tensor(v: Vec<f64>) -> Tensor {
    let n = v.len();
    Tensor::new(vec![1, 1, n, 1], v).unwrap()
}

proptest! {
    #[test]
    fn composing_a_branch_with_itself_is_identity((s, a, _) in triple(), f in 0.0f64..=1.0) {
        let sigma = as_tensor(s.iter().map(|v| *v as f64 / (1u64 << 24) as f64 * f).collect());
        let x = as_tensor(a);
        prop_assert_eq!(compose(&sigma, &x, &x).unwrap(), x);
    }

    #[test]
    fn swapping_branches_mirrors_sigma((s, a, b) in triple()) {
        let scale = (1u64 << 24) as f64;
        let sigma = as_tensor(s.iter().map(|v| *v as f64 / scale).collect());
        let flipped = as_tensor(s.iter().map(|v| 1.0 - *v as f64 / scale).collect());
        let (x1, x2) = (as_tensor(a), as_tensor(b));
        let lhs = compose(&flipped, &x2, &x1).unwrap();
        let rhs = compose(&sigma, &x1, &x2).unwrap();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn composed_value_is_a_convex_combination((s, a, b) in triple(), f in 0.0f64..=1.0) {
        let sigma = as_tensor(s.iter().map(|v| *v as f64 / (1u64 << 24) as f64 * f).collect());
        let (x1, x2) = (as_tensor(a), as_tensor(b));
        let out = compose(&sigma, &x1, &x2).unwrap();
        for ((o, p), q) in out.data().iter().zip(x1.data()).zip(x2.data()) {
            prop_assert!(*o >= p.min(*q) && *o <= p.max(*q));
        }
    }
}
