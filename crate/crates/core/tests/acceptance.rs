//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Built with `harness = false`; `cargo test --test acceptance` runs every
//! criterion and exits non-zero if any hard criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{model_config, rng, uniform, weighted_sum};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use svae::data::{
    decode_checkpoint, encode_checkpoint, export_grid, load_checkpoint, load_matrix, read_image, save_checkpoint,
    save_matrix, synth_dataset, SynthKind, GRID_MARGIN,
};
use svae::fid::{fid_from_features, frechet_distance, ExtractorSpec, FeatureMatrix, GaussianStats};
use svae::harness::{cmd_generate, cmd_train, run_ablation, RunConfig, SamplerKind, Variant};
use svae::latent::{active_units, fit_gmm, CovarianceKind, GmmConfig, COLLAPSE_THRESHOLD};
use svae::loss::{kl_gaussian, mean_kl_per_unit, total_loss_with_beta};
use svae::nn::Activation;
use svae::tensor::{grad_check, grad_check_noise_aware, Padding, RunningStats};
use svae::train::{TrainConfig, Trainer};
use svae::vae::{compose, generate, GenerationConfig, HeadKind, LatentParams, Sampler, Vae};
use svae::{Tape, Tensor, Var};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

struct Criterion {
    id: usize,
    title: &'static str,
    budget: Duration,
    soft: bool,
}

struct Outcome {
    passed: bool,
    soft: bool,
}

fn run(c: Criterion, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let result = f();
    let elapsed = start.elapsed();
    let (passed, detail) = match result {
        Ok(d) if elapsed <= c.budget => (true, d),
        Ok(d) => (false, format!("{d}; over the time budget")),
        Err(e) => (false, e),
    };
    let tag = match (passed, c.soft) {
        (true, _) => "PASS",
        (false, false) => "FAIL",
        (false, true) => "FAIL (soft)",
    };
    println!(
        "{tag} [{}] {}: {detail} ({:.1} s of {} s)",
        c.id,
        c.title,
        elapsed.as_secs_f64(),
        c.budget.as_secs()
    );
    Outcome { passed, soft: c.soft }
}

type Inputs = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
type Op = Box<dyn Fn(&mut Tape, &[Var]) -> svae::Result<Var>>;

fn op_table() -> Vec<(&'static str, Inputs, Op)> {
    fn u(shape: &'static [usize], lo: f64, hi: f64) -> impl Fn(&mut ChaCha8Rng) -> Tensor {
        move |r| uniform(shape, lo, hi, r)
    }
    let away = |shape: &'static [usize]| move |r: &mut ChaCha8Rng| common::away_from_zero(shape, 1e-3, r);
    vec![
        (
            "conv2d same",
            Box::new(move |r| vec![u(&[2, 5, 5, 2], -1.0, 1.0)(r), u(&[3, 3, 2, 3], -1.0, 1.0)(r)]),
            Box::new(|t, v| t.conv2d(v[0], v[1], 1, Padding::Same)),
        ),
        (
            "conv2d stride 2",
            Box::new(move |r| vec![u(&[2, 6, 6, 2], -1.0, 1.0)(r), u(&[3, 3, 2, 2], -1.0, 1.0)(r)]),
            Box::new(|t, v| t.conv2d(v[0], v[1], 2, Padding::Same)),
        ),
        (
            "conv2d valid",
            Box::new(move |r| vec![u(&[1, 5, 4, 1], -1.0, 1.0)(r), u(&[2, 2, 1, 2], -1.0, 1.0)(r)]),
            Box::new(|t, v| t.conv2d(v[0], v[1], 1, Padding::Valid)),
        ),
        (
            "dense",
            Box::new(move |r| vec![u(&[3, 4], -1.0, 1.0)(r), u(&[4, 5], -1.0, 1.0)(r), u(&[5], -1.0, 1.0)(r)]),
            Box::new(|t, v| t.dense(v[0], v[1], v[2])),
        ),
        (
            "batch_norm train",
            Box::new(move |r| vec![u(&[4, 2, 2, 3], -2.0, 2.0)(r), u(&[3], 0.5, 1.5)(r), u(&[3], -1.0, 1.0)(r)]),
            Box::new(|t, v| t.batch_norm(v[0], v[1], v[2], &mut RunningStats::new(3), true)),
        ),
        (
            "batch_norm eval",
            Box::new(move |r| vec![u(&[2, 2, 2, 3], -2.0, 2.0)(r), u(&[3], 0.5, 1.5)(r), u(&[3], -1.0, 1.0)(r)]),
            Box::new(|t, v| {
                let mut s = RunningStats { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 1.5, 2.0] };
                t.batch_norm(v[0], v[1], v[2], &mut s, false)
            }),
        ),
        ("relu", Box::new(move |r| vec![away(&[3, 7])(r)]), Box::new(|t, v| t.relu(v[0]))),
        ("leaky_relu", Box::new(move |r| vec![away(&[3, 7])(r)]), Box::new(|t, v| t.leaky_relu(v[0], 0.2))),
        ("sigmoid", Box::new(move |r| vec![u(&[3, 7], -4.0, 4.0)(r)]), Box::new(|t, v| t.sigmoid(v[0]))),
        ("exp", Box::new(move |r| vec![u(&[3, 7], -2.0, 2.0)(r)]), Box::new(|t, v| t.exp(v[0]))),
        ("square", Box::new(move |r| vec![u(&[3, 7], -2.0, 2.0)(r)]), Box::new(|t, v| t.square(v[0]))),
        ("affine", Box::new(move |r| vec![u(&[3, 7], -2.0, 2.0)(r)]), Box::new(|t, v| t.affine(v[0], -1.7, 0.3))),
        ("scale", Box::new(move |r| vec![u(&[3, 7], -2.0, 2.0)(r)]), Box::new(|t, v| t.scale(v[0], 2.5))),
        (
            "add",
            Box::new(move |r| vec![u(&[2, 3, 3, 2], -1.0, 1.0)(r), u(&[2, 3, 3, 2], -1.0, 1.0)(r)]),
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        (
            "sub",
            Box::new(move |r| vec![u(&[2, 3, 3, 2], -1.0, 1.0)(r), u(&[2, 3, 3, 2], -1.0, 1.0)(r)]),
            Box::new(|t, v| t.sub(v[0], v[1])),
        ),
        (
            "mul",
            Box::new(move |r| vec![u(&[2, 3, 3, 2], -1.0, 1.0)(r), u(&[2, 3, 3, 2], -1.0, 1.0)(r)]),
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        (
            "mul broadcast",
            Box::new(move |r| vec![u(&[2, 3, 3, 3], -1.0, 1.0)(r), u(&[2, 3, 3, 1], -1.0, 1.0)(r)]),
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        (
            "add_bias",
            Box::new(move |r| vec![u(&[2, 3, 3, 4], -1.0, 1.0)(r), u(&[4], -1.0, 1.0)(r)]),
            Box::new(|t, v| t.add_bias(v[0], v[1])),
        ),
        (
            "global_avg_pool",
            Box::new(move |r| vec![u(&[2, 3, 4, 3], -1.0, 1.0)(r)]),
            Box::new(|t, v| t.global_avg_pool(v[0])),
        ),
        ("upsample2x", Box::new(move |r| vec![u(&[2, 3, 3, 2], -1.0, 1.0)(r)]), Box::new(|t, v| t.upsample2x(v[0]))),
        ("reshape", Box::new(move |r| vec![u(&[2, 3, 4], -1.0, 1.0)(r)]), Box::new(|t, v| t.reshape(v[0], &[6, 4]))),
        (
            "sum",
            Box::new(move |r| vec![u(&[2, 5], -1.0, 1.0)(r)]),
            Box::new(|t, v| {
                let sq = t.square(v[0])?;
                t.sum(sq)
            }),
        ),
        (
            "mean",
            Box::new(move |r| vec![u(&[2, 5], -1.0, 1.0)(r)]),
            Box::new(|t, v| {
                let sq = t.square(v[0])?;
                t.mean(sq)
            }),
        ),
        (
            "channel_slice",
            Box::new(move |r| vec![u(&[2, 3, 3, 5], -1.0, 1.0)(r)]),
            Box::new(|t, v| t.channel_slice(v[0], 1, 3)),
        ),
        ("crop", Box::new(move |r| vec![u(&[2, 6, 6, 2], -1.0, 1.0)(r)]), Box::new(|t, v| t.crop(v[0], 1, 2, 4, 3))),
        (
            "compose",
            Box::new(move |r| {
                vec![u(&[2, 3, 3, 1], 0.05, 0.95)(r), u(&[2, 3, 3, 3], 0.0, 1.0)(r), u(&[2, 3, 3, 3], 0.0, 1.0)(r)]
            }),
            Box::new(|t, v| t.compose(v[0], v[1], v[2])),
        ),
    ]
}

fn toy_model_error(head: HeadKind, activation: Activation) -> Result<f64, String> {
    let mut cfg = model_config(8, 1, 2, head, 2);
    cfg.arch.dense_block_width = 4;
    cfg.arch.activation = activation;
    let model = ok(Vae::new(cfg, 1))?;
    let x = ok(synth_dataset(SynthKind::Shapes, 4, 8, 0))?.images;
    let noise = uniform(&[4, 2], -1.5, 1.5, &mut rng(12));
    ok(grad_check_noise_aware(
        |tape: &mut Tape, v: &[Var]| {
            let fwd = model.forward_with(tape, v, x.clone(), noise.clone(), true)?;
            Ok(total_loss_with_beta(tape, &fwd, 3.0)?.0.total)
        },
        model.params().tensors(),
        1e-6,
    ))
}

fn gradient_correctness() -> Check {
    let mut worst_op = (0.0f64, "");
    for (name, inputs, op) in op_table() {
        for trial in 0..10u64 {
            let xs = inputs(&mut rng(1000 + trial));
            let err = ok(grad_check(
                |t: &mut Tape, v: &[Var]| {
                    let y = op(t, v)?;
                    weighted_sum(t, y, trial)
                },
                &xs,
                1e-6,
            ))?;
            ensure!(err < 1e-4, "{name}: relative error {err:e}");
            if err > worst_op.0 {
                worst_op = (err, name);
            }
        }
    }
    let mut worst_model: f64 = 0.0;
    for (head, act) in [
        (HeadKind::Split, Activation::Relu),
        (HeadKind::Split, Activation::LeakyRelu),
        (HeadKind::Vanilla, Activation::Relu),
    ] {
        let err = toy_model_error(head, act)?;
        ensure!(err < 1e-4, "toy {head:?}/{act:?} model: relative error {err:e}");
        worst_model = worst_model.max(err);
    }
    Ok(format!(
        "worst op error {:.1e} ({}); worst full toy model error {worst_model:.1e}",
        worst_op.0, worst_op.1
    ))
}

/// Monte-Carlo mean and standard error of `log q(z) - log p(z)`.
fn mc_kl(p: &LatentParams, n: usize, r: &mut impl Rng) -> (f64, f64) {
    let sd: Vec<f64> = p.logvar.iter().map(|lv| (0.5 * lv).exp()).collect();
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let mut v = 0.0;
        for j in 0..p.mu.len() {
            let e: f64 = StandardNormal.sample(r);
            let z = p.mu[j] + sd[j] * e;
            v += -0.5 * (p.logvar[j] + e * e) + 0.5 * z * z;
        }
        s += v;
        s2 += v * v;
    }
    let mean = s / n as f64;
    (mean, ((s2 / n as f64 - mean * mean) / n as f64).sqrt())
}

fn closed_form_kl() -> Check {
    let (zero, per) = ok(kl_gaussian(&LatentParams { mu: vec![0.0, 0.0], logvar: vec![0.0, 0.0] }))?;
    ensure!(zero == 0.0 && per.iter().all(|v| *v == 0.0), "KL at the prior is {zero}");
    let mut r = rng(2);
    let (mut beyond, mut worst) = (0, 0.0f64);
    for _ in 0..100 {
        let p = LatentParams {
            mu: (0..2).map(|_| r.random_range(-2.0..2.0)).collect(),
            logvar: (0..2).map(|_| r.random_range(-2.0..1.0)).collect(),
        };
        let (kl, _) = ok(kl_gaussian(&p))?;
        let (mc, se) = mc_kl(&p, 1_000_000, &mut r);
        let z = (mc - kl).abs() / se;
        ensure!(z < 5.0, "closed form {kl}, estimate {mc} ± {se}");
        beyond += usize::from(z >= 3.0);
        worst = worst.max(z);
    }
    ensure!(beyond <= 2, "{beyond} of 100 estimates beyond 3 standard errors (largest {worst:.2})");
    Ok(format!("{beyond} of 100 beyond 3 SE (expected ~0.27), largest deviation {worst:.2} SE; exact 0 at the prior"))
}

fn random_matrix(d: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |_, _| r.random_range(-1.0..1.0))
}

fn frechet() -> Check {
    let mut r = rng(3);
    let mut worst_same: f64 = 0.0;
    for _ in 0..20 {
        let a = random_matrix(6, &mut r);
        let s = GaussianStats { mu: DVector::from_fn(6, |_, _| r.random_range(-1.0..1.0)), cov: a.transpose() * a };
        worst_same = worst_same.max(ok(frechet_distance(&s, &s))?.fid.abs());
    }
    ensure!(worst_same <= 1e-6, "identical stats give {worst_same:e}");
    let mut worst_diag: f64 = 0.0;
    for _ in 0..50 {
        let d = r.random_range(1..9);
        let v = |r: &mut ChaCha8Rng, lo: f64, hi: f64| (0..d).map(|_| r.random_range(lo..hi)).collect::<Vec<f64>>();
        let (m1, m2, c1, c2) = (v(&mut r, -3.0, 3.0), v(&mut r, -3.0, 3.0), v(&mut r, 0.0, 5.0), v(&mut r, 0.0, 5.0));
        let want: f64 = m1.iter().zip(&m2).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            + c1.iter().zip(&c2).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum::<f64>();
        let s1 = GaussianStats { mu: DVector::from_vec(m1), cov: DMatrix::from_diagonal(&DVector::from_vec(c1)) };
        let s2 = GaussianStats { mu: DVector::from_vec(m2), cov: DMatrix::from_diagonal(&DVector::from_vec(c2)) };
        worst_diag = worst_diag.max((ok(frechet_distance(&s1, &s2))?.fid - want).abs());
    }
    ensure!(worst_diag <= 1e-8, "diagonal closed form off by {worst_diag:e}");
    let mut worst_rot: f64 = 0.0;
    for _ in 0..20 {
        let d = 5;
        let a = uniform(&[60, d], -1.0, 1.0, &mut r);
        let b = uniform(&[60, d], -0.5, 1.5, &mut r);
        let q = random_matrix(d, &mut r).qr().q();
        let rotate = |t: &Tensor| -> Result<FeatureMatrix, String> {
            let x = DMatrix::from_row_slice(60, d, t.data()) * &q;
            let data = (0..60).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| x[(i, j)]).collect();
            ok(FeatureMatrix::new(ok(Tensor::new(vec![60, d], data))?))
        };
        let base = ok(fid_from_features(&ok(FeatureMatrix::new(a.clone()))?, &ok(FeatureMatrix::new(b.clone()))?))?.fid;
        let rotated = ok(fid_from_features(&rotate(&a)?, &rotate(&b)?))?.fid;
        worst_rot = worst_rot.max((rotated - base).abs());
    }
    ensure!(worst_rot <= 1e-6, "rotation changes the score by {worst_rot:e}");
    Ok(format!(
        "identical {worst_same:.1e}; diagonal closed form {worst_diag:.1e} over 50 cases; rotation {worst_rot:.1e}"
    ))
}

fn composition() -> Check {
    let mut r = rng(4);
    let dyadic = (1u64 << 24) as f64;
    for case in 0..1000 {
        let (n, h, w, c) = (r.random_range(1..3), r.random_range(1..5), r.random_range(1..5), *[1, 3].get(case % 2).unwrap());
        let x1 = uniform(&[n, h, w, c], -2.0, 2.0, &mut r);
        let x2 = uniform(&[n, h, w, c], -2.0, 2.0, &mut r);
        let ones = Tensor::full(&[n, h, w, 1], 1.0);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure!(bits(&ok(compose(&ones, &x1, &x2))?) == bits(&x1), "sigma = 1 does not give x1 exactly (case {case})");
        let ints: Vec<u32> = (0..n * h * w).map(|_| r.random_range(0..=1u32 << 24)).collect();
        let sigma = ok(Tensor::new(vec![n, h, w, 1], ints.iter().map(|k| *k as f64 / dyadic).collect()))?;
        let flipped = ok(Tensor::new(vec![n, h, w, 1], ints.iter().map(|k| 1.0 - *k as f64 / dyadic).collect()))?;
        let out = ok(compose(&sigma, &x1, &x2))?;
        ensure!(bits(&ok(compose(&flipped, &x2, &x1))?) == bits(&out), "swap symmetry broken (case {case})");
        let general = uniform(&[n, h, w, 1], 0.0, 1.0, &mut r);
        for t in [out, ok(compose(&general, &x1, &x2))?] {
            for ((o, a), b) in t.data().iter().zip(x1.data()).zip(x2.data()) {
                ensure!(*o >= a.min(*b) && *o <= a.max(*b), "{o} outside [{a}, {b}] (case {case})");
            }
        }
    }
    for (channels, want) in [(1, 3), (3, 7)] {
        let got = HeadKind::Split.head_channels(channels);
        ensure!(got == want, "split head emits {got} channels for C = {channels}");
        let model = ok(Vae::new(model_config(8, channels, 2, HeadKind::Split, 4), 0))?;
        let k = model.params().get("head.kernel").ok_or("no head.kernel")?;
        ensure!(k.shape().last() == Some(&want), "head kernel {:?} for C = {channels}", k.shape());
        let d = ok(model.decode(&Tensor::zeros(&[2, 2])))?;
        let s = d.split.ok_or("split model without split output")?;
        ensure!(s.sigma_map.shape() == [2, 8, 8, 1] && s.x1.shape() == [2, 8, 8, channels], "split output shapes");
    }
    Ok("1000 cases: sigma = 1 bitwise, dyadic swap bitwise, convex bound; head 3 / 7 channels".into())
}

fn gmm_em() -> Check {
    let mut r = rng(5);
    let mut iters = 0;
    for problem in 0..20 {
        let k = r.random_range(2..6);
        let d = r.random_range(2..5);
        let per = r.random_range(60..150);
        let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| r.random_range(-4.0..4.0)).collect()).collect();
        let sd = r.random_range(0.3..1.5);
        let noise = ok(Normal::new(0.0, sd))?;
        let data: Vec<f64> = (0..per).flat_map(|_| centers.iter().flatten().copied().collect::<Vec<_>>())
            .map(|m| m + noise.sample(&mut r))
            .collect();
        let x = ok(Tensor::new(vec![per * k, d], data))?;
        let kind = if problem % 2 == 0 { CovarianceKind::Full } else { CovarianceKind::Diagonal };
        let cfg = GmmConfig { n_components: k, max_iters: 100, tol: 1e-10, kind, seed: problem };
        let gmm = ok(fit_gmm(&x, &cfg))?;
        for w in gmm.log_likelihood_trace.windows(2) {
            ensure!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "problem {problem}: {} -> {}", w[0], w[1]);
        }
        iters += gmm.log_likelihood_trace.len();
    }
    let noise = ok(Normal::new(0.0, 0.1f64.sqrt()))?;
    let data: Vec<f64> = (0..500)
        .flat_map(|_| [5.0, 0.0, -5.0, 0.0])
        .map(|m| m + noise.sample(&mut r))
        .collect();
    let gmm = ok(fit_gmm(&ok(Tensor::new(vec![1000, 2], data))?, &GmmConfig { n_components: 2, seed: 7, ..GmmConfig::default() }))?;
    let mut found: Vec<(f64, f64, f64)> = gmm.means.iter().zip(&gmm.weights).map(|(m, w)| (m[0], m[1], *w)).collect();
    found.sort_by(|a, b| a.0.total_cmp(&b.0));
    for ((mx, my, w), want) in found.into_iter().zip([-5.0, 5.0]) {
        ensure!((mx - want).abs() < 0.1 && my.abs() < 0.1, "recovered mean ({mx}, {my})");
        ensure!((w - 0.5).abs() < 0.05, "recovered weight {w}");
    }
    Ok(format!("monotone over {iters} EM iterations on 20 problems; two clusters recovered"))
}

fn collapse_detection() -> Check {
    let mut model = ok(Vae::new(model_config(16, 1, 6, HeadKind::Split, 8), 6))?;
    let j = 2;
    for layer in ["encoder.mu", "encoder.logvar"] {
        let w = model.params_mut().get_mut(&format!("{layer}.weight")).ok_or("missing weight")?;
        let cols = w.shape()[1];
        for row in w.data_mut().chunks_mut(cols) {
            row[j] = 0.0;
        }
        model.params_mut().get_mut(&format!("{layer}.bias")).ok_or("missing bias")?.data_mut()[j] = 0.0;
    }
    let x = ok(synth_dataset(SynthKind::Shapes, 64, 16, 6))?.images;
    let (mu, logvar) = ok(model.encode(&x))?;
    let per_unit = ok(mean_kl_per_unit(&mu, &logvar))?;
    ensure!(per_unit[j] < 1e-9, "designated unit has KL {}", per_unit[j]);
    let au = ok(active_units(&per_unit, COLLAPSE_THRESHOLD))?;
    ensure!(au.collapsed[j], "designated unit not flagged");
    Ok(format!("unit {j} KL {:.1e}, flagged collapsed; {} of 6 units active", per_unit[j], au.count))
}

fn training_smoke(dir: &std::path::Path) -> Check {
    let mut cfg = RunConfig {
        output_dir: dir.join("train"),
        synth_count: 2000,
        synth_size: 16,
        latent_dim: 16,
        epochs: 20,
        model: HeadKind::Split,
        seed: 7,
        ..RunConfig::default()
    };
    cfg.arch.base_dim = 16;
    let report = ok(cmd_train(&cfg))?;
    let first = report.epochs.first().ok_or("no epochs")?.total;
    let last = report.epochs.last().ok_or("no epochs")?.total;
    ensure!(last <= 0.5 * first, "total loss {first:.3} -> {last:.3}");
    let out = dir.join("generated");
    let g = ok(cmd_generate(&report.last, SamplerKind::Prior, 100, 1, &out, 10))?;
    ensure!(g.grid.exists(), "grid not written");
    let sigma_grid = g.sigma_grid.ok_or("no sigma grid")?;
    ensure!(ok(read_image(&sigma_grid))?.len() > 0, "empty sigma grid");
    let model = ok(ok(load_checkpoint(&report.last))?.build_model())?;
    let gen = ok(generate(&model, &GenerationConfig { sampler: Sampler::Prior, count: 100, seed: 1 }))?;
    let sigma = gen.split.ok_or("no sigma maps")?.sigma_map;
    let px = sigma.len() / 100;
    let mut min_std = f64::INFINITY;
    for map in sigma.data().chunks(px) {
        let mean = map.iter().sum::<f64>() / px as f64;
        let std = (map.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / px as f64).sqrt();
        min_std = min_std.min(std);
    }
    ensure!(min_std > 0.01, "a generated sigma map has pixel std {min_std}");
    Ok(format!(
        "total {first:.2} -> {last:.2} ({:.0}% drop); smallest sigma-map pixel std {min_std:.3}; grids written",
        100.0 * (1.0 - last / first)
    ))
}

fn ablation_config() -> RunConfig {
    let mut cfg = RunConfig {
        synth_count: 1000,
        synth_size: 16,
        latent_dim: 16,
        epochs: 6,
        batch_size: 64,
        seed: 11,
        gmm_components: 10,
        fid_samples: 1000,
        fid_epoch_samples: 500,
        extractor: ExtractorSpec::Pca(64),
        ..RunConfig::default()
    };
    cfg.arch.base_dim = 8;
    cfg.arch.dense_block_width = 64;
    cfg
}

fn ablation(report_slot: &mut Option<svae::harness::AblationReport>) -> Check {
    let cfg = ablation_config();
    let data = ok(cfg.load_dataset())?;
    let report = ok(run_ablation(&cfg, &data, 3, true))?;
    let scored = [Variant::Vanilla, Variant::Split, Variant::SplitX1, Variant::SplitX2];
    let mut lines = Vec::new();
    for trial in 0..3 {
        let scores: Vec<f64> = scored.iter().map(|v| report.final_fid(trial, *v).unwrap_or(f64::NAN)).collect();
        ensure!(scores.iter().all(|s| s.is_finite()), "trial {trial}: scores {scores:?}");
        lines.push(format!("{:.2}/{:.2}/{:.2}/{:.2}", scores[0], scores[1], scores[2], scores[3]));
    }
    let again = ok(run_ablation(&cfg, &data, 1, true))?;
    let bits = |rows: &[svae::harness::AblationRow]| {
        rows.iter().filter(|r| r.trial == 0).map(|r| (r.epoch, r.variant, r.fid.to_bits(), r.active_units)).collect::<Vec<_>>()
    };
    ensure!(bits(&again.rows) == bits(&report.rows), "per-epoch scores differ on rerun");
    ensure!(bits(&again.final_rows) == bits(&report.final_rows), "final scores differ on rerun");
    let trend = match report.branches_beat_composed() {
        Some(true) => "branches below composed: yes",
        _ => "branches below composed: no",
    };
    let detail = format!("vanilla/split/x1/x2 per seed {}; reproducible; {trend}", lines.join(", "));
    *report_slot = Some(report);
    Ok(detail)
}

fn active_unit_trend(report: Option<&svae::harness::AblationReport>) -> Check {
    let report = report.ok_or("ablation did not produce a report")?;
    let mut wins = 0;
    let mut pairs = Vec::new();
    for trial in 0..3 {
        let v = report.final_active_units(trial, Variant::Vanilla).ok_or("missing vanilla row")?;
        let s = report.final_active_units(trial, Variant::Split).ok_or("missing split row")?;
        wins += usize::from(s >= v);
        pairs.push(format!("{s} vs {v}"));
    }
    let detail = format!("split vs vanilla active units {}", pairs.join(", "));
    ensure!(wins >= 2, "{detail}: split ahead in only {wins} of 3 seeds");
    Ok(detail)
}

fn persistence(dir: &std::path::Path) -> Check {
    let data = ok(synth_dataset(SynthKind::Shapes, 16, 16, 0))?;
    let model = ok(Vae::new(model_config(16, 1, 4, HeadKind::Split, 8), 3))?;
    let mut t = ok(Trainer::new(model, TrainConfig { batch_size: 16, seed: 3, ..TrainConfig::default() }))?;
    ok(t.step(data.images.clone()))?;
    let mut ckpt = t.checkpoint();
    let (mu, _) = ok(t.model.encode(&data.images))?;
    ckpt.gmm = Some(ok(fit_gmm(&mu, &GmmConfig { n_components: 2, ..GmmConfig::default() }))?);
    let path = dir.join("p.ckpt");
    ok(save_checkpoint(&ckpt, &path))?;
    let back = ok(load_checkpoint(&path))?;
    ensure!(back == ckpt, "checkpoint differs after reload");
    let bytes = ok(encode_checkpoint(&ckpt))?;
    ensure!(ok(encode_checkpoint(&ok(decode_checkpoint(&bytes))?))? == bytes, "checkpoint bytes differ");
    let rebuilt = ok(back.build_model())?;
    let bits = |m: &Vae| m.params().tensors().iter().flat_map(|x| x.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    ensure!(bits(&rebuilt) == bits(&t.model), "rebuilt parameters differ");

    let m = uniform(&[7, 5], -1e3, 1e3, &mut rng(10));
    let mpath = dir.join("m.mat");
    ok(save_matrix(&mpath, &m))?;
    let mb = ok(load_matrix(&mpath))?;
    ensure!(
        mb.shape() == m.shape() && mb.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "matrix differs after reload"
    );

    let mut r = rng(11);
    let q = Tensor::from_fn(&[3, 5, 4, 3], |_| f64::from(r.random_range(0..=255u8)) / 255.0);
    for ext in ["png", "ppm"] {
        let gpath = dir.join(format!("g.{ext}"));
        ok(export_grid(std::slice::from_ref(&q), &gpath))?;
        let img = ok(read_image(&gpath))?;
        let gw = 3 * 4 + 4 * GRID_MARGIN;
        for b in 0..3 {
            for y in 0..5 {
                for x in 0..4 {
                    for c in 0..3 {
                        let want = q.data()[((b * 5 + y) * 4 + x) * 3 + c];
                        let (gy, gx) = (GRID_MARGIN + y, GRID_MARGIN + b * (4 + GRID_MARGIN) + x);
                        let got = img.data()[(gy * gw + gx) * 3 + c];
                        ensure!(got == want, "{ext} grid pixel {got} vs {want}");
                    }
                }
            }
        }
    }
    Ok("checkpoint, matrix bitwise; 8-bit grids exact in png and ppm".into())
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temporary directory");
    let secs = Duration::from_secs;
    let c = |id, title, budget, soft| Criterion { id, title, budget: secs(budget), soft };
    let mut outcomes = vec![
        run(c(1, "gradient correctness", 60, false), gradient_correctness),
        run(c(2, "closed-form KL", 30, false), closed_form_kl),
        run(c(3, "Fréchet distance", 10, false), frechet),
        run(c(4, "composition contract", 5, false), composition),
        run(c(5, "GMM EM", 60, false), gmm_em),
        run(c(6, "collapse detection", 5, false), collapse_detection),
        run(c(7, "desk-scale training smoke", 15 * 60, false), || training_smoke(dir.path())),
    ];
    let mut report = None;
    outcomes.push(run(c(8, "directional ablation", 45 * 60, false), || ablation(&mut report)));
    outcomes.push(run(c(9, "active-unit trend", 60, true), || active_unit_trend(report.as_ref())));
    outcomes.push(run(c(10, "persistence", 5, false), || persistence(dir.path())));
    let hard_failures = outcomes.iter().filter(|o| !o.passed && !o.soft).count();
    println!("{} of {} criteria passed", outcomes.iter().filter(|o| o.passed).count(), outcomes.len());
    if hard_failures > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
