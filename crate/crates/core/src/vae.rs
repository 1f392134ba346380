//! The variational autoencoder: encoder, reparameterized sampling, decoder,
//! and either a plain output head or the split head that emits a blending map
//! plus two candidate images.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::latent::GaussianMixture;
use crate::nn::{ArchConfig, Conv, Ctx, Decoder, Encoder, ImageShape, ParamBuilder, ParamStore, StatsMode};
use crate::seed::rng_for;
use crate::tensor::{Tape, Tensor, Var};

/// Name prefix of the only parameters that differ between vanilla and split twins.
pub const HEAD_PREFIX: &str = "head.";

/// Rows decoded per tape during generation and encoding.
const INFERENCE_BATCH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Vanilla,
    Split,
}

impl HeadKind {
    /// Channels the final convolution emits for a `channels`-channel image.
    pub fn head_channels(self, channels: usize) -> usize {
        match self {
            HeadKind::Vanilla => channels,
            HeadKind::Split => 1 + 2 * channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: ImageShape,
    pub latent_dim: usize,
    pub head: HeadKind,
    #[serde(default)]
    pub arch: ArchConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.image.is_empty() {
            return Err(Error::Config("image extents must be positive".into()));
        }
        self.arch.validate()
    }
}

/// Posterior moments for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentParams {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

/// `mu + exp(logvar / 2) ⊙ noise`
pub fn reparameterize(params: &LatentParams, noise: &[f64]) -> Result<Vec<f64>> {
    if params.mu.len() != params.logvar.len() || noise.len() != params.mu.len() {
        return shape_err(
            "reparameterize",
            format!("mu {}, logvar {}, noise {}", params.mu.len(), params.logvar.len(), noise.len()),
        );
    }
    Ok(params
        .mu
        .iter()
        .zip(&params.logvar)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Differentiable form of [`reparameterize`]; `noise` is a constant leaf.
pub fn reparameterize_on_tape(tape: &mut Tape, mu: Var, logvar: Var, noise: Var) -> Result<Var> {
    if tape.shape(mu) != tape.shape(logvar) || tape.shape(mu) != tape.shape(noise) {
        return shape_err(
            "reparameterize",
            format!("{:?} / {:?} / {:?}", tape.shape(mu), tape.shape(logvar), tape.shape(noise)),
        );
    }
    let half = tape.scale(logvar, 0.5)?;
    let std = tape.exp(half)?;
    let spread = tape.mul(std, noise)?;
    tape.add(mu, spread)
}

/// The four image stacks of a split model, as values.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitOutput {
    pub sigma_map: Tensor,
    pub x1: Tensor,
    pub x2: Tensor,
    pub composed: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct SplitVars {
    pub sigma: Var,
    pub x1: Var,
    pub x2: Var,
    pub composed: Var,
}

impl SplitVars {
    pub fn values(&self, tape: &Tape) -> SplitOutput {
        SplitOutput {
            sigma_map: tape.value(self.sigma).clone(),
            x1: tape.value(self.x1).clone(),
            x2: tape.value(self.x2).clone(),
            composed: tape.value(self.composed).clone(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum HeadVars {
    Vanilla(Var),
    Split(SplitVars),
}

impl HeadVars {
    /// The image compared against the input: `x̂` for either head.
    pub fn reconstruction(&self) -> Var {
        match self {
            HeadVars::Vanilla(x) => *x,
            HeadVars::Split(s) => s.composed,
        }
    }
}

/// `sigma ⊙ x1 + (1 - sigma) ⊙ x2` on plain tensors.
pub fn compose(sigma: &Tensor, x1: &Tensor, x2: &Tensor) -> Result<Tensor> {
    crate::tensor::tape::compose_values(sigma, x1, x2)
}

/// Splits `1 + 2C` head logits into a logistic blending map and two logistic
/// images, then blends them.
pub fn split_head(tape: &mut Tape, logits: Var, channels: usize) -> Result<SplitVars> {
    let got = *tape.shape(logits).last().unwrap_or(&0);
    if got != 1 + 2 * channels {
        return shape_err(
            "split_head",
            format!("expected {} channels for C={channels}, got {got}", 1 + 2 * channels),
        );
    }
    let s = tape.channel_slice(logits, 0, 1)?;
    let sigma = tape.sigmoid(s)?;
    let a = tape.channel_slice(logits, 1, channels)?;
    let x1 = tape.sigmoid(a)?;
    let b = tape.channel_slice(logits, 1 + channels, channels)?;
    let x2 = tape.sigmoid(b)?;
    let composed = tape.compose(sigma, x1, x2)?;
    Ok(SplitVars { sigma, x1, x2, composed })
}

pub fn vanilla_head(tape: &mut Tape, logits: Var, channels: usize) -> Result<Var> {
    let got = *tape.shape(logits).last().unwrap_or(&0);
    if got != channels {
        return shape_err("vanilla_head", format!("expected {channels} channels, got {got}"));
    }
    tape.sigmoid(logits)
}

/// Everything recorded by one full encode-sample-decode pass.
pub struct Forward {
    pub params: Vec<Var>,
    pub input: Var,
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    /// Decoder trunk output, shared by both head kinds.
    pub features: Var,
    /// Head convolution output before any logistic squashing.
    pub logits: Var,
    pub head: HeadVars,
}

/// Result of decoding a batch of latents outside of training.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub images: Tensor,
    pub split: Option<SplitOutput>,
}

#[derive(Clone, Debug)]
pub struct Vae {
    config: ModelConfig,
    encoder: Encoder,
    decoder: Decoder,
    head: Conv,
    params: ParamStore,
}

impl Vae {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder::new(seed);
        let encoder = Encoder::new(&mut b, &config.arch, config.image, config.latent_dim);
        let decoder = Decoder::new(&mut b, &config.arch, config.image, config.latent_dim);
        let head_channels = config.head.head_channels(config.image.channels);
        let head = Conv::new(&mut b, "head", 3, decoder.out_channels(), head_channels, 1);
        Ok(Self {
            config,
            encoder,
            decoder,
            head,
            params: b.finish(),
        })
    }

    /// Builds the model, then adopts the trunk parameters of `other`.
    pub fn twin_of(other: &Vae, head: HeadKind, seed: u64) -> Result<Self> {
        let mut cfg = other.config.clone();
        cfg.head = head;
        let mut twin = Self::new(cfg, seed)?;
        for (name, t) in other.params.names().iter().zip(other.params.tensors()) {
            if !name.starts_with(HEAD_PREFIX) {
                *twin.params.get_mut(name).expect("same trunk layout") = t.clone();
            }
        }
        Ok(twin)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head_kind(&self) -> HeadKind {
        self.config.head
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn check_images(&self, x: &Tensor) -> Result<usize> {
        let (n, h, w, c) = x.nhwc()?;
        let img = self.config.image;
        if (h, w, c) != (img.height, img.width, img.channels) {
            return shape_err("vae", format!("expected {img:?}, got {h}x{w}x{c}"));
        }
        Ok(n)
    }

    fn run(&self, ctx: &mut Ctx<'_>, params: Vec<Var>, x: Tensor, noise: Tensor) -> Result<Forward> {
        let n = self.check_images(&x)?;
        if noise.shape() != [n, self.config.latent_dim] {
            return shape_err(
                "vae",
                format!("noise must be [{n}, {}], got {:?}", self.config.latent_dim, noise.shape()),
            );
        }
        let input = ctx.tape.constant(x);
        let (mu, logvar) = self.encoder.forward(ctx, input)?;
        let eps = ctx.tape.constant(noise);
        let z = reparameterize_on_tape(ctx.tape, mu, logvar, eps)?;
        let features = self.decoder.forward(ctx, z)?;
        let logits = self.head.forward(ctx, features)?;
        let head = self.apply_head(ctx.tape, logits)?;
        Ok(Forward { params, input, mu, logvar, z, features, logits, head })
    }

    fn apply_head(&self, tape: &mut Tape, logits: Var) -> Result<HeadVars> {
        let c = self.config.image.channels;
        Ok(match self.config.head {
            HeadKind::Vanilla => HeadVars::Vanilla(vanilla_head(tape, logits, c)?),
            HeadKind::Split => HeadVars::Split(split_head(tape, logits, c)?),
        })
    }

    /// Training-mode pass: batch statistics are used and running statistics updated.
    pub fn forward_train(&mut self, tape: &mut Tape, x: Tensor, noise: Tensor) -> Result<Forward> {
        let params = self.params.bind(tape);
        let mut stats = self.params.take_bn_stats();
        let result = {
            let mut ctx = Ctx::new(tape, &params, StatsMode::Train(&mut stats));
            self.run(&mut ctx, params.clone(), x, noise)
        };
        self.params.restore_bn_stats(stats);
        result
    }

    /// Evaluation-mode pass with running statistics; parameters still track gradients.
    pub fn forward_eval(&self, tape: &mut Tape, x: Tensor, noise: Tensor) -> Result<Forward> {
        let params = self.params.bind(tape);
        let mut ctx = Ctx::new(tape, &params, StatsMode::Eval(self.params.bn_stats()));
        self.run(&mut ctx, params.clone(), x, noise)
    }

    /// Full pass with caller-bound parameters (in [`ParamStore`] order).
    /// Training mode normalizes with batch statistics but leaves the stored
    /// running statistics untouched.
    pub fn forward_with(&self, tape: &mut Tape, params: &[Var], x: Tensor, noise: Tensor, train: bool) -> Result<Forward> {
        if params.len() != self.params.len() {
            return invalid(format!("expected {} parameter handles, got {}", self.params.len(), params.len()));
        }
        let mut scratch = self.params.bn_stats().to_vec();
        let stats = if train { StatsMode::Train(&mut scratch) } else { StatsMode::Eval(self.params.bn_stats()) };
        let mut ctx = Ctx::new(tape, params, stats);
        self.run(&mut ctx, params.to_vec(), x, noise)
    }

    /// Posterior moments `(mu, logvar)` for a batch of images, `[n, k]` each.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = self.check_images(x)?;
        let mut mus = Vec::new();
        let mut logvars = Vec::new();
        for start in (0..n).step_by(INFERENCE_BATCH) {
            let end = (start + INFERENCE_BATCH).min(n);
            let batch = slice_rows(x, start, end)?;
            let mut tape = Tape::new();
            let params = self.params.bind_frozen(&mut tape);
            let mut ctx = Ctx::new(&mut tape, &params, StatsMode::Eval(self.params.bn_stats()));
            let input = ctx.tape.constant(batch);
            let (mu, logvar) = self.encoder.forward(&mut ctx, input)?;
            mus.push(tape.value(mu).clone());
            logvars.push(tape.value(logvar).clone());
        }
        Ok((Tensor::stack(&mus)?, Tensor::stack(&logvars)?))
    }

    /// Decodes latents `[n, k]` with running statistics.
    pub fn decode(&self, z: &Tensor) -> Result<Decoded> {
        if z.rank() != 2 || z.shape()[1] != self.config.latent_dim {
            return shape_err(
                "decode",
                format!("latents must be [n, {}], got {:?}", self.config.latent_dim, z.shape()),
            );
        }
        let n = z.shape()[0];
        let mut images = Vec::new();
        let mut parts: Vec<SplitOutput> = Vec::new();
        for start in (0..n).step_by(INFERENCE_BATCH) {
            let end = (start + INFERENCE_BATCH).min(n);
            let mut tape = Tape::new();
            let params = self.params.bind_frozen(&mut tape);
            let mut ctx = Ctx::new(&mut tape, &params, StatsMode::Eval(self.params.bn_stats()));
            let zv = ctx.tape.constant(slice_rows(z, start, end)?);
            let features = self.decoder.forward(&mut ctx, zv)?;
            let logits = self.head.forward(&mut ctx, features)?;
            match self.apply_head(&mut tape, logits)? {
                HeadVars::Vanilla(x) => images.push(tape.value(x).clone()),
                HeadVars::Split(s) => {
                    let out = s.values(&tape);
                    images.push(out.composed.clone());
                    parts.push(out);
                }
            }
        }
        let split = if parts.is_empty() {
            None
        } else {
            let cat = |f: fn(&SplitOutput) -> &Tensor| -> Result<Tensor> {
                Tensor::stack(&parts.iter().map(|p| f(p).clone()).collect::<Vec<_>>())
            };
            Some(SplitOutput {
                sigma_map: cat(|p| &p.sigma_map)?,
                x1: cat(|p| &p.x1)?,
                x2: cat(|p| &p.x2)?,
                composed: cat(|p| &p.composed)?,
            })
        };
        Ok(Decoded {
            images: Tensor::stack(&images)?,
            split,
        })
    }

    /// Deterministic reconstruction through the posterior means.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Decoded> {
        let (mu, _) = self.encode(x)?;
        self.decode(&mu)
    }

    /// Decoder trunk output for `z`, before the head, in evaluation mode.
    pub fn decoder_features(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.params.bind_frozen(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &params, StatsMode::Eval(self.params.bn_stats()));
        let zv = ctx.tape.constant(z.clone());
        let f = self.decoder.forward(&mut ctx, zv)?;
        Ok(tape.value(f).clone())
    }
}

/// Rows `start..end` along the leading axis.
pub fn slice_rows(t: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let lead = t.shape()[0];
    if start >= end || end > lead {
        return invalid(format!("row range {start}..{end} of {lead}"));
    }
    let stride = t.len() / lead;
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, t.data()[start * stride..end * stride].to_vec())
}

/// Where generation draws its latents from.
#[derive(Clone, Copy, Debug)]
pub enum Sampler<'a> {
    /// Standard normal prior.
    Prior,
    /// A mixture fitted to encoded training latents.
    Gmm(&'a GaussianMixture),
}

#[derive(Clone, Copy, Debug)]
pub struct GenerationConfig<'a> {
    pub sampler: Sampler<'a>,
    pub count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub latents: Tensor,
    pub images: Tensor,
    pub split: Option<SplitOutput>,
}

/// Draws `count` latents from the configured sampler.
pub fn sample_latents(latent_dim: usize, cfg: &GenerationConfig<'_>) -> Result<Tensor> {
    if cfg.count == 0 {
        return invalid("generation count must be positive");
    }
    match cfg.sampler {
        Sampler::Prior => {
            let mut rng = rng_for(cfg.seed, "prior");
            let data = (0..cfg.count * latent_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            Tensor::new(vec![cfg.count, latent_dim], data)
        }
        Sampler::Gmm(gmm) => {
            if gmm.dim() != latent_dim {
                return shape_err(
                    "generate",
                    format!("mixture has dimension {}, decoder expects {latent_dim}", gmm.dim()),
                );
            }
            crate::latent::sample_gmm(gmm, cfg.count, cfg.seed)
        }
    }
}

/// Ancestral generation: sample latents, then decode them.
pub fn generate(model: &Vae, cfg: &GenerationConfig<'_>) -> Result<Generated> {
    let latents = sample_latents(model.latent_dim(), cfg)?;
    let Decoded { images, split } = model.decode(&latents)?;
    Ok(Generated { latents, images, split })
}
