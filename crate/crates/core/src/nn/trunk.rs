use serde::{Deserialize, Serialize};

use super::{
    Activation, BatchNorm, Conv, Ctx, Dense, DenseBlock, ParamBuilder, ResidualBlockCfg, ScaleBlock,
    ScaleBlockCfg,
};
use crate::error::{shape_err, Result};
use crate::tensor::Var;

/// Side of the square map the decoder starts from.
pub const DECODER_SEED_EXTENT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encoder/decoder architecture knobs. The encoder doubles its channel count
/// at each of the `num_scales` downsamplings; the decoder starts from a
/// `4×4×base_dim` map and halves its width (down to 8) at each upsampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub base_dim: usize,
    pub num_scales: usize,
    pub scale_blocks: usize,
    pub residual_blocks: usize,
    pub convs_per_block: usize,
    pub activation: Activation,
    pub dense_block_width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            base_dim: 32,
            num_scales: 2,
            scale_blocks: 1,
            residual_blocks: 1,
            convs_per_block: 2,
            activation: Activation::Relu,
            dense_block_width: 128,
        }
    }
}

impl ArchConfig {
    fn scale_cfg(&self, channels: usize) -> ScaleBlockCfg {
        ScaleBlockCfg {
            num_residual_blocks: self.residual_blocks,
            block: ResidualBlockCfg {
                num_convs: self.convs_per_block,
                channels,
                activation: self.activation,
            },
        }
    }

    fn scale_stack(&self, b: &mut ParamBuilder, name: &str, channels: usize) -> Vec<ScaleBlock> {
        (0..self.scale_blocks)
            .map(|i| ScaleBlock::new(b, &format!("{name}.sb{i}"), self.scale_cfg(channels)))
            .collect()
    }

    /// Decoder width after `level` upsamplings.
    pub fn decoder_width(&self, level: usize) -> usize {
        let floor = self.base_dim.min(8);
        (self.base_dim >> level.min(63)).max(floor)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("base_dim", self.base_dim),
            ("scale_blocks", self.scale_blocks),
            ("residual_blocks", self.residual_blocks),
            ("convs_per_block", self.convs_per_block),
            ("dense_block_width", self.dense_block_width),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(crate::Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

fn run_stack(stack: &[ScaleBlock], ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    stack.iter().try_fold(x, |h, sb| sb.forward(ctx, h))
}

#[derive(Clone, Debug)]
pub struct Encoder {
    image: ImageShape,
    num_scales: usize,
    latent_dim: usize,
    stem: Conv,
    levels: Vec<(Vec<ScaleBlock>, Conv)>,
    top: Vec<ScaleBlock>,
    top_norm: BatchNorm,
    activation: Activation,
    dense: DenseBlock,
    to_mu: Dense,
    to_logvar: Dense,
}

impl Encoder {
    pub fn new(b: &mut ParamBuilder, arch: &ArchConfig, image: ImageShape, latent_dim: usize) -> Self {
        b.scoped("encoder", |b| {
            let stem = Conv::new(b, "stem", 3, image.channels, arch.base_dim, 1);
            let mut ch = arch.base_dim;
            let mut levels = Vec::new();
            for s in 0..arch.num_scales {
                let stack = arch.scale_stack(b, &format!("scale{s}"), ch);
                let down = Conv::new(b, &format!("down{s}"), 3, ch, 2 * ch, 2);
                levels.push((stack, down));
                ch *= 2;
            }
            let top = arch.scale_stack(b, "top", ch);
            let top_norm = BatchNorm::new(b, "top_bn", ch);
            let dense = DenseBlock::new(b, "dense", ch, arch.dense_block_width, arch.activation);
            let to_mu = Dense::new(b, "mu", ch, latent_dim);
            let to_logvar = Dense::new(b, "logvar", ch, latent_dim);
            Self {
                image,
                num_scales: arch.num_scales,
                latent_dim,
                stem,
                levels,
                top,
                top_norm,
                activation: arch.activation,
                dense,
                to_mu,
                to_logvar,
            }
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Feature map just before global pooling.
    pub fn features(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (_, h, w, c) = ctx.tape.value(x).nhwc()?;
        if (h, w, c) != (self.image.height, self.image.width, self.image.channels) {
            return shape_err(
                "encoder",
                format!("expected {:?}, got {h}x{w}x{c}", self.image),
            );
        }
        let factor = 1usize << self.num_scales;
        if h % factor != 0 || w % factor != 0 {
            return shape_err(
                "encoder",
                format!("{h}x{w} is not divisible by 2^{} = {factor}", self.num_scales),
            );
        }
        let mut y = self.stem.forward(ctx, x)?;
        for (stack, down) in &self.levels {
            y = run_stack(stack, ctx, y)?;
            y = down.forward(ctx, y)?;
        }
        run_stack(&self.top, ctx, y)
    }

    /// Returns `(mu, logvar)`, each `[n, latent_dim]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<(Var, Var)> {
        let y = self.features(ctx, x)?;
        let y = self.top_norm.forward(ctx, y)?;
        let y = self.activation.apply(ctx.tape, y)?;
        let pooled = ctx.tape.global_avg_pool(y)?;
        let f = self.dense.forward(ctx, pooled)?;
        let mu = self.to_mu.forward(ctx, f)?;
        let logvar = self.to_logvar.forward(ctx, f)?;
        Ok((mu, logvar))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    image: ImageShape,
    latent_dim: usize,
    base_dim: usize,
    from_latent: Dense,
    levels: Vec<(Vec<ScaleBlock>, Conv)>,
    top: Vec<ScaleBlock>,
    top_norm: BatchNorm,
    activation: Activation,
    out_channels: usize,
    upsamples: usize,
}

impl Decoder {
    pub fn new(b: &mut ParamBuilder, arch: &ArchConfig, image: ImageShape, latent_dim: usize) -> Self {
        let target = image.height.max(image.width);
        let mut upsamples = 0;
        while DECODER_SEED_EXTENT << upsamples < target {
            upsamples += 1;
        }
        b.scoped("decoder", |b| {
            let seed_len = DECODER_SEED_EXTENT * DECODER_SEED_EXTENT * arch.base_dim;
            let from_latent = Dense::new(b, "from_latent", latent_dim, seed_len);
            let levels = (0..upsamples)
                .map(|i| {
                    let (cin, cout) = (arch.decoder_width(i), arch.decoder_width(i + 1));
                    let stack = arch.scale_stack(b, &format!("scale{i}"), cin);
                    (stack, Conv::new(b, &format!("up{i}"), 3, cin, cout, 1))
                })
                .collect();
            let out_channels = arch.decoder_width(upsamples);
            let top = arch.scale_stack(b, "top", out_channels);
            let top_norm = BatchNorm::new(b, "top_bn", out_channels);
            Self {
                image,
                latent_dim,
                base_dim: arch.base_dim,
                from_latent,
                levels,
                top,
                top_norm,
                activation: arch.activation,
                out_channels,
                upsamples,
            }
        })
    }

    /// Channels of the feature map handed to the output head.
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn upsamples(&self) -> usize {
        self.upsamples
    }

    /// `z[n, latent_dim]` -> `[n, height, width, out_channels]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, z: Var) -> Result<Var> {
        let shape = ctx.tape.shape(z).to_vec();
        if shape.len() != 2 || shape[1] != self.latent_dim {
            return shape_err(
                "decoder",
                format!("latent must be [n, {}], got {shape:?}", self.latent_dim),
            );
        }
        let n = shape[0];
        let y = self.from_latent.forward(ctx, z)?;
        let mut y = ctx
            .tape
            .reshape(y, &[n, DECODER_SEED_EXTENT, DECODER_SEED_EXTENT, self.base_dim])?;
        for (stack, conv) in &self.levels {
            y = run_stack(stack, ctx, y)?;
            y = ctx.tape.upsample2x(y)?;
            y = conv.forward(ctx, y)?;
        }
        let y = run_stack(&self.top, ctx, y)?;
        let y = self.top_norm.forward(ctx, y)?;
        let y = self.activation.apply(ctx.tape, y)?;
        let side = DECODER_SEED_EXTENT << self.upsamples;
        if (side, side) == (self.image.height, self.image.width) {
            return Ok(y);
        }
        let top = (side - self.image.height) / 2;
        let left = (side - self.image.width) / 2;
        ctx.tape.crop(y, top, left, self.image.height, self.image.width)
    }
}
