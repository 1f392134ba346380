use serde::{Deserialize, Serialize};

use super::{Activation, BatchNorm, Conv, Ctx, Dense, ParamBuilder};
use crate::error::{shape_err, Result};
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualBlockCfg {
    pub num_convs: usize,
    pub channels: usize,
    pub activation: Activation,
}

/// `x + F(x)` where `F` repeats batch-norm, activation, 3x3 convolution.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    cfg: ResidualBlockCfg,
    norms: Vec<BatchNorm>,
    convs: Vec<Conv>,
}

impl ResidualBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, cfg: ResidualBlockCfg) -> Self {
        assert!(cfg.num_convs >= 1, "a residual block needs at least one convolution");
        b.scoped(name, |b| {
            let c = cfg.channels;
            let norms = (0..cfg.num_convs).map(|i| BatchNorm::new(b, &format!("bn{i}"), c)).collect();
            let convs = (0..cfg.num_convs).map(|i| Conv::new(b, &format!("conv{i}"), 3, c, c, 1)).collect();
            Self { cfg, norms, convs }
        })
    }

    pub fn convs(&self) -> &[Conv] {
        &self.convs
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let c = *ctx.tape.shape(x).last().unwrap_or(&0);
        if c != self.cfg.channels {
            return shape_err(
                "residual_block",
                format!("input has {c} channels, block expects {}", self.cfg.channels),
            );
        }
        let mut h = x;
        for (bn, conv) in self.norms.iter().zip(&self.convs) {
            h = bn.forward(ctx, h)?;
            h = self.cfg.activation.apply(ctx.tape, h)?;
            h = conv.forward(ctx, h)?;
        }
        ctx.tape.add(x, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleBlockCfg {
    pub num_residual_blocks: usize,
    pub block: ResidualBlockCfg,
}

/// A chain of residual blocks at one resolution.
#[derive(Clone, Debug)]
pub struct ScaleBlock {
    blocks: Vec<ResidualBlock>,
}

impl ScaleBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, cfg: ScaleBlockCfg) -> Self {
        b.scoped(name, |b| Self {
            blocks: (0..cfg.num_residual_blocks)
                .map(|i| ResidualBlock::new(b, &format!("res{i}"), cfg.block))
                .collect(),
        })
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        self.blocks.iter().try_fold(x, |h, blk| blk.forward(ctx, h))
    }
}

/// The fully connected analogue of [`ResidualBlock`]:
/// `x + W2·act(W1·act(x) + b1) + b2`.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    first: Dense,
    second: Dense,
    activation: Activation,
}

impl DenseBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize, width: usize, activation: Activation) -> Self {
        b.scoped(name, |b| Self {
            first: Dense::new(b, "fc0", dim, width),
            second: Dense::new(b, "fc1", width, dim),
            activation,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.activation.apply(ctx.tape, x)?;
        let h = self.first.forward(ctx, h)?;
        let h = self.activation.apply(ctx.tape, h)?;
        let h = self.second.forward(ctx, h)?;
        ctx.tape.add(x, h)
    }
}
