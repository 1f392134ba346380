//! Parameter storage plus the residual encoder/decoder trunks built from it.

mod blocks;
mod trunk;

pub use blocks::{DenseBlock, ResidualBlock, ResidualBlockCfg, ScaleBlock, ScaleBlockCfg};
pub use trunk::{ArchConfig, Decoder, Encoder, ImageShape};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::seed::rng_for;
use crate::tensor::{Padding, RunningStats, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    LeakyRelu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_SLOPE),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnId(usize);

/// Named trainable tensors plus named batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    bn_names: Vec<String>,
    bn: Vec<RunningStats>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    pub fn bn_stats(&self) -> &[RunningStats] {
        &self.bn
    }

    pub fn bn_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.bn
    }

    pub(crate) fn take_bn_stats(&mut self) -> Vec<RunningStats> {
        std::mem::take(&mut self.bn)
    }

    pub(crate) fn restore_bn_stats(&mut self, stats: Vec<RunningStats>) {
        self.bn = stats;
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on the tape as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Places every parameter on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / fan_in)`.
    FanIn(usize),
}

/// Registers parameters under a dotted name prefix. Each tensor is drawn from
/// its own stream keyed by `(seed, full name)`, so two models sharing a seed
/// get identical values for identically named parameters.
pub struct ParamBuilder {
    store: ParamStore,
    seed: u64,
    prefix: Vec<String>,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            seed,
            prefix: Vec::new(),
        }
    }

    pub fn scoped<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.into());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = self.full_name(name);
        let tensor = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::FanIn(fan_in) => {
                let limit = (6.0 / fan_in as f64).sqrt();
                let mut rng = rng_for(self.seed, &full);
                Tensor::from_fn(shape, |_| rng.random_range(-limit..limit))
            }
        };
        self.store.names.push(full);
        self.store.tensors.push(tensor);
        ParamId(self.store.tensors.len() - 1)
    }

    pub fn running_stats(&mut self, name: &str, channels: usize) -> BnId {
        let full = self.full_name(name);
        self.store.bn_names.push(full);
        self.store.bn.push(RunningStats::new(channels));
        BnId(self.store.bn.len() - 1)
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

pub enum StatsMode<'a> {
    Train(&'a mut [RunningStats]),
    Eval(&'a [RunningStats]),
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    params: &'a [Var],
    stats: StatsMode<'a>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a [Var], stats: StatsMode<'a>) -> Self {
        Self { tape, params, stats }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn is_training(&self) -> bool {
        matches!(self.stats, StatsMode::Train(_))
    }

    fn batch_norm(&mut self, x: Var, layer: &BatchNorm) -> Result<Var> {
        let (gamma, beta) = (self.p(layer.gamma), self.p(layer.beta));
        match &mut self.stats {
            StatsMode::Train(stats) => self.tape.batch_norm(x, gamma, beta, &mut stats[layer.stats.0], true),
            StatsMode::Eval(stats) => {
                let mut s = stats[layer.stats.0].clone();
                self.tape.batch_norm(x, gamma, beta, &mut s, false)
            }
        }
    }
}

/// Same-padded convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    kernel: ParamId,
    bias: ParamId,
    stride: usize,
}

impl Conv {
    pub fn new(b: &mut ParamBuilder, name: &str, size: usize, cin: usize, cout: usize, stride: usize) -> Self {
        b.scoped(name, |b| Self {
            kernel: b.param("kernel", &[size, size, cin, cout], Init::FanIn(size * size * cin)),
            bias: b.param("bias", &[cout], Init::Zeros),
            stride,
        })
    }

    pub fn kernel(&self) -> ParamId {
        self.kernel
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (k, bias) = (ctx.p(self.kernel), ctx.p(self.bias));
        let y = ctx.tape.conv2d(x, k, self.stride, Padding::Same)?;
        ctx.tape.add_bias(y, bias)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    weight: ParamId,
    bias: ParamId,
}

impl Dense {
    pub fn new(b: &mut ParamBuilder, name: &str, din: usize, dout: usize) -> Self {
        b.scoped(name, |b| Self {
            weight: b.param("weight", &[din, dout], Init::FanIn(din)),
            bias: b.param("bias", &[dout], Init::Zeros),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, bias) = (ctx.p(self.weight), ctx.p(self.bias));
        ctx.tape.dense(x, w, bias)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    stats: BnId,
}

impl BatchNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        b.scoped(name, |b| Self {
            gamma: b.param("gamma", &[channels], Init::Ones),
            beta: b.param("beta", &[channels], Init::Zeros),
            stats: b.running_stats("running", channels),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        ctx.batch_norm(x, self)
    }
}
