use super::kernels::{col2im, im2col, matmul, transpose, ConvGeom};
use super::Tensor;
use crate::error::{invalid, shape_err, Error, Result};

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-supplied op: `(inputs, output, upstream) -> one gradient per input`.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Per-channel running statistics used by batch norm in evaluation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    Dense { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulChannel { x: Var, s: Var },
    AddBias { x: Var, b: Var },
    Affine { x: Var, scale: f64 },
    GlobalAvgPool(Var),
    Upsample2x(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    ChannelSlice { x: Var, start: usize },
    Crop { x: Var, top: usize, left: usize },
    Compose { sigma: Var, x1: Var, x2: Var },
    Custom { inputs: Vec<Var>, backward: BackwardFn },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::Dense { x, w, b } => vec![*x, *w, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu(x)
            | Op::LeakyRelu(x, _)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Square(x)
            | Op::GlobalAvgPool(x)
            | Op::Upsample2x(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Affine { x, .. } | Op::ChannelSlice { x, .. } | Op::Crop { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MulChannel { x, s } => vec![*x, *s],
            Op::AddBias { x, b } => vec![*x, *b],
            Op::Compose { sigma, x1, x2 } => vec![*sigma, *x1, *x2],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations in execution order and replays them in reverse.
///
/// Nodes are appended only after all of their inputs, so the insertion order
/// is a topological order and a single reverse sweep visits every node once.
/// Gradients from the most recent [`Tape::backward`] stay readable until the
/// next call, which recomputes them from scratch; the recorded graph itself is
/// left intact so the same tape can be differentiated again.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.grad(v)?;
        Tensor::new(self.value(v).shape().to_vec(), g.to_vec()).ok()
    }

    /// Copies `v` into a fresh leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// 2-D convolution of an NHWC input with a `[kh, kw, c_in, c_out]` kernel.
    /// `Same` padding splits the total padding with the extra row/column at the bottom/right.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (n, h, w, cin) = self.value(x).nhwc()?;
        let (kh, kw, kcin, cout) = match self.shape(kernel)[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => return shape_err("conv2d", format!("kernel must be rank 4, got {:?}", self.shape(kernel))),
        };
        if kcin != cin {
            return shape_err("conv2d", format!("input has {cin} channels, kernel expects {kcin}"));
        }
        if stride == 0 {
            return invalid("conv2d stride must be positive");
        }
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let ph = ((oh - 1) * stride + kh).saturating_sub(h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return shape_err("conv2d", format!("kernel {kh}x{kw} larger than input {h}x{w}"));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        let geom = ConvGeom { n, h, w, cin, kh, kw, cout, stride, pad_top, pad_left, oh, ow };
        let cols = im2col(self.value(x).data(), &geom);
        let out = matmul(&cols, self.value(kernel).data(), geom.rows(), geom.patch(), cout);
        let value = Tensor::new(vec![n, oh, ow, cout], out)?;
        self.push("conv2d", value, Op::Conv2d { x, k: kernel, geom })
    }

    /// `x[n, in] · w[in, out] + b[out]`
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, din) = match self.shape(x)[..] {
            [n, d] => (n, d),
            _ => return shape_err("dense", format!("input must be rank 2, got {:?}", self.shape(x))),
        };
        let (win, wout) = match self.shape(w)[..] {
            [a, b] => (a, b),
            _ => return shape_err("dense", format!("weight must be rank 2, got {:?}", self.shape(w))),
        };
        if win != din || self.shape(b) != [wout] {
            return shape_err(
                "dense",
                format!("x {:?}, w {:?}, b {:?}", self.shape(x), self.shape(w), self.shape(b)),
            );
        }
        let mut out = matmul(self.value(x).data(), self.value(w).data(), n, din, wout);
        let bias = self.value(b).data();
        for row in out.chunks_mut(wout) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![n, wout], out)?;
        self.push("dense", value, Op::Dense { x, w, b })
    }

    /// Batch normalization over every axis but the last (channel) axis.
    ///
    /// In training mode batch statistics are used and `stats` is updated with
    /// momentum [`BN_MOMENTUM`]; otherwise `stats` is read as-is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        train: bool,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c {
            return shape_err("batch_norm", format!("x {shape:?} with {} params", self.shape(gamma)[0]));
        }
        if train && shape[0] < 2 {
            return Err(Error::BatchTooSmall(shape[0]));
        }
        let xs = self.value(x).data();
        let m = xs.len() / c;
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            for row in xs.chunks(c) {
                for (acc, &v) in mean.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            let mut var = vec![0.0; c];
            for row in xs.chunks(c) {
                for ((acc, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - mu) * (v - mu);
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            for ch in 0..c {
                stats.mean[ch] = BN_MOMENTUM * stats.mean[ch] + (1.0 - BN_MOMENTUM) * mean[ch];
                stats.var[ch] = BN_MOMENTUM * stats.var[ch] + (1.0 - BN_MOMENTUM) * var[ch];
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(c) {
            for ch in 0..c {
                let xh = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(xh);
                out.push(g[ch] * xh + bt[ch]);
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            "batch_norm",
            value,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary("leaky_relu", x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    /// Logistic function, clamped so the output stays strictly inside (0, 1).
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, logistic, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    /// `scale · x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary("affine", x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = zip_with(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = zip_with(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b))
    }

    /// Elementwise product. One operand may have a trailing extent of 1 and
    /// is then broadcast over the channel axis.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            let value = zip_with(self.value(a), self.value(b), |x, y| x * y);
            return self.push("mul", value, Op::Mul(a, b));
        }
        if channel_broadcastable(self.shape(a), self.shape(b)) {
            return self.mul_channel(a, b);
        }
        if channel_broadcastable(self.shape(b), self.shape(a)) {
            return self.mul_channel(b, a);
        }
        shape_err("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b)))
    }

    fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        let sv = self.value(s).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(c)
            .zip(sv)
            .flat_map(|(row, &sc)| row.iter().map(move |&v| v * sc))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("mul", value, Op::MulChannel { x, s })
    }

    /// Adds a per-channel bias `b[c]` to `x[..., c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(b) != [c] {
            return shape_err("add_bias", format!("x {:?}, bias {:?}", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(bias).map(|(v, bv)| v + bv))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias { x, b })
    }

    /// NHWC -> `[n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, h, w, c) = self.value(x).nhwc()?;
        let mut out = vec![0.0; n * c];
        let xs = self.value(x).data();
        for b in 0..n {
            let dst = &mut out[b * c..(b + 1) * c];
            for px in xs[b * h * w * c..(b + 1) * h * w * c].chunks(c) {
                for (o, &v) in dst.iter_mut().zip(px) {
                    *o += v;
                }
            }
            dst.iter_mut().for_each(|v| *v /= (h * w) as f64);
        }
        let value = Tensor::new(vec![n, c], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(x))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, h, w, c) = self.value(x).nhwc()?;
        let xs = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * oh * ow * c];
        for b in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    let src = ((b * h + y / 2) * w + xx / 2) * c;
                    let dst = ((b * oh + y) * ow + xx) * c;
                    out[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                }
            }
        }
        let value = Tensor::new(vec![n, oh, ow, c], out)?;
        self.push("upsample2x", value, Op::Upsample2x(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mean());
        self.push("mean", value, Op::Mean(x))
    }

    /// Channels `start..start + len` of `x[..., c]`.
    pub fn channel_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if len == 0 || start + len > c {
            return shape_err("channel_slice", format!("{start}..{} of {c} channels", start + len));
        }
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let value = Tensor::new(out_shape, data)?;
        self.push("channel_slice", value, Op::ChannelSlice { x, start })
    }

    /// Spatial window `[top..top+h, left..left+w]` of an NHWC tensor.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let (n, ih, iw, c) = self.value(x).nhwc()?;
        if h == 0 || w == 0 || top + h > ih || left + w > iw {
            return shape_err("crop", format!("{h}x{w} at ({top},{left}) of {ih}x{iw}"));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * h * w * c);
        for b in 0..n {
            for y in top..top + h {
                let src = ((b * ih + y) * iw + left) * c;
                out.extend_from_slice(&xs[src..src + w * c]);
            }
        }
        let value = Tensor::new(vec![n, h, w, c], out)?;
        self.push("crop", value, Op::Crop { x, top, left })
    }

    /// `sigma ⊙ x1 + (1 - sigma) ⊙ x2`, with `sigma[..., 1]` broadcast over channels.
    ///
    /// The result is clamped to `[min(x1, x2), max(x1, x2)]`, which only ever
    /// moves it by rounding error; the backward rule is that of the unclamped form.
    pub fn compose(&mut self, sigma: Var, x1: Var, x2: Var) -> Result<Var> {
        self.same_shape("compose", x1, x2)?;
        if !channel_broadcastable(self.shape(x1), self.shape(sigma)) {
            return shape_err(
                "compose",
                format!("sigma {:?} vs images {:?}", self.shape(sigma), self.shape(x1)),
            );
        }
        let value = compose_values(self.value(sigma), self.value(x1), self.value(x2))?;
        self.push("compose", value, Op::Compose { sigma, x1, x2 })
    }

    /// Records a user-defined op with an explicit backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Result<Var> {
        self.push(
            "custom",
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every leaf that
    /// requires a gradient has one (zero if the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.requires_grad(loss) {
            return Err(Error::DetachedGraph);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gin) in self.input_grads(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gin).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gin),
                }
            }
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn input_grads(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: &Var| self.nodes[v.0].value.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { x, k, geom } => {
                let (rows, patch, cout) = (geom.rows(), geom.patch(), geom.cout);
                let mut out = Vec::with_capacity(2);
                if self.nodes[x.0].requires_grad {
                    let kt = transpose(val(k), patch, cout);
                    let dcols = matmul(g, &kt, rows, cout, patch);
                    out.push((*x, col2im(&dcols, geom)));
                }
                if self.nodes[k.0].requires_grad {
                    let cols = im2col(val(x), geom);
                    let ct = transpose(&cols, rows, patch);
                    out.push((*k, matmul(&ct, g, patch, rows, cout)));
                }
                out
            }
            Op::Dense { x, w, b } => {
                let xs = &self.nodes[x.0].value;
                let (n, din) = (xs.shape()[0], xs.shape()[1]);
                let dout = node.value.shape()[1];
                let wt = transpose(val(w), din, dout);
                let dx = matmul(g, &wt, n, dout, din);
                let xt = transpose(val(x), n, din);
                let dw = matmul(&xt, g, din, n, dout);
                let mut db = vec![0.0; dout];
                for row in g.chunks(dout) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let c = inv_std.len();
                let m = (g.len() / c) as f64;
                let gam = val(gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        dgamma[ch] += grow[ch] * xrow[ch];
                        dbeta[ch] += grow[ch];
                    }
                }
                let dx: Vec<f64> = if *train {
                    // dxhat = g·γ, so Σdxhat = γ·Σg and Σ(dxhat·xhat) = γ·dγ.
                    let (dgamma, dbeta) = (&dgamma, &dbeta);
                    g.chunks(c)
                        .zip(xhat.chunks(c))
                        .flat_map(|(grow, xrow)| {
                            (0..c).map(move |ch| {
                                gam[ch] * inv_std[ch] / m
                                    * (m * grow[ch] - dbeta[ch] - xrow[ch] * dgamma[ch])
                            })
                        })
                        .collect()
                } else {
                    g.chunks(c)
                        .flat_map(|grow| (0..c).map(move |ch| grow[ch] * gam[ch] * inv_std[ch]))
                        .collect()
                };
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Relu(x) => {
                let d = val(x).iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 });
                vec![(*x, d.collect())]
            }
            Op::LeakyRelu(x, slope) => {
                let d = val(x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { slope * gv });
                vec![(*x, d.collect())]
            }
            Op::Sigmoid(x) => vec![(*x, y.iter().zip(g).map(|(&s, &gv)| gv * s * (1.0 - s)).collect())],
            Op::Exp(x) => vec![(*x, y.iter().zip(g).map(|(&e, &gv)| gv * e).collect())],
            Op::Square(x) => vec![(*x, val(x).iter().zip(g).map(|(&v, &gv)| 2.0 * v * gv).collect())],
            Op::Affine { x, scale } => vec![(*x, g.iter().map(|gv| gv * scale).collect())],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let da = val(b).iter().zip(g).map(|(bv, gv)| bv * gv).collect();
                let db = val(a).iter().zip(g).map(|(av, gv)| av * gv).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::MulChannel { x, s } => {
                let c = *node.value.shape().last().unwrap();
                let sv = val(s);
                let dx = g
                    .chunks(c)
                    .zip(sv)
                    .flat_map(|(grow, &sc)| grow.iter().map(move |gv| gv * sc))
                    .collect();
                let ds = g
                    .chunks(c)
                    .zip(val(x).chunks(c))
                    .map(|(grow, xrow)| grow.iter().zip(xrow).map(|(a, b)| a * b).sum())
                    .collect();
                vec![(*x, dx), (*s, ds)]
            }
            Op::AddBias { x, b } => {
                let c = *node.value.shape().last().unwrap();
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::GlobalAvgPool(x) => {
                let (n, h, w, c) = self.nodes[x.0].value.nhwc().expect("rank 4");
                let scale = 1.0 / (h * w) as f64;
                let mut dx = Vec::with_capacity(n * h * w * c);
                for b in 0..n {
                    for _ in 0..h * w {
                        dx.extend(g[b * c..(b + 1) * c].iter().map(|v| v * scale));
                    }
                }
                vec![(*x, dx)]
            }
            Op::Upsample2x(x) => {
                let (n, h, w, c) = self.nodes[x.0].value.nhwc().expect("rank 4");
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0; n * h * w * c];
                for b in 0..n {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let src = ((b * oh + yy) * ow + xx) * c;
                            let dst = ((b * h + yy / 2) * w + xx / 2) * c;
                            for ch in 0..c {
                                dx[dst + ch] += g[src + ch];
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.nodes[x.0].value.len()])],
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::ChannelSlice { x, start } => {
                let c = *self.nodes[x.0].value.shape().last().unwrap();
                let len = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                for (drow, grow) in dx.chunks_mut(c).zip(g.chunks(len)) {
                    drow[*start..*start + len].copy_from_slice(grow);
                }
                vec![(*x, dx)]
            }
            Op::Crop { x, top, left } => {
                let (n, ih, iw, c) = self.nodes[x.0].value.nhwc().expect("rank 4");
                let (_, h, w, _) = node.value.nhwc().expect("rank 4");
                let mut dx = vec![0.0; n * ih * iw * c];
                let mut src = 0;
                for b in 0..n {
                    for yy in *top..*top + h {
                        let dst = ((b * ih + yy) * iw + left) * c;
                        dx[dst..dst + w * c].copy_from_slice(&g[src..src + w * c]);
                        src += w * c;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Compose { sigma, x1, x2 } => {
                let c = *node.value.shape().last().unwrap();
                let s = val(sigma);
                let a = val(x1);
                let b = val(x2);
                let mut ds = vec![0.0; s.len()];
                let mut da = vec![0.0; a.len()];
                let mut db = vec![0.0; b.len()];
                for (p, &sp) in s.iter().enumerate() {
                    for ch in 0..c {
                        let i = p * c + ch;
                        ds[p] += g[i] * (a[i] - b[i]);
                        da[i] = g[i] * sp;
                        db[i] = g[i] * (1.0 - sp);
                    }
                }
                vec![(*sigma, ds), (*x1, da), (*x2, db)]
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                inputs.iter().copied().zip(backward(&vals, &node.value, g)).collect()
            }
        }
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

/// True when `small` equals `full` except for a trailing extent of 1.
fn channel_broadcastable(full: &[usize], small: &[usize]) -> bool {
    full.len() == small.len()
        && !full.is_empty()
        && small.last() == Some(&1)
        && full[..full.len() - 1] == small[..small.len() - 1]
}

pub(crate) fn logistic(v: f64) -> f64 {
    const HI: f64 = 1.0 - f64::EPSILON / 2.0;
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, HI)
}

/// Value-level composition shared by the tape op and non-differentiable callers.
pub(crate) fn compose_values(sigma: &Tensor, x1: &Tensor, x2: &Tensor) -> Result<Tensor> {
    if x1.shape() != x2.shape() || !channel_broadcastable(x1.shape(), sigma.shape()) {
        return shape_err(
            "compose",
            format!("sigma {:?}, x1 {:?}, x2 {:?}", sigma.shape(), x1.shape(), x2.shape()),
        );
    }
    if let Some(bad) = sigma.data().iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return invalid(format!("compose: sigma value {bad} outside [0, 1]"));
    }
    let c = *x1.shape().last().unwrap();
    let mut out = Vec::with_capacity(x1.len());
    for (p, &s) in sigma.data().iter().enumerate() {
        for ch in 0..c {
            let i = p * c + ch;
            let (a, b) = (x1.data()[i], x2.data()[i]);
            let v = s * a + (1.0 - s) * b;
            out.push(v.clamp(a.min(b), a.max(b)));
        }
    }
    Tensor::new(x1.shape().to_vec(), out)
}
