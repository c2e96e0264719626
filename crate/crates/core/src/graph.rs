//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every primitive in execution order, so the tape is
//! topologically sorted by construction. [`Graph::backward`] walks it in
//! reverse and accumulates gradients for every node that depends on a leaf
//! created with `requires_grad = true`.
//!
//! All reductions accumulate in index order; two runs over identical inputs
//! produce bit-identical values and gradients.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddConst(Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    MulSample(Var, Var),
    Square(Var),
    Relu(Var),
    Tanh(Var),
    TanhGate(Var),
    ChannelSlice(Var, usize),
    ChannelMax(Var, Vec<usize>),
    ChannelDot(Var, Vec<f64>),
    Conv1x1 { x: Var, w: Var, stride: usize },
    Depthwise3x3 { x: Var, w: Var, stride: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Upsample { x: Var, factor: usize },
    AvgPool { x: Var, k: usize },
    GlobalAvgPool(Var),
    SumAll(Var),
    MeanAll(Var),
    Select { mask: Vec<bool>, a: Var, b: Var },
    ConcatBatch(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Mul(a, b) | MulSample(a, b) | AddBias(a, b) => vec![*a, *b],
            Select { a, b, .. } => vec![*a, *b],
            Scale(x, _) | AddScalar(x) | AddConst(x) | MulConst(x, _) | Square(x) | Relu(x) | Tanh(x)
            | TanhGate(x) | ChannelSlice(x, _) | ChannelMax(x, _) | ChannelDot(x, _) | GlobalAvgPool(x)
            | SumAll(x) | MeanAll(x) => vec![*x],
            Upsample { x, .. } | AvgPool { x, .. } => vec![*x],
            Conv1x1 { x, w, .. } | Depthwise3x3 { x, w, .. } => vec![*x, *w],
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            CrossEntropy { logits, .. } => vec![*logits],
            ConcatBatch(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance, as used for normalisation.
    pub var: Vec<f64>,
    /// Number of values each statistic was computed over.
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when no gradient flowed into it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_vec(self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, zero-filled for non-participating nodes.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
    }

    /// Borrowed gradient buffer of `v`.
    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn check_same(op: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{op}: {a} vs {b}")));
    }
    Ok(())
}

fn div_ceil(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Interpolation taps for one axis of a half-pixel bilinear resize.
fn upsample_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let n_out = n_in * factor;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = src - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_vec(src.shape(), data).expect("same shape");
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Sum of a non-empty list of same-shaped values, left to right.
    pub fn sum_of(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Argument("sum of an empty list".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    /// `x + c` for a constant tensor `c` that receives no gradient.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        check_same("add_const", self.shape(x), c.shape())?;
        let vx = self.value(x);
        let data = vx.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let value = Tensor::from_vec(vx.shape(), data)?;
        Ok(self.push(value, Op::AddConst(x)))
    }

    /// `x + bias` with a `(1,C,1,1)` bias broadcast over batch and space.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if bs != Shape::new(1, xs.channels(), 1, 1) {
            return Err(Error::Shape(format!("add_bias: bias {bs} does not match {xs}")));
        }
        let plane = xs.plane();
        let (vx, vb) = (self.value(x), self.value(bias));
        let mut data = vx.data().to_vec();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let k = vb.data()[i % xs.channels()];
            chunk.iter_mut().for_each(|v| *v += k);
        }
        let value = Tensor::from_vec(xs, data)?;
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Element-wise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        check_same("mul_const", self.shape(x), c.shape())?;
        let vx = self.value(x);
        let data = vx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::from_vec(vx.shape(), data)?;
        Ok(self.push(value, Op::MulConst(x, c)))
    }

    /// Multiply every element of sample `b` in `x` by `s[b]`, where `s` is `(B,1,1,1)`.
    pub fn mul_sample(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.shape(x), self.shape(s));
        if ss != Shape::new(xs.batch(), 1, 1, 1) {
            return Err(Error::Shape(format!("mul_sample: scale {ss} does not match batch of {xs}")));
        }
        let per = xs.numel() / xs.batch().max(1);
        let (vx, vs) = (self.value(x), self.value(s));
        let mut data = vx.data().to_vec();
        for (b, chunk) in data.chunks_mut(per.max(1)).enumerate().take(xs.batch()) {
            let k = vs.data()[b];
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        let value = Tensor::from_vec(xs, data)?;
        Ok(self.push(value, Op::MulSample(x, s)))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    /// `max(0, tanh(x))`, with derivative 0 at and below zero.
    pub fn tanh_gate(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh().max(0.0), Op::TanhGate(x))
    }

    /// Channel `c` of `x` as a `(B,1,H,W)` value.
    pub fn channel(&mut self, x: Var, c: usize) -> Result<Var> {
        let s = self.shape(x);
        if c >= s.channels() {
            return Err(Error::Shape(format!("channel {c} out of range for {s}")));
        }
        let vx = self.value(x);
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.batch() * plane);
        for b in 0..s.batch() {
            let start = vx.index(b, c, 0, 0);
            data.extend_from_slice(&vx.data()[start..start + plane]);
        }
        let value = Tensor::from_vec(s.with_channels(1), data)?;
        Ok(self.push(value, Op::ChannelSlice(x, c)))
    }

    /// Maximum over channels, `(B,C,H,W) -> (B,1,H,W)`. Ties resolve to the lowest channel.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let vx = self.value(x);
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.batch() * plane);
        let mut arg = Vec::with_capacity(s.batch() * plane);
        for b in 0..s.batch() {
            for p in 0..plane {
                let mut best = vx.data()[vx.index(b, 0, 0, 0) + p];
                let mut best_c = 0;
                for c in 1..s.channels() {
                    let v = vx.data()[vx.index(b, c, 0, 0) + p];
                    if v > best {
                        best = v;
                        best_c = c;
                    }
                }
                data.push(best);
                arg.push(best_c);
            }
        }
        let value = Tensor::from_vec(s.with_channels(1), data).expect("shape");
        self.push(value, Op::ChannelMax(x, arg))
    }

    /// Weighted sum over channels with constant weights, `(B,C,H,W) -> (B,1,H,W)`.
    pub fn channel_dot(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let s = self.shape(x);
        if weights.len() != s.channels() {
            return Err(Error::Shape(format!("channel_dot: {} weights for {s}", weights.len())));
        }
        let vx = self.value(x);
        let plane = s.plane();
        let mut data = vec![0.0; s.batch() * plane];
        for b in 0..s.batch() {
            for (c, &wc) in weights.iter().enumerate() {
                let base = vx.index(b, c, 0, 0);
                for p in 0..plane {
                    data[b * plane + p] += wc * vx.data()[base + p];
                }
            }
        }
        let value = Tensor::from_vec(s.with_channels(1), data)?;
        Ok(self.push(value, Op::ChannelDot(x, weights.to_vec())))
    }

    /// 1x1 convolution without bias. `w` is `(C_out, C_in, 1, 1)`; stride 2
    /// samples even rows and columns, giving `ceil(H/2) x ceil(W/2)`.
    pub fn conv1x1(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.height() != 1 || ws.width() != 1 || ws.channels() != xs.channels() {
            return Err(Error::Shape(format!("conv1x1: weight {ws} does not fit input {xs}")));
        }
        if stride == 0 {
            return Err(Error::Argument("conv1x1: stride must be positive".into()));
        }
        let (b_n, cin, cout) = (xs.batch(), xs.channels(), ws.batch());
        let (ho, wo) = (div_ceil(xs.height(), stride), div_ceil(xs.width(), stride));
        let sampled = self.strided(x, stride);
        let vw = self.value(w).data();
        let po = ho * wo;
        let mut out = vec![0.0; b_n * cout * po];
        for b in 0..b_n {
            for o in 0..cout {
                let dst = &mut out[(b * cout + o) * po..(b * cout + o + 1) * po];
                for c in 0..cin {
                    let k = vw[o * cin + c];
                    let src = &sampled[(b * cin + c) * po..(b * cin + c + 1) * po];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += k * s;
                    }
                }
            }
        }
        let value = Tensor::from_vec(Shape::new(b_n, cout, ho, wo), out)?;
        Ok(self.push(value, Op::Conv1x1 { x, w, stride }))
    }

    fn strided(&self, x: Var, stride: usize) -> Vec<f64> {
        let vx = self.value(x);
        if stride == 1 {
            return vx.data().to_vec();
        }
        let s = vx.shape();
        let (ho, wo) = (div_ceil(s.height(), stride), div_ceil(s.width(), stride));
        let mut out = Vec::with_capacity(s.batch() * s.channels() * ho * wo);
        for b in 0..s.batch() {
            for c in 0..s.channels() {
                for y in 0..ho {
                    for xx in 0..wo {
                        out.push(vx.at(b, c, y * stride, xx * stride));
                    }
                }
            }
        }
        out
    }

    /// Depthwise 3x3 convolution, padding 1. `w` is `(C, 1, 3, 3)`.
    pub fn depthwise3x3(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws != Shape::new(xs.channels(), 1, 3, 3) {
            return Err(Error::Shape(format!("depthwise3x3: weight {ws} does not fit input {xs}")));
        }
        if stride == 0 {
            return Err(Error::Argument("depthwise3x3: stride must be positive".into()));
        }
        let (h, wd) = (xs.height() as isize, xs.width() as isize);
        let (ho, wo) = (div_ceil(xs.height(), stride), div_ceil(xs.width(), stride));
        let vx = self.value(x);
        let vw = self.value(w).data();
        let mut out = Vec::with_capacity(xs.batch() * xs.channels() * ho * wo);
        for b in 0..xs.batch() {
            for c in 0..xs.channels() {
                let k = &vw[c * 9..c * 9 + 9];
                let base = vx.index(b, c, 0, 0);
                let plane = &vx.data()[base..base + xs.plane()];
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            let iy = (y * stride) as isize + ky as isize - 1;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (xx * stride) as isize + kx as isize - 1;
                                if ix < 0 || ix >= wd {
                                    continue;
                                }
                                acc += k[ky * 3 + kx] * plane[(iy * wd + ix) as usize];
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        let value = Tensor::from_vec(Shape::new(xs.batch(), xs.channels(), ho, wo), out)?;
        Ok(self.push(value, Op::Depthwise3x3 { x, w, stride }))
    }

    /// Batch normalisation with per-batch statistics over `(B, H, W)`.
    /// `gamma`/`beta` are `(1, C, 1, 1)`. Returns the statistics for the
    /// caller's running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let s = self.shape(x);
        let c_n = s.channels();
        let count = s.batch() * s.plane();
        let mut mean = vec![0.0; c_n];
        let mut var = vec![0.0; c_n];
        {
            let vx = self.value(x);
            for c in 0..c_n {
                let mut sum = 0.0;
                for b in 0..s.batch() {
                    let base = vx.index(b, c, 0, 0);
                    sum += vx.data()[base..base + s.plane()].iter().sum::<f64>();
                }
                let m = if count > 0 { sum / count as f64 } else { 0.0 };
                let mut sq = 0.0;
                for b in 0..s.batch() {
                    let base = vx.index(b, c, 0, 0);
                    sq += vx.data()[base..base + s.plane()].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                mean[c] = m;
                var[c] = if count > 0 { sq / count as f64 } else { 0.0 };
            }
        }
        let out = self.normalise(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Batch normalisation with fixed statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.normalise(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalise(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        let s = self.shape(x);
        let c_n = s.channels();
        let param = Shape::new(1, c_n, 1, 1);
        if self.shape(gamma) != param || self.shape(beta) != param || mean.len() != c_n || var.len() != c_n {
            return Err(Error::Shape(format!("batch_norm: parameters do not match {s}")));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let vx = self.value(x);
        let mut xhat = vec![0.0; s.numel()];
        let mut out = vec![0.0; s.numel()];
        for b in 0..s.batch() {
            for c in 0..c_n {
                let base = vx.index(b, c, 0, 0);
                for p in 0..s.plane() {
                    let h = (vx.data()[base + p] - mean[c]) * inv_std[c];
                    xhat[base + p] = h;
                    out[base + p] = g[c] * h + bt[c];
                }
            }
        }
        let value = Tensor::from_vec(s, out)?;
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }))
    }

    /// Bilinear upsampling by an integer factor with half-pixel centres and
    /// edge clamping (align-corners off).
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Argument("upsample factor must be positive".into()));
        }
        let s = self.shape(x);
        let (ho, wo) = (s.height() * factor, s.width() * factor);
        let ty = upsample_taps(s.height(), factor);
        let tx = upsample_taps(s.width(), factor);
        let vx = self.value(x);
        let mut out = Vec::with_capacity(s.batch() * s.channels() * ho * wo);
        for b in 0..s.batch() {
            for c in 0..s.channels() {
                let base = vx.index(b, c, 0, 0);
                let p = &vx.data()[base..base + s.plane()];
                for &(y0, y1, fy) in &ty {
                    for &(x0, x1, fx) in &tx {
                        let top = p[y0 * s.width() + x0] * (1.0 - fx) + p[y0 * s.width() + x1] * fx;
                        let bot = p[y1 * s.width() + x0] * (1.0 - fx) + p[y1 * s.width() + x1] * fx;
                        out.push(top * (1.0 - fy) + bot * fy);
                    }
                }
            }
        }
        let value = Tensor::from_vec(Shape::new(s.batch(), s.channels(), ho, wo), out)?;
        Ok(self.push(value, Op::Upsample { x, factor }))
    }

    /// Average pooling with a `k x k` window and stride `k`; trailing partial
    /// windows average over their valid elements.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        if k == 0 {
            return Err(Error::Argument("avg_pool window must be positive".into()));
        }
        let s = self.shape(x);
        let (ho, wo) = (div_ceil(s.height(), k), div_ceil(s.width(), k));
        let vx = self.value(x);
        let mut out = Vec::with_capacity(s.batch() * s.channels() * ho * wo);
        for b in 0..s.batch() {
            for c in 0..s.channels() {
                for y in 0..ho {
                    for xx in 0..wo {
                        let (y1, x1) = (((y + 1) * k).min(s.height()), ((xx + 1) * k).min(s.width()));
                        let mut acc = 0.0;
                        for iy in y * k..y1 {
                            for ix in xx * k..x1 {
                                acc += vx.at(b, c, iy, ix);
                            }
                        }
                        out.push(acc / ((y1 - y * k) * (x1 - xx * k)) as f64);
                    }
                }
            }
        }
        let value = Tensor::from_vec(Shape::new(s.batch(), s.channels(), ho, wo), out)?;
        Ok(self.push(value, Op::AvgPool { x, k }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.plane() == 0 {
            return Err(Error::Shape(format!("global_avg_pool: empty spatial extent {s}")));
        }
        let vx = self.value(x);
        let n = s.plane() as f64;
        let data = vx.data().chunks(s.plane()).map(|p| p.iter().sum::<f64>() / n).collect();
        let value = Tensor::from_vec(Shape::new(s.batch(), s.channels(), 1, 1), data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.is_empty() {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let m = vx.data().iter().sum::<f64>() / vx.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::MeanAll(x)))
    }

    /// Per-sample choice: sample `b` of the result comes from `a` when
    /// `mask[b]`, otherwise from `b`.
    pub fn select(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a);
        check_same("select", s, self.shape(b))?;
        if mask.len() != s.batch() {
            return Err(Error::Shape(format!("select: mask of {} for batch {}", mask.len(), s.batch())));
        }
        let per = s.numel() / s.batch().max(1);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(s.numel());
        for (i, &m) in mask.iter().enumerate() {
            let src = if m { va } else { vb };
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let value = Tensor::from_vec(s, data)?;
        Ok(self.push(value, Op::Select { mask: mask.to_vec(), a, b }))
    }

    /// Stack values along the batch axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|&v| self.value(v).clone()).collect();
        let value = Tensor::concat_batch(&values)?;
        Ok(self.push(value, Op::ConcatBatch(parts.to_vec())))
    }

    /// Mean per-pixel cross-entropy of `(B,K,H,W)` logits against class
    /// indices laid out as `(B,H,W)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        let k_n = s.channels();
        let n = s.batch() * s.plane();
        if targets.len() != n {
            return Err(Error::Shape(format!("cross_entropy: {} targets for logits {s}", targets.len())));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= k_n) {
            return Err(Error::Data(format!("target class {bad} outside [0, {k_n})")));
        }
        if n == 0 {
            return Err(Error::Shape("cross_entropy over zero pixels".into()));
        }
        let vl = self.value(logits);
        let mut probs = vec![0.0; s.numel()];
        let mut total = 0.0;
        let plane = s.plane();
        for b in 0..s.batch() {
            for p in 0..plane {
                let at = |c: usize| vl.data()[vl.index(b, c, 0, 0) + p];
                let m = (0..k_n).map(at).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k_n).map(|c| (at(c) - m).exp()).sum();
                let lz = z.ln() + m;
                for c in 0..k_n {
                    probs[vl.index(b, c, 0, 0) + p] = (at(c) - lz).exp();
                }
                total += lz - at(targets[b * plane + p]);
            }
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != Shape::SCALAR {
            return Err(Error::Shape(format!("backward needs a scalar loss, got {}", self.shape(loss))));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for input in node.op.inputs() {
                if input.0 >= i {
                    return Err(Error::Structure(format!("node {i} consumes later node {}", input.0)));
                }
            }
            if node.requires_grad {
                self.propagate(i, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.slot(grads, v) {
                        g.iter_mut().zip(gy).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::AddScalar(x) | Op::AddConst(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    g.iter_mut().zip(gy).for_each(|(d, s)| *d += s);
                }
            }
            Op::ConcatBatch(parts) => {
                let mut offset = 0;
                for &v in parts {
                    let len = self.nodes[v.0].value.len();
                    if let Some(g) = self.slot(grads, v) {
                        g.iter_mut().zip(&gy[offset..offset + len]).for_each(|(d, s)| *d += s);
                    }
                    offset += len;
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(g) = self.slot(grads, *x) {
                    g.iter_mut().zip(gy).for_each(|(d, s)| *d += s);
                }
                let xs = self.shape(*x);
                let plane = xs.plane();
                if let Some(g) = self.slot(grads, *bias) {
                    for (i, chunk) in gy.chunks(plane).enumerate() {
                        g[i % xs.channels()] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(g) = self.slot(grads, *x) {
                    g.iter_mut().zip(gy).for_each(|(d, s)| *d += c * s);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                if let Some(g) = self.slot(grads, *a) {
                    for ((d, s), o) in g.iter_mut().zip(gy).zip(&vb) {
                        *d += s * o;
                    }
                }
                if let Some(g) = self.slot(grads, *b) {
                    for ((d, s), o) in g.iter_mut().zip(gy).zip(&va) {
                        *d += s * o;
                    }
                }
            }
            Op::MulConst(x, c) => {
                if let Some(g) = self.slot(grads, *x) {
                    for ((d, s), k) in g.iter_mut().zip(gy).zip(c.data()) {
                        *d += s * k;
                    }
                }
            }
            Op::MulSample(x, sc) => {
                let xs = self.shape(*x);
                let per = (xs.numel() / xs.batch().max(1)).max(1);
                let vs = self.value(*sc).data().to_vec();
                if let Some(g) = self.slot(grads, *x) {
                    for (b, (dc, sc)) in g.chunks_mut(per).zip(gy.chunks(per)).enumerate() {
                        for (d, s) in dc.iter_mut().zip(sc) {
                            *d += vs[b] * s;
                        }
                    }
                }
                let vx = self.value(*x).data();
                if let Some(g) = self.slot(grads, *sc) {
                    for (b, (xc, sc)) in vx.chunks(per).zip(gy.chunks(per)).enumerate() {
                        g[b] += xc.iter().zip(sc).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Square(x) => {
                let vx = self.value(*x).data();
                if let Some(g) = self.slot(grads, *x) {
                    for ((d, s), v) in g.iter_mut().zip(gy).zip(vx) {
                        *d += 2.0 * v * s;
                    }
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                if let Some(g) = self.slot(grads, *x) {
                    for ((d, s), v) in g.iter_mut().zip(gy).zip(vx) {
                        if *v > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    for ((d, s), t) in g.iter_mut().zip(gy).zip(out.data()) {
                        *d += s * (1.0 - t * t);
                    }
                }
            }
            Op::TanhGate(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    for ((d, s), t) in g.iter_mut().zip(gy).zip(out.data()) {
                        if *t > 0.0 {
                            *d += s * (1.0 - t * t);
                        }
                    }
                }
            }
            Op::ChannelSlice(x, c) => {
                let xs = self.shape(*x);
                let plane = xs.plane();
                if let Some(g) = self.slot(grads, *x) {
                    for b in 0..xs.batch() {
                        let base = ((b * xs.channels()) + c) * plane;
                        for p in 0..plane {
                            g[base + p] += gy[b * plane + p];
                        }
                    }
                }
            }
            Op::ChannelMax(x, arg) => {
                let xs = self.shape(*x);
                let plane = xs.plane();
                if let Some(g) = self.slot(grads, *x) {
                    for b in 0..xs.batch() {
                        for p in 0..plane {
                            let c = arg[b * plane + p];
                            g[((b * xs.channels()) + c) * plane + p] += gy[b * plane + p];
                        }
                    }
                }
            }
            Op::ChannelDot(x, w) => {
                let xs = self.shape(*x);
                let plane = xs.plane();
                if let Some(g) = self.slot(grads, *x) {
                    for b in 0..xs.batch() {
                        for (c, wc) in w.iter().enumerate() {
                            for p in 0..plane {
                                g[((b * xs.channels()) + c) * plane + p] += wc * gy[b * plane + p];
                            }
                        }
                    }
                }
            }
            Op::Conv1x1 { x, w, stride } => self.conv1x1_backward(*x, *w, *stride, gy, grads),
            Op::Depthwise3x3 { x, w, stride } => self.depthwise_backward(*x, *w, *stride, gy, grads),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let s = self.shape(*x);
                let c_n = s.channels();
                let plane = s.plane();
                let mut sum_dy = vec![0.0; c_n];
                let mut sum_dy_xhat = vec![0.0; c_n];
                for b in 0..s.batch() {
                    for c in 0..c_n {
                        let base = (b * c_n + c) * plane;
                        for p in base..base + plane {
                            sum_dy[c] += gy[p];
                            sum_dy_xhat[c] += gy[p] * xhat[p];
                        }
                    }
                }
                if let Some(g) = self.slot(grads, *beta) {
                    g.iter_mut().zip(&sum_dy).for_each(|(d, s)| *d += s);
                }
                if let Some(g) = self.slot(grads, *gamma) {
                    g.iter_mut().zip(&sum_dy_xhat).for_each(|(d, s)| *d += s);
                }
                let gamma_v = self.value(*gamma).data().to_vec();
                if let Some(g) = self.slot(grads, *x) {
                    let count = (s.batch() * plane) as f64;
                    for b in 0..s.batch() {
                        for c in 0..c_n {
                            let base = (b * c_n + c) * plane;
                            let k = gamma_v[c] * inv_std[c];
                            for p in base..base + plane {
                                if *batch_stats {
                                    g[p] += k * (gy[p] - sum_dy[c] / count - xhat[p] * sum_dy_xhat[c] / count);
                                } else {
                                    g[p] += k * gy[p];
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample { x, factor } => {
                let s = self.shape(*x);
                let ty = upsample_taps(s.height(), *factor);
                let tx = upsample_taps(s.width(), *factor);
                if let Some(g) = self.slot(grads, *x) {
                    let mut o = 0;
                    for bc in 0..s.batch() * s.channels() {
                        let base = bc * s.plane();
                        for &(y0, y1, fy) in &ty {
                            for &(x0, x1, fx) in &tx {
                                let d = gy[o];
                                o += 1;
                                g[base + y0 * s.width() + x0] += d * (1.0 - fy) * (1.0 - fx);
                                g[base + y0 * s.width() + x1] += d * (1.0 - fy) * fx;
                                g[base + y1 * s.width() + x0] += d * fy * (1.0 - fx);
                                g[base + y1 * s.width() + x1] += d * fy * fx;
                            }
                        }
                    }
                }
            }
            Op::AvgPool { x, k } => {
                let s = self.shape(*x);
                let os = out.shape();
                if let Some(g) = self.slot(grads, *x) {
                    let mut o = 0;
                    for bc in 0..s.batch() * s.channels() {
                        let base = bc * s.plane();
                        for y in 0..os.height() {
                            for xx in 0..os.width() {
                                let (y1, x1) = (((y + 1) * k).min(s.height()), ((xx + 1) * k).min(s.width()));
                                let d = gy[o] / ((y1 - y * k) * (x1 - xx * k)) as f64;
                                o += 1;
                                for iy in y * k..y1 {
                                    for ix in xx * k..x1 {
                                        g[base + iy * s.width() + ix] += d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let plane = s.plane();
                if let Some(g) = self.slot(grads, *x) {
                    for (bc, d) in gy.iter().enumerate() {
                        let k = d / plane as f64;
                        g[bc * plane..(bc + 1) * plane].iter_mut().for_each(|v| *v += k);
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    g.iter_mut().for_each(|v| *v += gy[0]);
                }
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len() as f64;
                if let Some(g) = self.slot(grads, *x) {
                    g.iter_mut().for_each(|v| *v += gy[0] / n);
                }
            }
            Op::Select { mask, a, b } => {
                let s = self.shape(*a);
                let per = (s.numel() / s.batch().max(1)).max(1);
                for (v, want) in [(*a, true), (*b, false)] {
                    if let Some(g) = self.slot(grads, v) {
                        for (bi, &m) in mask.iter().enumerate() {
                            if m == want {
                                for p in bi * per..(bi + 1) * per {
                                    g[p] += gy[p];
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let s = self.shape(*logits);
                let plane = s.plane();
                let n = (s.batch() * plane) as f64;
                if let Some(g) = self.slot(grads, *logits) {
                    for (d, p) in g.iter_mut().zip(probs) {
                        *d += gy[0] * p / n;
                    }
                    for b in 0..s.batch() {
                        for p in 0..plane {
                            let t = targets[b * plane + p];
                            g[(b * s.channels() + t) * plane + p] -= gy[0] / n;
                        }
                    }
                }
            }
        }
    }

    fn conv1x1_backward(&self, x: Var, w: Var, stride: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (b_n, cin, cout) = (xs.batch(), xs.channels(), ws.batch());
        let (ho, wo) = (div_ceil(xs.height(), stride), div_ceil(xs.width(), stride));
        let po = ho * wo;
        if self.nodes[w.0].requires_grad {
            let sampled = self.strided(x, stride);
            let g = self.slot(grads, w).expect("requires grad");
            for b in 0..b_n {
                for o in 0..cout {
                    let dy = &gy[(b * cout + o) * po..(b * cout + o + 1) * po];
                    for c in 0..cin {
                        let src = &sampled[(b * cin + c) * po..(b * cin + c + 1) * po];
                        g[o * cin + c] += dy.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
        if self.nodes[x.0].requires_grad {
            let vw = self.value(w).data().to_vec();
            let mut dsampled = vec![0.0; b_n * cin * po];
            for b in 0..b_n {
                for c in 0..cin {
                    let dst = &mut dsampled[(b * cin + c) * po..(b * cin + c + 1) * po];
                    for o in 0..cout {
                        let k = vw[o * cin + c];
                        let dy = &gy[(b * cout + o) * po..(b * cout + o + 1) * po];
                        for (d, s) in dst.iter_mut().zip(dy) {
                            *d += k * s;
                        }
                    }
                }
            }
            let g = self.slot(grads, x).expect("requires grad");
            if stride == 1 {
                g.iter_mut().zip(&dsampled).for_each(|(d, s)| *d += s);
            } else {
                let mut i = 0;
                for bc in 0..b_n * cin {
                    for y in 0..ho {
                        for xx in 0..wo {
                            g[bc * xs.plane() + y * stride * xs.width() + xx * stride] += dsampled[i];
                            i += 1;
                        }
                    }
                }
            }
        }
    }

    fn depthwise_backward(&self, x: Var, w: Var, stride: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let xs = self.shape(x);
        let (h, wd) = (xs.height() as isize, xs.width() as isize);
        let (ho, wo) = (div_ceil(xs.height(), stride), div_ceil(xs.width(), stride));
        let vx = self.value(x).data().to_vec();
        let vw = self.value(w).data().to_vec();
        let want_w = self.nodes[w.0].requires_grad;
        let want_x = self.nodes[x.0].requires_grad;
        let mut dw = vec![0.0; vw.len()];
        let mut dx = if want_x { vec![0.0; vx.len()] } else { Vec::new() };
        let plane = xs.plane();
        for b in 0..xs.batch() {
            for c in 0..xs.channels() {
                let base = (b * xs.channels() + c) * plane;
                let obase = (b * xs.channels() + c) * ho * wo;
                for y in 0..ho {
                    for xx in 0..wo {
                        let d = gy[obase + y * wo + xx];
                        if d == 0.0 {
                            continue;
                        }
                        for ky in 0..3 {
                            let iy = (y * stride) as isize + ky as isize - 1;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (xx * stride) as isize + kx as isize - 1;
                                if ix < 0 || ix >= wd {
                                    continue;
                                }
                                let p = base + (iy * wd + ix) as usize;
                                if want_w {
                                    dw[c * 9 + ky * 3 + kx] += d * vx[p];
                                }
                                if want_x {
                                    dx[p] += d * vw[c * 9 + ky * 3 + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(g) = self.slot(grads, w) {
            g.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        }
        if let Some(g) = self.slot(grads, x) {
            g.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::tensor::Init;

    fn rand(shape: Shape, seed: u64) -> Tensor {
        Tensor::new(shape, Init::Normal { seed, std: 1.0 }).unwrap()
    }

    const TOL: f64 = 1e-3;
    const EPS: f64 = 1e-5;

    #[test]
    fn sum_has_identity_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(rand(Shape::new(1, 1, 2, 2), 1), true);
        let l = g.sum_all(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0; 4]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let l = g.sum_all(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn gate_activation_is_flat_below_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![-0.5, 0.0, 0.7]).unwrap(), true);
        let a = g.tanh_gate(x);
        let l = g.sum_all(a);
        let grads = g.backward(l).unwrap();
        let d = grads.wrt(x);
        assert_eq!(d.data()[0], 0.0);
        assert_eq!(d.data()[1], 0.0);
        assert!((d.data()[2] - (1.0 - 0.7f64.tanh().powi(2))).abs() < 1e-15);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(rand(Shape::new(1, 1, 2, 2), 1), true);
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn unused_leaf_gets_zero() {
        let mut g = Graph::new();
        let x = g.leaf(rand(Shape::new(1, 1, 2, 2), 1), true);
        let y = g.leaf(rand(Shape::new(1, 1, 2, 2), 2), true);
        let l = g.sum_all(x);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.wrt(y).data(), &[0.0; 4]);
    }

    #[test]
    fn grad_elementwise_ops() {
        let a = rand(Shape::new(2, 2, 2, 2), 3);
        let b = rand(Shape::new(2, 2, 2, 2), 4);
        let c = rand(Shape::new(2, 2, 2, 2), 5);
        let r = grad_check(
            |g, v| {
                let m = g.mul(v[0], v[1])?;
                let t = g.tanh(m);
                let s = g.add(t, v[0])?;
                let q = g.square(s);
                let k = g.mul_const(q, c.clone())?;
                let r = g.relu(k);
                let s = g.scale(r, 0.7);
                let s = g.add_scalar(s, 1.0);
                g.mean_all(s)
            },
            &[a, b],
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "{r:?}");
    }

    #[test]
    fn grad_per_sample_scaling_and_channel_ops() {
        let x = rand(Shape::new(3, 4, 2, 2), 6);
        let s = rand(Shape::new(3, 1, 1, 1), 7);
        let gate = rand(Shape::new(3, 3, 1, 1), 8);
        let r = grad_check(
            |g, v| {
                let y = g.mul_sample(v[0], v[1])?;
                let a = g.tanh_gate(v[2]);
                let mx = g.channel_max(a);
                let dot = g.channel_dot(a, &[0.3, -1.2, 2.0])?;
                let ch = g.channel(a, 2)?;
                let z = g.mul_sample(y, mx)?;
                let z = g.mul_sample(z, ch)?;
                let z = g.mul_sample(z, dot)?;
                let l = g.square(z);
                g.mean_all(l)
            },
            &[x, s, gate],
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "{r:?}");
    }

    #[test]
    fn grad_concat_batch() {
        let a = rand(Shape::new(1, 2, 2, 2), 31);
        let b = rand(Shape::new(2, 2, 2, 2), 32);
        let r = grad_check(
            |g, v| {
                let y = g.concat_batch(&[v[0], v[1], v[0]])?;
                let w = g.constant(rand(Shape::new(4, 2, 2, 2), 33));
                let y = g.mul(y, w)?;
                let l = g.square(y);
                g.mean_all(l)
            },
            &[a, b],
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "{r:?}");
    }

    #[test]
    fn grad_add_bias() {
        let x = rand(Shape::new(2, 3, 2, 3), 21);
        let bias = rand(Shape::new(1, 3, 1, 1), 22);
        let r = grad_check(
            |g, v| {
                let y = g.add_bias(v[0], v[1])?;
                let l = g.square(y);
                g.mean_all(l)
            },
            &[x, bias],
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "{r:?}");
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(Shape::new(2, 2, 1, 1)));
        let b = g.constant(Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, -1.0]).unwrap());
        let y = g.add_bias(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -1.0, 1.0, -1.0]);
        let bad = g.constant(Tensor::zeros(Shape::new(1, 3, 1, 1)));
        assert!(g.add_bias(x, bad).is_err());
    }

    #[test]
    fn grad_conv1x1_both_strides() {
        for stride in [1, 2] {
            let x = rand(Shape::new(2, 3, 5, 4), 9);
            let w = rand(Shape::new(4, 3, 1, 1), 10);
            let r = grad_check(
                |g, v| {
                    let y = g.conv1x1(v[0], v[1], stride)?;
                    let q = g.square(y);
                    Ok(g.sum_all(q))
                },
                &[x, w],
                EPS,
            )
            .unwrap();
            assert!(r.max_rel_error < TOL, "stride {stride}: {r:?}");
        }
    }

    #[test]
    fn grad_depthwise_both_strides() {
        for stride in [1, 2] {
            let x = rand(Shape::new(2, 3, 5, 6), 11);
            let w = rand(Shape::new(3, 1, 3, 3), 12);
            let r = grad_check(
                |g, v| {
                    let y = g.depthwise3x3(v[0], v[1], stride)?;
                    let q = g.square(y);
                    Ok(g.sum_all(q))
                },
                &[x, w],
                EPS,
            )
            .unwrap();
            assert!(r.max_rel_error < TOL, "stride {stride}: {r:?}");
        }
    }

    #[test]
    fn grad_batch_norm_train_and_infer() {
        let x = rand(Shape::new(3, 2, 2, 3), 13);
        let gamma = rand(Shape::new(1, 2, 1, 1), 14);
        let beta = rand(Shape::new(1, 2, 1, 1), 15);
        let weights = rand(Shape::new(3, 2, 2, 3), 16);
        let r = grad_check(
            |g, v| {
                let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                let y = g.mul_const(y, weights.clone())?;
                let q = g.tanh(y);
                Ok(g.sum_all(q))
            },
            &[x.clone(), gamma.clone(), beta.clone()],
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "train: {r:?}");
        let r = grad_check(
            |g, v| {
                let y = g.batch_norm_infer(v[0], v[1], v[2], &[0.3, -0.1], &[2.0, 0.5], 1e-5)?;
                let y = g.mul_const(y, weights.clone())?;
                let q = g.tanh(y);
                Ok(g.sum_all(q))
            },
            &[x, gamma, beta],
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "infer: {r:?}");
    }

    #[test]
    fn grad_resampling_ops() {
        let x = rand(Shape::new(2, 2, 3, 5), 17);
        let w1 = rand(Shape::new(2, 2, 6, 10), 18);
        let w2 = rand(Shape::new(2, 2, 1, 2), 19);
        let w3 = rand(Shape::new(2, 2, 1, 1), 20);
        let r = grad_check(
            |g, v| {
                let u = g.upsample(v[0], 2)?;
                let u = g.mul_const(u, w1.clone())?;
                let p = g.avg_pool(v[0], 4)?;
                let p = g.mul_const(p, w2.clone())?;
                let a = g.global_avg_pool(v[0])?;
                let a = g.mul_const(a, w3.clone())?;
                let s1 = g.sum_all(u);
                let s2 = g.sum_all(p);
                let s3 = g.sum_all(a);
                let s = g.sum_of(&[s1, s2, s3])?;
                Ok(g.square(s))
            },
            &[x],
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "{r:?}");
    }

    #[test]
    fn grad_select_and_cross_entropy() {
        let a = rand(Shape::new(3, 4, 2, 2), 21);
        let b = rand(Shape::new(3, 4, 2, 2), 22);
        let targets: Vec<usize> = (0..12).map(|i| (i * 7) % 4).collect();
        let r = grad_check(
            |g, v| {
                let s = g.select(&[true, false, true], v[0], v[1])?;
                g.cross_entropy(s, &targets)
            },
            &[a, b],
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "{r:?}");
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_k() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::full(Shape::new(2, 4, 3, 3), 0.25));
        let ce = g.cross_entropy(l, &[1; 18]).unwrap();
        assert!((g.value(ce).item().unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_class() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        assert!(matches!(g.cross_entropy(l, &[2]), Err(Error::Data(_))));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(rand(Shape::new(2, 3, 6, 6), 30), true);
            let w = g.leaf(rand(Shape::new(3, 1, 3, 3), 31), true);
            let p = g.leaf(rand(Shape::new(5, 3, 1, 1), 32), true);
            let y = g.depthwise3x3(x, w, 1).unwrap();
            let y = g.conv1x1(y, p, 2).unwrap();
            let y = g.upsample(y, 2).unwrap();
            let q = g.square(y);
            let l = g.mean_all(q).unwrap();
            let grads = g.backward(l).unwrap();
            (g.value(y).clone(), grads.wrt(w), grads.wrt(x))
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data(), b.1.data());
        assert_eq!(a.2.data(), b.2.data());
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let x0 = rand(Shape::new(1, 2, 3, 3), 40);
        let grad_of = |wa: f64, wb: f64| {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone(), true);
            let f = g.tanh(x);
            let f = g.sum_all(f);
            let s = g.square(x);
            let s = g.relu(s);
            let h = g.mean_all(s).unwrap();
            let f = g.scale(f, wa);
            let h = g.scale(h, wb);
            let l = g.add(f, h).unwrap();
            g.backward(l).unwrap().wrt(x)
        };
        let (a, b) = (1.7, -0.4);
        let combined = grad_of(a, b);
        let f = grad_of(1.0, 0.0);
        let h = grad_of(0.0, 1.0);
        for i in 0..combined.len() {
            let expect = a * f.data()[i] + b * h.data()[i];
            assert!((combined.data()[i] - expect).abs() <= 1e-6);
        }
    }

}
