//! Differentiable neural building blocks over a [`Graph`].
//!
//! Parameters live in a [`ParamStore`]; a [`Forward`] pass binds them into a
//! fresh graph on first use. Training-mode batch norms report their batch
//! statistics through the forward pass; apply them with
//! [`ParamStore::apply_bn_updates`] once the step is done.

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Gradients, Graph, Var};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::seed;
use crate::tensor::{Init, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug)]
pub struct BnUpdate {
    mean: BufferId,
    var: BufferId,
    momentum: f64,
    stats: BatchStats,
}

/// One forward evaluation: the graph plus its parameter bindings.
pub struct Forward<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    bn_updates: Vec<BnUpdate>,
}

impl BnUpdate {
    pub fn stats(&self) -> &BatchStats {
        &self.stats
    }

    pub fn buffers(&self) -> (BufferId, BufferId) {
        (self.mean, self.var)
    }
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Forward { graph: Graph::new(), store, bound: vec![None; store.len()], mode, bn_updates: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Leaf for a parameter; created once per forward.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = self.graph.leaf(self.store.get(id).clone(), true);
        self.bound[id.index()] = Some(v);
        v
    }

    /// Gradients for every parameter touched by this forward, indexed by [`ParamId`].
    pub fn param_gradients(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.bound.iter().map(|b| b.and_then(|v| grads.get(v))).collect()
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }
}

impl ParamStore {
    /// Exponential moving average of batch statistics into running buffers.
    /// Running variance uses the unbiased estimate.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let n = u.stats.count as f64;
            let correction = if u.stats.count > 1 { n / (n - 1.0) } else { 1.0 };
            let m = u.momentum;
            for (r, b) in self.buffer_mut(u.mean).iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.buffer_mut(u.var).iter_mut().zip(&u.stats.var) {
                *r = (1.0 - m) * *r + m * b * correction;
            }
        }
    }
}

/// He-normal initialised weight of the given shape, seeded by its name.
pub fn he_normal(store: &mut ParamStore, name: &str, shape: Shape, fan_in: usize, root_seed: u64) -> ParamId {
    normal(store, name, shape, (2.0 / fan_in.max(1) as f64).sqrt(), root_seed)
}

/// Zero-mean Gaussian weight with standard deviation `std`, seeded by its name.
pub fn normal(store: &mut ParamStore, name: &str, shape: Shape, std: f64, root_seed: u64) -> ParamId {
    let t = Tensor::new(shape, Init::Normal { seed: seed::derive(root_seed, name), std }).expect("valid weight shape");
    store.add(name, t)
}

#[derive(Clone, Debug)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub eps: f64,
    pub momentum: f64,
    pub channels: usize,
}

impl BatchNormParams {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        BatchNormParams {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(shape, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(shape)),
            running_mean: store.add_buffer(format!("{name}.running_mean"), vec![0.0; channels]),
            running_var: store.add_buffer(format!("{name}.running_var"), vec![1.0; channels]),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            channels,
        }
    }
}

pub fn batch_norm(fw: &mut Forward<'_>, x: Var, p: &BatchNormParams) -> Result<Var> {
    let c = fw.graph.shape(x).channels();
    if c != p.channels {
        return Err(Error::Shape(format!("batch_norm over {} channels given {c}", p.channels)));
    }
    let gamma = fw.param(p.gamma);
    let beta = fw.param(p.beta);
    match fw.mode {
        Mode::Train => {
            let (y, stats) = fw.graph.batch_norm_train(x, gamma, beta, p.eps)?;
            fw.bn_updates.push(BnUpdate { mean: p.running_mean, var: p.running_var, momentum: p.momentum, stats });
            Ok(y)
        }
        Mode::Infer => {
            let store = fw.store;
            fw.graph
                .batch_norm_infer(x, gamma, beta, store.buffer(p.running_mean), store.buffer(p.running_var), p.eps)
        }
    }
}

/// Depthwise 3x3 -> pointwise 1x1 -> batch norm -> ReLU.
#[derive(Clone, Debug)]
pub struct SepConvParams {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub bn: BatchNormParams,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl SepConvParams {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize, seed: u64) -> Self {
        SepConvParams {
            depthwise: he_normal(store, &format!("{name}.dw"), Shape::new(c_in, 1, 3, 3), 9, seed),
            pointwise: he_normal(store, &format!("{name}.pw"), Shape::new(c_out, c_in, 1, 1), c_in, seed),
            bn: BatchNormParams::new(store, &format!("{name}.bn"), c_out),
            stride,
            c_in,
            c_out,
        }
    }
}

/// The linear part of a separable convolution (no normalisation or activation).
pub fn sepconv_linear(fw: &mut Forward<'_>, x: Var, p: &SepConvParams) -> Result<Var> {
    let c = fw.graph.shape(x).channels();
    if c != p.c_in {
        return Err(Error::Shape(format!("sepconv expects {} input channels, got {c}", p.c_in)));
    }
    let dw = fw.param(p.depthwise);
    let pw = fw.param(p.pointwise);
    let y = fw.graph.depthwise3x3(x, dw, p.stride)?;
    fw.graph.conv1x1(y, pw, 1)
}

pub fn sepconv3x3(fw: &mut Forward<'_>, x: Var, p: &SepConvParams) -> Result<Var> {
    let y = sepconv_linear(fw, x, p)?;
    let y = batch_norm(fw, y, &p.bn)?;
    Ok(fw.graph.relu(y))
}

pub fn conv1x1(fw: &mut Forward<'_>, x: Var, w: ParamId, stride: usize) -> Result<Var> {
    if !(stride == 1 || stride == 2) {
        return Err(Error::Argument(format!("1x1 convolution stride must be 1 or 2, got {stride}")));
    }
    let wv = fw.param(w);
    fw.graph.conv1x1(x, wv, stride)
}

pub fn bilinear_upsample_x2(g: &mut Graph, x: Var) -> Result<Var> {
    g.upsample(x, 2)
}

pub fn global_avg_pool(g: &mut Graph, x: Var) -> Result<Var> {
    g.global_avg_pool(x)
}
