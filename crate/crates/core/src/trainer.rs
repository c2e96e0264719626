//! Joint optimisation of weights and gates under a cost budget.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::network::{ForwardOutput, Gating, Network, NetworkConfig, Route};
use crate::nn::{Forward, Mode};
use crate::node::Exec;
use crate::params::ParamStore;
use crate::routes::{RouteLog, RouteLogHeader};
use crate::space::{validate_mask, ArchMask, NodeId, RoutingSpace, NUM_SCALES};
use crate::tensor::{Shape, Tensor};

/// Budget coefficient presets as `(lambda2, mu)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BudgetPreset {
    A,
    B,
    C,
}

impl BudgetPreset {
    pub fn coefficients(self) -> (f64, f64) {
        match self {
            BudgetPreset::A => (0.8, 0.1),
            BudgetPreset::B => (0.5, 0.1),
            BudgetPreset::C => (0.5, 0.2),
        }
    }
}

impl FromStr for BudgetPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(BudgetPreset::A),
            "B" | "b" => Ok(BudgetPreset::B),
            "C" | "c" => Ok(BudgetPreset::C),
            _ => Err(Error::Argument(format!("unknown budget preset {s:?}; expected A, B or C"))),
        }
    }
}

impl fmt::Display for BudgetPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu: f64,
    pub base_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iter: u64,
    pub batch: usize,
    pub seed: u64,
    pub layers: usize,
    pub base_channels: usize,
    pub classes: usize,
    pub image_size: usize,
    pub gate_downsample: bool,
    pub budget: Option<BudgetPreset>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 1.0,
            lambda2: 0.0,
            mu: 0.0,
            base_lr: 0.01,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_iter: 2000,
            batch: 4,
            seed: 0,
            layers: 4,
            base_channels: 8,
            classes: 4,
            image_size: 64,
            gate_downsample: false,
            budget: None,
        }
    }
}

impl TrainConfig {
    pub fn with_budget(mut self, preset: BudgetPreset) -> Self {
        (self.lambda2, self.mu) = preset.coefficients();
        self.budget = Some(preset);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(0.0..=1.0).contains(&self.mu) {
            return bad(format!("mu must be in [0, 1], got {}", self.mu));
        }
        if !(self.lambda2 >= 0.0 && self.lambda1 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.power > 0.0) {
            return bad("momentum must be in [0, 1), weight_decay >= 0 and power > 0".into());
        }
        if self.max_iter == 0 || self.batch == 0 {
            return bad("max_iter and batch must be positive".into());
        }
        if self.layers == 0 || self.base_channels == 0 {
            return bad("layers and base_channels must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return bad(format!("image_size must be a positive multiple of 32, got {}", self.image_size));
        }
        if let Some(p) = self.budget {
            if (self.lambda2, self.mu) != p.coefficients() {
                return bad(format!("budget preset {p} conflicts with lambda2 = {}, mu = {}", self.lambda2, self.mu));
            }
        }
        Ok(())
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            layers: self.layers,
            base_channels: self.base_channels,
            classes: self.classes,
            gate_downsample: self.gate_downsample,
            seed: crate::seed::derive(self.seed, "init"),
        }
    }

    pub fn input_shape(&self) -> Shape {
        Shape::new(self.batch, 3, self.image_size, self.image_size)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub loss: Var,
    pub task: Var,
    pub budget: Var,
    /// Expected cost over the real total.
    pub cost_ratio: Var,
}

/// `lambda1 * cross_entropy + lambda2 * (E / C - mu)^2`.
pub fn joint_loss(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    expected_cost: Var,
    real_total: f64,
    lambda1: f64,
    lambda2: f64,
    mu: f64,
) -> Result<LossParts> {
    if !(real_total > 0.0) {
        return Err(Error::Argument(format!("real total cost must be positive, got {real_total}")));
    }
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Argument(format!("mu must be in [0, 1], got {mu}")));
    }
    let task = g.cross_entropy(logits, targets)?;
    let cost_ratio = g.scale(expected_cost, 1.0 / real_total);
    let gap = g.add_scalar(cost_ratio, -mu);
    let budget = g.square(gap);
    let a = g.scale(task, lambda1);
    let b = g.scale(budget, lambda2);
    let loss = g.add(a, b)?;
    Ok(LossParts { loss, task, budget, cost_ratio })
}

/// `base_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: u64, max_iter: u64, base_lr: f64, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::Argument("max_iter must be positive".into()));
    }
    if iter > max_iter {
        return Err(Error::Argument(format!("iteration {iter} beyond max_iter {max_iter}")));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// One SGD step with momentum and L2 weight decay:
/// `v = momentum * v + g + weight_decay * theta; theta -= lr * v`.
/// Parameters without a gradient are left untouched.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &[Option<Tensor>],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != store.len() || velocity.len() != store.len() {
        return Err(Error::Shape(format!(
            "{} gradients and {} velocities for {} parameters",
            grads.len(),
            velocity.len(),
            store.len()
        )));
    }
    for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let theta = store.get_mut(id);
        if g.shape() != theta.shape() || velocity[i].shape() != theta.shape() {
            return Err(Error::Shape(format!("gradient {} does not match parameter {}", g.shape(), theta.shape())));
        }
        let v = velocity[i].data_mut();
        for ((t, v), &g) in theta.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *v = momentum * *v + g + weight_decay * *t;
            *t -= lr * *v;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: u64,
    pub loss: f64,
    pub task_loss: f64,
    pub budget_loss: f64,
    pub cost_ratio: f64,
    pub lr: f64,
    /// Per scale, the fraction of legal (sample, node, path) triples open.
    pub open_fraction: Vec<f64>,
}

impl MetricsRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

pub fn open_fraction(space: &RoutingSpace, routes: &[Route]) -> Vec<f64> {
    let mut open = [0usize; NUM_SCALES];
    let mut total = [0usize; NUM_SCALES];
    for r in routes {
        let legal = space.legal_paths(r.node);
        for j in 0..3 {
            if legal[j] {
                total[r.node.scale] += 1;
                if r.alpha[j] > 0.0 {
                    open[r.node.scale] += 1;
                }
            }
        }
    }
    (0..space.final_scales().max(scales_used(space)))
        .map(|s| if total[s] == 0 { 0.0 } else { open[s] as f64 / total[s] as f64 })
        .collect()
}

fn scales_used(space: &RoutingSpace) -> usize {
    space.nodes().iter().map(|n| n.scale + 1).max().unwrap_or(1)
}

/// Mean of `f` over the first and last `frac` of `records`.
pub fn head_tail_mean(records: &[MetricsRecord], frac: f64, f: impl Fn(&MetricsRecord) -> f64) -> (f64, f64) {
    let k = ((records.len() as f64 * frac).round() as usize).clamp(1, records.len().max(1));
    let mean = |rs: &[MetricsRecord]| rs.iter().map(&f).sum::<f64>() / rs.len().max(1) as f64;
    (mean(&records[..k.min(records.len())]), mean(&records[records.len().saturating_sub(k)..]))
}

/// Serializable training state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iter: u64,
    pub params: Vec<Tensor>,
    pub buffers: Vec<Vec<f64>>,
    pub velocity: Vec<Tensor>,
    /// Open frequencies of the last logged routes, in mask text form.
    pub route_frequencies: String,
    /// Mask text when training a static architecture with frozen gates.
    #[serde(default)]
    pub frozen_mask: Option<String>,
}

pub struct Trainer {
    cfg: TrainConfig,
    net: Network,
    gating: Gating,
    velocity: Vec<Tensor>,
    iter: u64,
    last_routes: Vec<Route>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        Trainer::with_gating(cfg, Gating::Learned)
    }

    /// `Gating::Frozen` trains the static architecture of the mask; gates stay untouched.
    pub fn with_gating(cfg: TrainConfig, gating: Gating) -> Result<Self> {
        cfg.validate()?;
        let net = Network::new(cfg.network_config())?;
        if let Gating::Frozen(mask) = &gating {
            let check = validate_mask(net.space(), mask);
            if !check.is_ok() {
                let list: Vec<String> = check.violations.iter().map(ToString::to_string).collect();
                return Err(Error::Validation(list.join("; ")));
            }
        }
        let velocity = net.store().values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Trainer { cfg, net, gating, velocity, iter: 0, last_routes: Vec::new() })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let gating = match &ck.frozen_mask {
            Some(text) => Gating::Frozen(ArchMask::parse(text)?),
            None => Gating::Learned,
        };
        let mut t = Trainer::with_gating(ck.config, gating)?;
        if ck.iter > t.cfg.max_iter {
            return Err(Error::Validation(format!("checkpoint at iteration {} beyond max_iter", ck.iter)));
        }
        t.net.store_mut().load(ck.params, ck.buffers)?;
        if ck.velocity.len() != t.velocity.len()
            || ck.velocity.iter().zip(&t.velocity).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Shape("checkpoint velocity does not match the network".into()));
        }
        t.velocity = ck.velocity;
        t.iter = ck.iter;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let freq = route_frequency_mask(self.net.space(), &self.last_routes);
        Checkpoint {
            config: self.cfg.clone(),
            iter: self.iter,
            params: self.net.store().values().to_vec(),
            buffers: self.net.store().buffers().to_vec(),
            velocity: self.velocity.clone(),
            route_frequencies: freq.to_text(),
            frozen_mask: match &self.gating {
                Gating::Frozen(m) => Some(m.to_text()),
                Gating::Learned => None,
            },
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn gating(&self) -> &Gating {
        &self.gating
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn iter(&self) -> u64 {
        self.iter
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.cfg.max_iter
    }

    /// One optimisation step. A non-finite loss aborts with the diagnostic
    /// record in the error message and leaves the parameters unchanged.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        if self.is_done() {
            return Err(Error::Argument(format!("training already finished at iteration {}", self.iter)));
        }
        let cfg = &self.cfg;
        let lr = poly_lr(self.iter, cfg.max_iter, cfg.base_lr, cfg.power)?;
        let batch = data::synth_batch(cfg.seed, self.iter, cfg.batch, cfg.image_size, cfg.classes)?;
        let mut fw = Forward::new(self.net.store(), Mode::Train);
        let out = self.net.forward(&mut fw, &batch.images, &self.gating, Exec::Pruned)?;
        let parts = joint_loss(
            &mut fw.graph,
            out.logits,
            &batch.labels,
            out.expected_cost,
            out.real_total,
            cfg.lambda1,
            cfg.lambda2,
            cfg.mu,
        )?;
        let scalar = |v: Var| fw.graph.value(v).data()[0];
        let record = MetricsRecord {
            iter: self.iter,
            loss: scalar(parts.loss),
            task_loss: scalar(parts.task),
            budget_loss: scalar(parts.budget),
            cost_ratio: scalar(parts.cost_ratio),
            lr,
            open_fraction: open_fraction(self.net.space(), &out.routes),
        };
        if !record.loss.is_finite() {
            return Err(Error::Divergence { iter: self.iter, msg: record.to_json() });
        }
        let grads = fw.graph.backward(parts.loss)?;
        let pg = fw.param_gradients(&grads);
        if pg.iter().flatten().any(|g| !g.all_finite()) {
            return Err(Error::Divergence { iter: self.iter, msg: format!("non-finite gradient; {}", record.to_json()) });
        }
        let updates = fw.take_bn_updates();
        drop(fw);
        self.net.store_mut().apply_bn_updates(&updates);
        let (momentum, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        sgd_step(self.net.store_mut(), &pg, &mut self.velocity, lr, momentum, wd)?;
        self.last_routes = out.routes;
        self.iter += 1;
        Ok(record)
    }

    /// Step until `max_iter`, handing every record to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let r = self.step()?;
            sink(&r)?;
        }
        Ok(())
    }
}

/// Train from scratch and return the network with every metrics record.
pub fn train(cfg: TrainConfig) -> Result<(Network, Vec<MetricsRecord>)> {
    let mut t = Trainer::new(cfg)?;
    let mut records = Vec::new();
    t.run(|r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok((t.into_network(), records))
}

/// Open frequency per node and path as a (possibly fractional) mask.
pub fn route_frequency_mask(space: &RoutingSpace, routes: &[Route]) -> ArchMask {
    let samples = routes.iter().map(|r| r.sample).max().map_or(0, |m| m + 1);
    let mut counts: BTreeMap<NodeId, [usize; 3]> = BTreeMap::new();
    for r in routes {
        let c = counts.entry(r.node).or_default();
        for j in 0..3 {
            if r.alpha[j] > 0.0 {
                c[j] += 1;
            }
        }
    }
    let mut m = ArchMask::new();
    m.layers = Some(space.layers());
    for (n, c) in counts {
        m.set(n, c.map(|x| x as f64 / samples.max(1) as f64));
    }
    m
}

/// Run inference over `samples` in batches of `batch` and log every route.
/// Forward indices start at `first_forward`.
pub fn log_routes(net: &Network, gating: &Gating, samples: &[Sample], batch: usize, first_forward: u64) -> Result<RouteLog> {
    if batch == 0 {
        return Err(Error::Argument("batch must be positive".into()));
    }
    let mask = match gating {
        Gating::Frozen(m) => m.name.clone(),
        Gating::Learned => None,
    };
    let mut log = RouteLog::new(RouteLogHeader {
        layers: net.space().layers(),
        base_channels: net.space().base_channels(),
        mask,
    });
    for (i, chunk) in samples.chunks(batch).enumerate() {
        let b = data::collate(chunk)?;
        let out = infer(net, &b.images, gating)?;
        log.push_forward(first_forward + i as u64, &out.1);
    }
    Ok(log)
}

/// Pruned inference: logits tensor and routes.
pub fn infer(net: &Network, images: &Tensor, gating: &Gating) -> Result<(Tensor, Vec<Route>)> {
    let mut fw = Forward::new(net.store(), Mode::Infer);
    let ForwardOutput { logits, routes, .. } = net.forward(&mut fw, images, gating, Exec::Pruned)?;
    Ok((fw.graph.value(logits).clone(), routes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::PathKind;

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0, 100, 0.05, 0.9).unwrap(), 0.05);
        assert_eq!(poly_lr(100, 100, 0.05, 0.9).unwrap(), 0.0);
        let half = poly_lr(50, 100, 0.05, 0.9).unwrap();
        assert!((half - 0.05 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((half - 0.02679).abs() < 1e-5);
        assert!(poly_lr(1, 0, 0.05, 0.9).is_err());
        assert!(poly_lr(101, 100, 0.05, 0.9).is_err());
    }

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(Shape::new(1, 1, 1, 1), v));
        s
    }

    #[test]
    fn sgd_plain_and_momentum() {
        let id = crate::params::ParamId(0);
        let g = vec![Some(Tensor::full(Shape::new(1, 1, 1, 1), 2.0))];

        let mut s = one_param(1.0);
        let mut v = vec![Tensor::zeros(Shape::new(1, 1, 1, 1))];
        sgd_step(&mut s, &g, &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!((s.get(id).data()[0] - 0.8).abs() < 1e-15);

        let zero = vec![Some(Tensor::zeros(Shape::new(1, 1, 1, 1)))];
        let mut s = one_param(1.0);
        let mut v = vec![Tensor::zeros(Shape::new(1, 1, 1, 1))];
        sgd_step(&mut s, &zero, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(s.get(id).data()[0], 1.0);

        // Second step moves lr * (1 + momentum) * g.
        let mut s = one_param(0.0);
        let mut v = vec![Tensor::zeros(Shape::new(1, 1, 1, 1))];
        sgd_step(&mut s, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        let after_one = s.get(id).data()[0];
        sgd_step(&mut s, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        let delta = (s.get(id).data()[0] - after_one).abs();
        assert!((delta - 0.1 * 1.9 * 2.0).abs() < 1e-14);

        // Weight decay acts like an extra gradient term.
        let mut s = one_param(2.0);
        let mut v = vec![Tensor::zeros(Shape::new(1, 1, 1, 1))];
        sgd_step(&mut s, &zero, &mut v, 0.5, 0.0, 0.1).unwrap();
        assert!((s.get(id).data()[0] - 1.9).abs() < 1e-15);

        let wrong = vec![Some(Tensor::zeros(Shape::new(1, 2, 1, 1)))];
        assert!(matches!(sgd_step(&mut s, &wrong, &mut v, 0.1, 0.9, 0.0), Err(Error::Shape(_))));
        assert!(matches!(sgd_step(&mut s, &[], &mut v, 0.1, 0.9, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn joint_loss_terms() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(Shape::new(1, 4, 2, 2)));
        let e = g.constant(Tensor::scalar(30.0));
        let targets = [0, 1, 2, 3];
        let p = joint_loss(&mut g, logits, &targets, e, 100.0, 1.0, 0.0, 0.1).unwrap();
        assert!((g.value(p.task).data()[0] - 4f64.ln()).abs() < 1e-12);
        assert_eq!(g.value(p.loss).data()[0], g.value(p.task).data()[0]);

        let p = joint_loss(&mut g, logits, &targets, e, 100.0, 1.0, 0.5, 0.3).unwrap();
        assert_eq!(g.value(p.budget).data()[0], 0.0);
        let p = joint_loss(&mut g, logits, &targets, e, 100.0, 2.0, 0.5, 0.1).unwrap();
        let want = 2.0 * 4f64.ln() + 0.5 * (0.3f64 - 0.1).powi(2);
        assert!((g.value(p.loss).data()[0] - want).abs() < 1e-12);

        assert!(matches!(joint_loss(&mut g, logits, &[0, 1, 2, 4], e, 100.0, 1.0, 0.0, 0.1), Err(Error::Data(_))));
        assert!(joint_loss(&mut g, logits, &targets, e, 0.0, 1.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn config_validation() {
        let c = TrainConfig::default().with_budget(BudgetPreset::B);
        assert_eq!((c.lambda2, c.mu), (0.5, 0.1));
        c.validate().unwrap();
        let mut bad = c.clone();
        bad.mu = 0.3;
        assert!(matches!(bad.validate(), Err(Error::Validation(_))));
        let mut bad = TrainConfig::default();
        bad.image_size = 48;
        assert!(bad.validate().is_err());
        let mut bad = TrainConfig::default();
        bad.mu = 1.5;
        assert!(bad.validate().is_err());
        assert_eq!("c".parse::<BudgetPreset>().unwrap(), BudgetPreset::C);
        assert!("D".parse::<BudgetPreset>().is_err());
    }

    fn tiny() -> TrainConfig {
        TrainConfig { layers: 2, base_channels: 4, image_size: 32, batch: 2, max_iter: 3, ..TrainConfig::default() }
    }

    #[test]
    fn single_step_changes_parameters() {
        let cfg = TrainConfig { max_iter: 1, ..tiny() };
        let before = Network::new(cfg.network_config()).unwrap();
        let (after, records) = train(cfg).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].lr, 0.01);
        let changed = before.store().values().iter().zip(after.store().values()).filter(|(a, b)| a != b).count();
        assert!(changed > 0);
        assert!((0.0..=1.0).contains(&records[0].cost_ratio));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (_, full) = train(tiny()).unwrap();
        let mut t = Trainer::new(tiny()).unwrap();
        let first = t.step().unwrap();
        let ck: Checkpoint = serde_json::from_str(&serde_json::to_string(&t.checkpoint()).unwrap()).unwrap();
        let mut resumed = Trainer::from_checkpoint(ck).unwrap();
        let mut rest = vec![first];
        resumed.run(|r| {
            rest.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(rest, full);
        assert!(resumed.step().is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = tiny();
        cfg.base_lr = 1e200;
        let mut t = Trainer::new(cfg).unwrap();
        let err = (0..3).map(|_| t.step()).find_map(|r| r.err());
        assert!(matches!(err, Some(Error::Divergence { .. })), "{err:?}");
    }

    #[test]
    fn checkpoint_frequencies_parse_as_mask() {
        let mut t = Trainer::new(tiny()).unwrap();
        t.step().unwrap();
        let m = ArchMask::parse(&t.checkpoint().route_frequencies).unwrap();
        assert!(m.values.values().flatten().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(!m.values.is_empty());
    }

    #[test]
    fn frozen_gating_trains_a_static_architecture() {
        let cfg = TrainConfig { layers: 3, ..tiny() };
        let space = RoutingSpace::new(3, 4).unwrap();
        let mut mask = ArchMask::named("chain").for_space(&space);
        for l in 1..=3 {
            mask.open(NodeId::new(l, 0), PathKind::Keep);
        }
        let mut t = Trainer::with_gating(cfg.clone(), Gating::Frozen(mask.clone())).unwrap();
        let before = t.network().store().values().to_vec();
        t.step().unwrap();
        let store = t.network().store();
        for (i, name) in store.names().iter().enumerate() {
            let moved = before[i] != store.values()[i];
            if name.starts_with("gate.") || name.starts_with("cell.l2s1") {
                assert!(!moved, "{name}");
            }
            if name.starts_with("cell.l1s0") {
                assert!(moved, "{name}");
            }
        }
        let ck = t.checkpoint();
        assert_eq!(ck.frozen_mask.as_deref(), Some(mask.to_text().as_str()));
        let resumed = Trainer::from_checkpoint(ck).unwrap();
        assert_eq!(resumed.gating(), &Gating::Frozen(mask.clone()));

        let samples = data::synth_dataset(1, 4, 32, cfg.classes).unwrap();
        let log = log_routes(resumed.network(), resumed.gating(), &samples, 2, 0).unwrap();
        assert_eq!(log.header.mask.as_deref(), Some("chain"));

        let mut bad = ArchMask::new();
        bad.open(NodeId::new(3, 0), PathKind::Up);
        assert!(matches!(Trainer::with_gating(cfg, Gating::Frozen(bad)), Err(Error::Validation(_))));
    }
}
