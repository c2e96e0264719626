//! Full model: stem, routing-space forward and decoder.

use std::collections::{BTreeMap, BTreeSet};

use crate::cost::{check_input, CostModel};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{self, Forward, Mode, SepConvParams};
use crate::node::{aggregate_inputs, node_forward, AlphaSource, Exec, NodeParams};
use crate::params::{ParamId, ParamStore};
use crate::space::{ArchMask, NodeId, PathKind, RoutingSpace};
use crate::tensor::{Shape, Tensor};

/// Small initial classifier weights keep the first logits near zero.
pub const CLASSIFIER_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub layers: usize,
    pub base_channels: usize,
    pub classes: usize,
    /// Average-pool gate inputs by 4 before the gate runs.
    pub gate_downsample: bool,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn new(layers: usize, base_channels: usize, classes: usize) -> Self {
        NetworkConfig { layers, base_channels, classes, gate_downsample: false, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct StemParams {
    /// `(base, 3, 1, 1)` at stride 2.
    pub entry: ParamId,
    pub sep1: SepConvParams,
    /// Stride 2.
    pub sep2: SepConvParams,
    pub sep3: SepConvParams,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    /// `(base, C_s, 1, 1)` for every scale of the final layer.
    pub lateral: Vec<ParamId>,
    /// `(K, base, 1, 1)`.
    pub classifier: ParamId,
}

/// Where activating factors come from during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Gating {
    Learned,
    /// Gates do not run; every sample uses the mask's values.
    Frozen(ArchMask),
}

/// Nodes and paths a forward pass actually executed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub cells: BTreeSet<NodeId>,
    /// Transforms computed with at least one sample open.
    pub paths: BTreeSet<(NodeId, PathKind)>,
    /// Nodes where some sample took the inference skip.
    pub skipped: BTreeSet<NodeId>,
}

impl Trace {
    fn merge(&mut self, o: Trace) {
        self.cells.extend(o.cells);
        self.paths.extend(o.paths);
        self.skipped.extend(o.skipped);
    }
}

/// Activating factors of one node for one sample that reached it.
#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub sample: usize,
    pub node: NodeId,
    pub alpha: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `(B, K, H, W)`.
    pub logits: Var,
    /// Mean per-sample expected MACs, a scalar differentiable in learned gates.
    pub expected_cost: Var,
    /// Cost of the all-open space, gates included iff gating is learned.
    pub real_total: f64,
    /// Sorted by sample, then node.
    pub routes: Vec<Route>,
    pub trace: Trace,
}

impl ForwardOutput {
    pub fn cost_ratio(&self, fw: &Forward<'_>) -> f64 {
        fw.graph.value(self.expected_cost).data()[0] / self.real_total
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    cfg: NetworkConfig,
    space: RoutingSpace,
    store: ParamStore,
    stem: StemParams,
    nodes: Vec<NodeParams>,
    decoder: DecoderParams,
}

/// Shape after the stem for an input `(B, C, H, W)`.
pub fn stem_output_shape(input: Shape, base_channels: usize) -> Result<Shape> {
    check_input(input)?;
    if input.channels() != 3 {
        return Err(Error::Shape(format!("images must have 3 channels, got {input}")));
    }
    Ok(Shape::new(input.batch(), base_channels, input.height() / 4, input.width() / 4))
}

impl Network {
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        if cfg.classes < 2 {
            return Err(Error::Argument(format!("need at least 2 classes, got {}", cfg.classes)));
        }
        let space = RoutingSpace::new(cfg.layers, cfg.base_channels)?;
        let mut store = ParamStore::new();
        let base = cfg.base_channels;
        let seed = cfg.seed;
        let stem = StemParams {
            entry: nn::he_normal(&mut store, "stem.entry", Shape::new(base, 3, 1, 1), 3, seed),
            sep1: SepConvParams::new(&mut store, "stem.sep1", base, base, 1, seed),
            sep2: SepConvParams::new(&mut store, "stem.sep2", base, base, 2, seed),
            sep3: SepConvParams::new(&mut store, "stem.sep3", base, base, 1, seed),
        };
        let mut nodes = Vec::with_capacity(space.num_nodes());
        for &n in space.nodes() {
            nodes.push(NodeParams::new(&mut store, &space, n, cfg.gate_downsample, seed)?);
        }
        let lateral = (0..space.final_scales())
            .map(|s| {
                let c = space.channels(s);
                nn::he_normal(&mut store, &format!("decoder.s{s}"), Shape::new(base, c, 1, 1), c, seed)
            })
            .collect();
        let classifier =
            nn::normal(&mut store, "decoder.classifier", Shape::new(cfg.classes, base, 1, 1), CLASSIFIER_STD, seed);
        Ok(Network { cfg, space, store, stem, nodes, decoder: DecoderParams { lateral, classifier } })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn space(&self) -> &RoutingSpace {
        &self.space
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn node(&self, n: NodeId) -> Result<&NodeParams> {
        Ok(&self.nodes[self.space.node_index(n)?])
    }

    pub fn nodes(&self) -> &[NodeParams] {
        &self.nodes
    }

    pub fn stem(&self) -> &StemParams {
        &self.stem
    }

    pub fn decoder(&self) -> &DecoderParams {
        &self.decoder
    }

    pub fn cost_model(&self, input: Shape) -> Result<CostModel> {
        CostModel::new(&self.space, input, self.cfg.classes, self.cfg.gate_downsample)
    }

    /// Cost of the all-open space at `input`, gates included iff `with_gates`.
    pub fn real_total(&self, input: Shape, with_gates: bool) -> Result<f64> {
        Ok(self.cost_model(input)?.full_macs(with_gates) as f64)
    }

    pub fn stem_forward(&self, fw: &mut Forward<'_>, images: Var) -> Result<Var> {
        stem_output_shape(fw.graph.shape(images), self.cfg.base_channels)?;
        let x = nn::conv1x1(fw, images, self.stem.entry, 2)?;
        let x = nn::sepconv3x3(fw, x, &self.stem.sep1)?;
        let x = nn::sepconv3x3(fw, x, &self.stem.sep2)?;
        nn::sepconv3x3(fw, x, &self.stem.sep3)
    }

    /// Logits for a batch of images, with the routes taken and the expected
    /// cost. In pruned inference every sample runs on its own, so cells and
    /// paths are skipped per sample.
    pub fn forward(&self, fw: &mut Forward<'_>, images: &Tensor, gating: &Gating, exec: Exec) -> Result<ForwardOutput> {
        let shape = images.shape();
        stem_output_shape(shape, self.cfg.base_channels)?;
        if shape.batch() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if let Gating::Frozen(mask) = gating {
            let check = crate::space::validate_mask(&self.space, mask);
            if !check.is_ok() {
                let list: Vec<String> = check.violations.iter().map(ToString::to_string).collect();
                return Err(Error::Validation(list.join("; ")));
            }
        }
        let model = self.cost_model(shape)?;
        let real_total = model.full_macs(matches!(gating, Gating::Learned)) as f64;
        if fw.mode() == Mode::Infer && exec == Exec::Pruned && shape.batch() > 1 {
            let b = shape.batch();
            let mut logits = Vec::with_capacity(b);
            let mut costs = Vec::with_capacity(b);
            let mut routes = Vec::new();
            let mut trace = Trace::default();
            for i in 0..b {
                let x = fw.graph.constant(images.sample(i));
                let part = self.forward_batch(fw, x, gating, exec, &model)?;
                logits.push(part.logits);
                costs.push(part.expected_cost);
                routes.extend(part.routes.into_iter().map(|r| Route { sample: i, ..r }));
                trace.merge(part.trace);
            }
            let logits = fw.graph.concat_batch(&logits)?;
            let total = fw.graph.sum_of(&costs)?;
            let expected_cost = fw.graph.scale(total, 1.0 / b as f64);
            return Ok(ForwardOutput { logits, expected_cost, real_total, routes, trace });
        }
        let x = fw.graph.constant(images.clone());
        let mut out = self.forward_batch(fw, x, gating, exec, &model)?;
        out.real_total = real_total;
        Ok(out)
    }

    fn forward_batch(&self, fw: &mut Forward<'_>, images: Var, gating: &Gating, exec: Exec, model: &CostModel) -> Result<ForwardOutput> {
        let batch = fw.graph.shape(images).batch();
        let stem = self.stem_forward(fw, images)?;

        let mut outputs: BTreeMap<NodeId, ([Option<Var>; 3], [Vec<bool>; 3])> = BTreeMap::new();
        let mut cost_terms: Vec<Var> = Vec::new();
        let mut cost_const = model.fixed().macs as f64 * batch as f64;
        let mut routes = Vec::new();
        let mut trace = Trace::default();

        for p in &self.nodes {
            let n = p.id;
            let (x, live) = if n == NodeId::ENTRY {
                (stem, vec![true; batch])
            } else {
                let mut inputs = [None, None, None];
                let mut live = vec![false; batch];
                for (src, kind) in self.space.predecessors(n) {
                    if let Some((paths, path_live)) = outputs.get(&src) {
                        let j = kind.index();
                        if let Some(v) = paths[j] {
                            // Slot order: from the finer scale, same scale, coarser scale.
                            let slot = match kind {
                                PathKind::Down => 0,
                                PathKind::Keep => 1,
                                PathKind::Up => 2,
                            };
                            inputs[slot] = Some(v);
                            for (l, &pl) in live.iter_mut().zip(&path_live[j]) {
                                *l |= pl;
                            }
                        }
                    }
                }
                if inputs.iter().all(Option::is_none) {
                    continue;
                }
                (aggregate_inputs(&mut fw.graph, inputs[0], inputs[1], inputs[2])?, live)
            };
            let source = match gating {
                Gating::Learned => AlphaSource::Learned,
                Gating::Frozen(mask) => AlphaSource::Fixed(mask.get(n)),
            };
            let out = node_forward(fw, x, p, source, &live, exec)?;

            let c = model.node(n)?;
            let path_macs = c.paths.map(|p| p.macs as f64);
            match gating {
                Gating::Learned => {
                    let mx = fw.graph.channel_max(out.alpha);
                    let cell = fw.graph.scale(mx, c.cell.macs as f64);
                    let paths = fw.graph.channel_dot(out.alpha, &path_macs)?;
                    let per_sample = fw.graph.add(cell, paths)?;
                    cost_terms.push(fw.graph.sum_all(per_sample));
                    cost_const += c.gate.macs as f64 * live.iter().filter(|&&l| l).count() as f64;
                }
                Gating::Frozen(_) => {
                    for a in &out.decision.alpha {
                        let mx = a.iter().copied().fold(0.0, f64::max);
                        cost_const += mx * c.cell.macs as f64 + a.iter().zip(&path_macs).map(|(x, m)| x * m).sum::<f64>();
                    }
                }
            }
            for (b, a) in out.decision.alpha.iter().enumerate() {
                if live[b] {
                    routes.push(Route { sample: b, node: n, alpha: *a });
                }
            }
            if out.cell_ran {
                trace.cells.insert(n);
            }
            for kind in PathKind::ALL {
                if out.paths[kind.index()].is_some() && out.decision.any_open(kind.index()) {
                    trace.paths.insert((n, kind));
                }
            }
            if out.skipped.iter().any(|&s| s) {
                trace.skipped.insert(n);
            }
            outputs.insert(n, (out.paths, out.path_live));
        }

        routes.sort_by_key(|r: &Route| (r.sample, r.node));
        let logits = self.decoder_forward(fw, &outputs, images)?;
        let total = if cost_terms.is_empty() {
            fw.graph.constant(Tensor::scalar(cost_const))
        } else {
            let s = fw.graph.sum_of(&cost_terms)?;
            fw.graph.add_scalar(s, cost_const)
        };
        let expected_cost = fw.graph.scale(total, 1.0 / batch as f64);
        Ok(ForwardOutput { logits, expected_cost, real_total: 0.0, routes, trace })
    }

    fn decoder_forward(
        &self,
        fw: &mut Forward<'_>,
        outputs: &BTreeMap<NodeId, ([Option<Var>; 3], [Vec<bool>; 3])>,
        images: Var,
    ) -> Result<Var> {
        let img = fw.graph.shape(images);
        let last = self.space.layers();
        let keep = PathKind::Keep.index();
        let mut acc: Option<Var> = None;
        for s in (0..self.space.final_scales()).rev() {
            let n = NodeId::new(last, s);
            let feat = match outputs.get(&n).and_then(|(p, _)| p[keep]) {
                Some(v) => v,
                None => {
                    let (h, w) = crate::cost::scale_hw(img.height(), img.width(), s);
                    fw.graph.constant(Tensor::zeros(Shape::new(img.batch(), self.space.channels(s), h, w)))
                }
            };
            let lat = nn::conv1x1(fw, feat, self.decoder.lateral[s], 1)?;
            acc = Some(match acc {
                None => lat,
                Some(a) => {
                    let up = nn::bilinear_upsample_x2(&mut fw.graph, a)?;
                    fw.graph.add(up, lat)?
                }
            });
        }
        let acc = acc.ok_or_else(|| Error::Structure("decoder has no input scales".into()))?;
        let logits = nn::conv1x1(fw, acc, self.decoder.classifier, 1)?;
        fw.graph.upsample(logits, 4)
    }
}
