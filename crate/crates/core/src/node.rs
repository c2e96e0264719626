//! One routing node: input aggregation, the cell, the soft conditional gate,
//! scale transforms and inference-time cell skipping.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, BatchNormParams, Forward, Mode, SepConvParams};
use crate::params::{ParamId, ParamStore};
use crate::space::{NodeId, PathKind, RoutingSpace};
use crate::tensor::{Shape, Tensor};
use crate::cost::{gate_hidden, GATE_POOL};

/// Initial value of every gate bias.
pub const GATE_BIAS_INIT: f64 = 1.5;

/// `max(0, tanh(g))`.
pub fn activating_factor(g: f64) -> f64 {
    g.tanh().max(0.0)
}

/// Identity branch plus two stacked separable convolutions.
#[derive(Clone, Debug)]
pub struct CellParams {
    pub sep1: SepConvParams,
    pub sep2: SepConvParams,
}

impl CellParams {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, seed: u64) -> Self {
        CellParams {
            sep1: SepConvParams::new(store, &format!("{prefix}.sep1"), channels, channels, 1, seed),
            sep2: SepConvParams::new(store, &format!("{prefix}.sep2"), channels, channels, 1, seed),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GateParams {
    /// `(C/2, C, 1, 1)`.
    pub w1: ParamId,
    pub bn: BatchNormParams,
    /// `(3, C/2, 1, 1)`, zero at initialisation.
    pub w2: ParamId,
    /// `(1, 3, 1, 1)`.
    pub beta: ParamId,
    pub downsample_input: bool,
    pub channels: usize,
}

impl GateParams {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, downsample_input: bool, seed: u64) -> Self {
        let hidden = gate_hidden(channels);
        GateParams {
            w1: nn::he_normal(store, &format!("{prefix}.w1"), Shape::new(hidden, channels, 1, 1), channels, seed),
            bn: BatchNormParams::new(store, &format!("{prefix}.bn"), hidden),
            w2: store.add(format!("{prefix}.w2"), Tensor::zeros(Shape::new(3, hidden, 1, 1))),
            beta: store.add(format!("{prefix}.beta"), Tensor::full(Shape::new(1, 3, 1, 1), GATE_BIAS_INIT)),
            downsample_input,
            channels,
        }
    }
}

/// Weights of the non-identity scale transforms leaving a node.
#[derive(Clone, Debug, Default)]
pub struct TransformParams {
    /// `(C/2, C, 1, 1)`, followed by bilinear x2.
    pub up: Option<ParamId>,
    /// `(2C, C, 1, 1)` at stride 2.
    pub down: Option<ParamId>,
}

impl TransformParams {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, legal: [bool; 3], seed: u64) -> Self {
        let up = legal[PathKind::Up.index()]
            .then(|| nn::he_normal(store, &format!("{prefix}.up"), Shape::new(channels / 2, channels, 1, 1), channels, seed));
        let down = legal[PathKind::Down.index()]
            .then(|| nn::he_normal(store, &format!("{prefix}.down"), Shape::new(2 * channels, channels, 1, 1), channels, seed));
        TransformParams { up, down }
    }
}

#[derive(Clone, Debug)]
pub struct NodeParams {
    pub id: NodeId,
    pub channels: usize,
    pub legal: [bool; 3],
    pub cell: CellParams,
    pub gate: GateParams,
    pub transforms: TransformParams,
}

impl NodeParams {
    pub fn new(store: &mut ParamStore, space: &RoutingSpace, id: NodeId, gate_downsample: bool, seed: u64) -> Result<Self> {
        if !space.contains(id) {
            return Err(Error::Lookup(format!("node {id} is not in the space")));
        }
        let channels = space.channels(id.scale);
        let tag = format!("l{}s{}", id.layer, id.scale);
        let legal = space.legal_paths(id);
        Ok(NodeParams {
            id,
            channels,
            legal,
            cell: CellParams::new(store, &format!("cell.{tag}"), channels, seed),
            gate: GateParams::new(store, &format!("gate.{tag}"), channels, gate_downsample, seed),
            transforms: TransformParams::new(store, &format!("path.{tag}"), channels, legal, seed),
        })
    }
}

/// Per-sample activating factors and the paths they open.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub alpha: Vec<[f64; 3]>,
    pub open: Vec<[bool; 3]>,
}

impl GateDecision {
    pub fn new(alpha: Vec<[f64; 3]>, legal: [bool; 3]) -> Self {
        let open = alpha.iter().map(|a| [0, 1, 2].map(|j| legal[j] && a[j] > 0.0)).collect();
        GateDecision { alpha, open }
    }

    pub fn batch(&self) -> usize {
        self.alpha.len()
    }

    /// Whether any sample opens path `j`.
    pub fn any_open(&self, j: usize) -> bool {
        self.open.iter().any(|o| o[j])
    }

    /// Samples whose every path is closed.
    pub fn closed(&self) -> Vec<bool> {
        self.open.iter().map(|o| !o.iter().any(|&x| x)).collect()
    }
}

fn decision_of(g: &Graph, alpha: Var, legal: [bool; 3]) -> GateDecision {
    let v = g.value(alpha);
    let rows = (0..v.shape().batch()).map(|b| [0, 1, 2].map(|j| v.at(b, j, 0, 0))).collect();
    GateDecision::new(rows, legal)
}

/// `(B, 3, 1, 1)` tensor repeating `row` for every sample.
fn per_sample(batch: usize, row: [f64; 3]) -> Tensor {
    let data = (0..batch).flat_map(|_| row).collect();
    Tensor::from_vec(Shape::new(batch, 3, 1, 1), data).expect("shape")
}

pub fn legal_row(legal: [bool; 3]) -> [f64; 3] {
    legal.map(|l| if l { 1.0 } else { 0.0 })
}

/// Sum of the inputs that are present: from the finer scale, the same scale
/// and the coarser scale of the previous layer.
pub fn aggregate_inputs(g: &mut Graph, above: Option<Var>, same: Option<Var>, below: Option<Var>) -> Result<Var> {
    let present: Vec<Var> = [above, same, below].into_iter().flatten().collect();
    if present.is_empty() {
        return Err(Error::Argument("a node needs at least one input".into()));
    }
    g.sum_of(&present)
}

/// `H = X + sep2(sep1(X))`.
pub fn cell_forward(fw: &mut Forward<'_>, x: Var, p: &CellParams) -> Result<Var> {
    let y = nn::sepconv3x3(fw, x, &p.sep1)?;
    let y = nn::sepconv3x3(fw, y, &p.sep2)?;
    fw.graph.add(x, y)
}

#[derive(Clone, Debug)]
pub struct GateOutput {
    /// Pre-activation `G`, `(B, 3, 1, 1)`.
    pub logits: Var,
    /// `max(0, tanh(G))` with illegal paths zeroed, `(B, 3, 1, 1)`.
    pub alpha: Var,
    pub decision: GateDecision,
}

pub fn gate_forward(fw: &mut Forward<'_>, x: Var, p: &GateParams, legal: [bool; 3]) -> Result<GateOutput> {
    let s = fw.graph.shape(x);
    if s.channels() != p.channels {
        return Err(Error::Shape(format!("gate expects {} channels, got {s}", p.channels)));
    }
    let input = if p.downsample_input { fw.graph.avg_pool(x, GATE_POOL)? } else { x };
    let h = nn::conv1x1(fw, input, p.w1, 1)?;
    let h = nn::batch_norm(fw, h, &p.bn)?;
    let h = fw.graph.relu(h);
    let h = nn::global_avg_pool(&mut fw.graph, h)?;
    let g = nn::conv1x1(fw, h, p.w2, 1)?;
    let beta = fw.param(p.beta);
    let logits = fw.graph.add_bias(g, beta)?;
    let a = fw.graph.tanh_gate(logits);
    let alpha = if legal.iter().all(|&l| l) { a } else { fw.graph.mul_const(a, per_sample(s.batch(), legal_row(legal)))? };
    let decision = decision_of(&fw.graph, alpha, legal);
    Ok(GateOutput { logits, alpha, decision })
}

/// `alpha_j * T_j(H)` with a per-sample `(B,1,1,1)` factor.
pub fn transform(fw: &mut Forward<'_>, h: Var, alpha_j: Var, kind: PathKind, t: &TransformParams) -> Result<Var> {
    let y = match kind {
        PathKind::Keep => h,
        PathKind::Down => {
            let w = t.down.ok_or_else(|| Error::Legality("down path is illegal at this node".into()))?;
            nn::conv1x1(fw, h, w, 2)?
        }
        PathKind::Up => {
            let w = t.up.ok_or_else(|| Error::Legality("up path is illegal at this node".into()))?;
            let y = nn::conv1x1(fw, h, w, 1)?;
            nn::bilinear_upsample_x2(&mut fw.graph, y)?
        }
    };
    fw.graph.mul_sample(y, alpha_j)
}

/// Where a node's activating factors come from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlphaSource {
    /// Run the node's gate.
    Learned,
    /// Fixed values for every sample; the gate does not run.
    Fixed([f64; 3]),
}

/// How much work a node may skip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    /// Skip paths closed for the whole batch and, in inference, cells whose
    /// every sample is closed.
    Pruned,
    /// Compute every cell and legal path, then mask.
    Dense,
}

#[derive(Clone, Debug)]
pub struct NodeOutput {
    /// Outputs per path `(up, keep, down)`; `None` when not computed.
    pub paths: [Option<Var>; 3],
    /// Activating factors after legality and liveness masking, `(B,3,1,1)`.
    pub alpha: Var,
    /// Pre-activation of a learned gate.
    pub logits: Option<Var>,
    pub decision: GateDecision,
    pub cell_ran: bool,
    /// Per sample: whether path `j` carries signal to the next layer.
    pub path_live: [Vec<bool>; 3],
    /// Samples that took the inference skip (`H = X`, keep passes `X`).
    pub skipped: Vec<bool>,
}

/// Evaluate one node on its aggregated input `x`.
///
/// `live[b]` says whether sample `b` reaches this node at all; dead samples
/// get all-zero activating factors. In training the cell always runs and
/// `Y_j = a_j * T_j(H)`. In inference a sample whose factors are all zero
/// skips the cell: its keep output is `X` and the other paths are zero.
pub fn node_forward(
    fw: &mut Forward<'_>,
    x: Var,
    p: &NodeParams,
    source: AlphaSource,
    live: &[bool],
    exec: Exec,
) -> Result<NodeOutput> {
    let s = fw.graph.shape(x);
    if s.channels() != p.channels {
        return Err(Error::Shape(format!("node {} expects {} channels, got {s}", p.id, p.channels)));
    }
    let batch = s.batch();
    if live.len() != batch {
        return Err(Error::Shape(format!("liveness for {} samples, batch is {batch}", live.len())));
    }
    let (mut alpha, logits) = match source {
        AlphaSource::Learned => {
            let out = gate_forward(fw, x, &p.gate, p.legal)?;
            (out.alpha, Some(out.logits))
        }
        AlphaSource::Fixed(row) => {
            let row = [0, 1, 2].map(|j| if p.legal[j] { row[j] } else { 0.0 });
            if let Some(bad) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Argument(format!("fixed activating factor {bad} outside [0, 1]")));
            }
            (fw.graph.constant(per_sample(batch, row)), None)
        }
    };
    if live.iter().any(|&l| !l) {
        let mask: Vec<f64> = live.iter().flat_map(|&l| [if l { 1.0 } else { 0.0 }; 3]).collect();
        alpha = fw.graph.mul_const(alpha, Tensor::from_vec(Shape::new(batch, 3, 1, 1), mask)?)?;
    }
    let decision = decision_of(&fw.graph, alpha, p.legal);
    let infer = fw.mode() == Mode::Infer;
    let skipped: Vec<bool> =
        decision.closed().iter().zip(live).map(|(&c, &l)| infer && c && l).collect();
    let all_skipped = skipped.iter().zip(live).all(|(&sk, &l)| sk || !l);

    let mut paths: [Option<Var>; 3] = [None, None, None];
    let mut cell_ran = false;
    if !(infer && exec == Exec::Pruned && all_skipped) {
        let h = cell_forward(fw, x, &p.cell)?;
        cell_ran = true;
        for kind in PathKind::ALL {
            let j = kind.index();
            if !p.legal[j] || (exec == Exec::Pruned && !decision.any_open(j)) {
                continue;
            }
            let a_j = fw.graph.channel(alpha, j)?;
            paths[j] = Some(transform(fw, h, a_j, kind, &p.transforms)?);
        }
    }
    if skipped.iter().any(|&sk| sk) {
        let k = PathKind::Keep.index();
        paths[k] = Some(match paths[k] {
            Some(y) => fw.graph.select(&skipped, x, y)?,
            None => {
                let ind: Vec<f64> = skipped.iter().map(|&sk| if sk { 1.0 } else { 0.0 }).collect();
                let ind = fw.graph.constant(Tensor::from_vec(Shape::new(batch, 1, 1, 1), ind)?);
                fw.graph.mul_sample(x, ind)?
            }
        });
    }
    let path_live = [0, 1, 2].map(|j| {
        (0..batch)
            .map(|b| live[b] && (decision.open[b][j] || (j == PathKind::Keep.index() && skipped[b])))
            .collect()
    });
    Ok(NodeOutput { paths, alpha, logits, decision, cell_ran, path_live, skipped })
}
