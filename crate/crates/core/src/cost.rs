//! Analytic multiply-accumulate and parameter accounting.
//!
//! All costs are per sample. Depthwise and 1x1 convolutions are counted at
//! their output resolution; batch norm, ReLU and tanh cost one MAC per
//! element; identity, addition and activating-factor scaling are free.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{ArchMask, NodeId, PathKind, RoutingSpace, validate_mask};
use crate::tensor::Shape;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCost {
    pub macs: u64,
    pub params: u64,
}

impl OpCost {
    pub const ZERO: OpCost = OpCost { macs: 0, params: 0 };

    pub fn new(macs: u64, params: u64) -> Self {
        OpCost { macs, params }
    }
}

impl Add for OpCost {
    type Output = OpCost;
    fn add(self, o: OpCost) -> OpCost {
        OpCost { macs: self.macs + o.macs, params: self.params + o.params }
    }
}

impl AddAssign for OpCost {
    fn add_assign(&mut self, o: OpCost) {
        *self = *self + o;
    }
}

impl std::iter::Sum for OpCost {
    fn sum<I: Iterator<Item = OpCost>>(iter: I) -> OpCost {
        iter.fold(OpCost::ZERO, Add::add)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpDesc {
    Identity,
    /// Depthwise 3x3, padding 1.
    Depthwise3x3 { stride: usize },
    Conv1x1 { c_out: usize, stride: usize },
    Bilinear { factor: usize },
    AvgPool { k: usize },
    GlobalAvgPool,
    BatchNorm,
    Relu,
    Tanh,
}

impl FromStr for OpDesc {
    type Err = Error;

    /// `identity`, `dw3x3[:stride]`, `conv1x1:c_out[:stride]`, `bilinear:factor`,
    /// `avgpool:k`, `gap`, `bn`, `relu`, `tanh`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize, default: Option<usize>| -> Result<usize> {
            match parts.get(i) {
                Some(p) => p.parse().map_err(|_| Error::Descriptor(format!("bad number `{p}` in `{s}`"))),
                None => default.ok_or_else(|| Error::Descriptor(format!("`{s}` is missing an argument"))),
            }
        };
        let op = match parts[0] {
            "identity" => OpDesc::Identity,
            "dw3x3" => OpDesc::Depthwise3x3 { stride: num(1, Some(1))? },
            "conv1x1" => OpDesc::Conv1x1 { c_out: num(1, None)?, stride: num(2, Some(1))? },
            "bilinear" => OpDesc::Bilinear { factor: num(1, None)? },
            "avgpool" => OpDesc::AvgPool { k: num(1, None)? },
            "gap" => OpDesc::GlobalAvgPool,
            "bn" => OpDesc::BatchNorm,
            "relu" => OpDesc::Relu,
            "tanh" => OpDesc::Tanh,
            other => return Err(Error::Descriptor(format!("unknown operation `{other}`"))),
        };
        Ok(op)
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Output shape of an operation on a single sample.
pub fn op_output(op: &OpDesc, input: Shape) -> Result<Shape> {
    let [b, c, h, w] = input.0;
    let positive = |x: usize, what: &str| -> Result<usize> {
        if x == 0 {
            Err(Error::Descriptor(format!("{what} must be positive")))
        } else {
            Ok(x)
        }
    };
    Ok(match *op {
        OpDesc::Identity | OpDesc::BatchNorm | OpDesc::Relu | OpDesc::Tanh => input,
        OpDesc::Depthwise3x3 { stride } => {
            let s = positive(stride, "stride")?;
            Shape::new(b, c, ceil_div(h, s), ceil_div(w, s))
        }
        OpDesc::Conv1x1 { c_out, stride } => {
            let s = positive(stride, "stride")?;
            Shape::new(b, positive(c_out, "output channels")?, ceil_div(h, s), ceil_div(w, s))
        }
        OpDesc::Bilinear { factor } => {
            let f = positive(factor, "upsampling factor")?;
            Shape::new(b, c, h * f, w * f)
        }
        OpDesc::AvgPool { k } => {
            let k = positive(k, "pool size")?;
            Shape::new(b, c, ceil_div(h, k), ceil_div(w, k))
        }
        OpDesc::GlobalAvgPool => Shape::new(b, c, 1, 1),
    })
}

/// Cost of one operation applied to one sample of shape `input` (batch ignored).
pub fn op_cost(op: &OpDesc, input: Shape) -> Result<OpCost> {
    let [_, c, h, w] = input.0;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("cannot cost an operation on {input}")));
    }
    let out = op_output(op, input)?;
    let (c, hw) = (c as u64, (h * w) as u64);
    let out_hw = out.plane() as u64;
    Ok(match *op {
        OpDesc::Identity => OpCost::ZERO,
        OpDesc::Depthwise3x3 { .. } => OpCost::new(9 * c * out_hw, 9 * c),
        OpDesc::Conv1x1 { c_out, .. } => OpCost::new(c * c_out as u64 * out_hw, c * c_out as u64),
        OpDesc::Bilinear { .. } => OpCost::new(4 * c * out_hw, 0),
        OpDesc::AvgPool { .. } | OpDesc::GlobalAvgPool => OpCost::new(c * hw, 0),
        OpDesc::BatchNorm => OpCost::new(c * hw, 2 * c),
        OpDesc::Relu | OpDesc::Tanh => OpCost::new(c * hw, 0),
    })
}

/// Cost of a chain of operations, threading the shape through.
pub fn chain_cost(ops: &[OpDesc], input: Shape) -> Result<(OpCost, Shape)> {
    let mut total = OpCost::ZERO;
    let mut shape = input;
    for op in ops {
        total += op_cost(op, shape)?;
        shape = op_output(op, shape)?;
    }
    Ok((total, shape))
}

pub fn sepconv_ops(c_out: usize, stride: usize) -> [OpDesc; 4] {
    [OpDesc::Depthwise3x3 { stride }, OpDesc::Conv1x1 { c_out, stride: 1 }, OpDesc::BatchNorm, OpDesc::Relu]
}

/// Hidden width of a gate on `c` channels.
pub fn gate_hidden(c: usize) -> usize {
    (c / 2).max(1)
}

/// Spatial factor of the optional gate-input downsampling.
pub const GATE_POOL: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCosts {
    pub cell: OpCost,
    pub gate: OpCost,
    /// Indexed by [`PathKind::index`]; illegal paths cost zero.
    pub paths: [OpCost; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Convention {
    /// One multiply-accumulate counts once.
    Macs,
    /// One multiply-accumulate counts as two floating-point operations.
    TwoMacs,
}

impl Convention {
    pub fn factor(self) -> u64 {
        match self {
            Convention::Macs => 1,
            Convention::TwoMacs => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Convention::Macs => "macs",
            Convention::TwoMacs => "2macs",
        }
    }
}

impl FromStr for Convention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macs" => Ok(Convention::Macs),
            "2macs" | "flops" => Ok(Convention::TwoMacs),
            _ => Err(Error::Argument(format!("unknown FLOPs convention `{s}` (use macs or 2macs)"))),
        }
    }
}

/// Per-component costs of a whole network at one input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CostModel {
    pub input: Shape,
    pub classes: usize,
    pub gate_downsample: bool,
    pub stem: OpCost,
    pub decoder: OpCost,
    nodes: BTreeMap<NodeId, NodeCosts>,
}

/// Feature size of `scale` for an image of height/width `(h, w)`.
pub fn scale_hw(h: usize, w: usize, scale: usize) -> (usize, usize) {
    (h / (4 << scale), w / (4 << scale))
}

pub fn check_input(input: Shape) -> Result<()> {
    let [_, c, h, w] = input.0;
    if c == 0 || h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Shape(format!("input spatial size must be a positive multiple of 32, got {input}")));
    }
    Ok(())
}

impl CostModel {
    /// `input` is `(_, C, H, W)`; H and W must be multiples of 32.
    pub fn new(space: &RoutingSpace, input: Shape, classes: usize, gate_downsample: bool) -> Result<Self> {
        check_input(input)?;
        if classes == 0 {
            return Err(Error::Argument("class count must be positive".into()));
        }
        let [_, c_in, h, w] = input.0;
        let base = space.base_channels();
        let one = |c, h, w| Shape::new(1, c, h, w);

        let (entry, half) = chain_cost(&[OpDesc::Conv1x1 { c_out: base, stride: 2 }], one(c_in, h, w))?;
        let (s1, half) = chain_cost(&sepconv_ops(base, 1), half)?;
        let (s2, quarter) = chain_cost(&sepconv_ops(base, 2), half)?;
        let (s3, _) = chain_cost(&sepconv_ops(base, 1), quarter)?;
        let stem = entry + s1 + s2 + s3;

        let mut nodes = BTreeMap::new();
        for &n in space.nodes() {
            let c = space.channels(n.scale);
            let (hs, ws) = scale_hw(h, w, n.scale);
            let x = one(c, hs, ws);
            let cell = chain_cost(&sepconv_ops(c, 1), x)?.0 + chain_cost(&sepconv_ops(c, 1), x)?.0;
            let cg = gate_hidden(c);
            let mut gate_ops = Vec::new();
            if gate_downsample {
                gate_ops.push(OpDesc::AvgPool { k: GATE_POOL });
            }
            gate_ops.extend([
                OpDesc::Conv1x1 { c_out: cg, stride: 1 },
                OpDesc::BatchNorm,
                OpDesc::Relu,
                OpDesc::GlobalAvgPool,
                OpDesc::Conv1x1 { c_out: 3, stride: 1 },
            ]);
            let (mut gate, g_shape) = chain_cost(&gate_ops, x)?;
            gate += OpCost::new(0, 3); // bias
            gate += op_cost(&OpDesc::Tanh, g_shape)?;
            let legal = space.legal_paths(n);
            let mut paths = [OpCost::ZERO; 3];
            if legal[PathKind::Up.index()] {
                paths[0] = chain_cost(&[OpDesc::Conv1x1 { c_out: c / 2, stride: 1 }, OpDesc::Bilinear { factor: 2 }], x)?.0;
            }
            if legal[PathKind::Down.index()] {
                paths[2] = op_cost(&OpDesc::Conv1x1 { c_out: 2 * c, stride: 2 }, x)?;
            }
            nodes.insert(n, NodeCosts { cell, gate, paths });
        }

        let mut decoder = OpCost::ZERO;
        let top = space.final_scales();
        for s in 0..top {
            let (hs, ws) = scale_hw(h, w, s);
            decoder += op_cost(&OpDesc::Conv1x1 { c_out: base, stride: 1 }, one(space.channels(s), hs, ws))?;
        }
        for s in (1..top).rev() {
            let (hs, ws) = scale_hw(h, w, s);
            decoder += op_cost(&OpDesc::Bilinear { factor: 2 }, one(base, hs, ws))?;
        }
        let (h0, w0) = scale_hw(h, w, 0);
        decoder += op_cost(&OpDesc::Conv1x1 { c_out: classes, stride: 1 }, one(base, h0, w0))?;
        decoder += op_cost(&OpDesc::Bilinear { factor: 4 }, one(classes, h0, w0))?;

        Ok(CostModel { input, classes, gate_downsample, stem, decoder, nodes })
    }

    pub fn node(&self, n: NodeId) -> Result<&NodeCosts> {
        self.nodes.get(&n).ok_or_else(|| Error::Lookup(format!("no cost entry for node {n}")))
    }

    pub fn nodes(&self) -> &BTreeMap<NodeId, NodeCosts> {
        &self.nodes
    }

    /// Always-executed cost outside the routing space.
    pub fn fixed(&self) -> OpCost {
        self.stem + self.decoder
    }

    /// MACs of the whole space with every legal path open.
    pub fn full_macs(&self, with_gates: bool) -> u64 {
        self.fixed().macs
            + self
                .nodes
                .values()
                .map(|c| c.cell.macs + c.paths.iter().map(|p| p.macs).sum::<u64>() + if with_gates { c.gate.macs } else { 0 })
                .sum::<u64>()
    }

    pub fn param_count(&self, with_gates: bool) -> u64 {
        self.fixed().params
            + self
                .nodes
                .values()
                .map(|c| c.cell.params + c.paths.iter().map(|p| p.params).sum::<u64>() + if with_gates { c.gate.params } else { 0 })
                .sum::<u64>()
    }

    /// Expected cost of one node over a batch: the mean over samples of
    /// `max(a) * cell + gate + sum_j a_j * path_j`.
    pub fn node_expected_cost(&self, n: NodeId, alphas: &[[f64; 3]]) -> Result<f64> {
        let c = self.node(n)?;
        node_expected_cost(alphas, c)
    }

    /// Sum of node expected costs plus stem and decoder.
    pub fn space_expected_cost(&self, alphas: &BTreeMap<NodeId, Vec<[f64; 3]>>) -> Result<f64> {
        let mut total = self.fixed().macs as f64;
        for (&n, c) in &self.nodes {
            let a = alphas.get(&n).ok_or_else(|| Error::Coverage(format!("no activating factors for node {n}")))?;
            total += node_expected_cost(a, c)?;
        }
        Ok(total)
    }
}

pub fn node_expected_cost(alphas: &[[f64; 3]], c: &NodeCosts) -> Result<f64> {
    if alphas.is_empty() {
        return Err(Error::Argument("expected cost needs at least one sample".into()));
    }
    let mut sum = 0.0;
    for a in alphas {
        let max = a.iter().copied().fold(0.0, f64::max);
        sum += max * c.cell.macs as f64
            + c.gate.macs as f64
            + a.iter().zip(&c.paths).map(|(x, p)| x * p.macs as f64).sum::<f64>();
    }
    Ok(sum / alphas.len() as f64)
}

/// `(expected / real_total - mu)^2`.
pub fn budget_loss(expected: f64, real_total: f64, mu: f64) -> Result<f64> {
    if !(real_total > 0.0) {
        return Err(Error::Argument(format!("real total cost must be positive, got {real_total}")));
    }
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Argument(format!("attenuation factor must lie in [0, 1], got {mu}")));
    }
    let d = expected / real_total - mu;
    Ok(d * d)
}

pub fn param_count(space: &RoutingSpace, with_gates: bool, classes: usize) -> Result<u64> {
    // Parameter counts do not depend on resolution.
    Ok(CostModel::new(space, Shape::new(1, 3, 32, 32), classes, false)?.param_count(with_gates))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeCostRow {
    pub node: NodeId,
    pub cell: OpCost,
    pub gate: OpCost,
    pub transforms: OpCost,
}

impl NodeCostRow {
    pub fn total(&self) -> OpCost {
        self.cell + self.gate + self.transforms
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub name: Option<String>,
    pub input: Shape,
    pub classes: usize,
    pub convention: Convention,
    pub gates: bool,
    pub stem: OpCost,
    pub decoder: OpCost,
    pub nodes: Vec<NodeCostRow>,
    pub total: OpCost,
}

impl CostReport {
    /// Total in the report's FLOPs convention.
    pub fn flops(&self) -> u64 {
        self.total.macs * self.convention.factor()
    }

    pub fn breakdown_sum(&self) -> OpCost {
        self.stem + self.decoder + self.nodes.iter().map(NodeCostRow::total).sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let [_, c, h, w] = self.input.0;
        if let Some(n) = &self.name {
            let _ = writeln!(s, "name = {n}");
        }
        let _ = writeln!(s, "input = {c}x{h}x{w}");
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(s, "convention = {}", self.convention.name());
        let _ = writeln!(s, "gates = {}", self.gates);
        let _ = writeln!(s, "# part layer scale cell_macs gate_macs transform_macs params");
        let _ = writeln!(s, "stem - - {} 0 0 {}", self.stem.macs, self.stem.params);
        for r in &self.nodes {
            let _ = writeln!(
                s,
                "node {} {} {} {} {} {}",
                r.node.layer,
                r.node.scale,
                r.cell.macs,
                r.gate.macs,
                r.transforms.macs,
                r.total().params
            );
        }
        let _ = writeln!(s, "decoder - - {} 0 0 {}", self.decoder.macs, self.decoder.params);
        let _ = writeln!(s, "total_macs = {}", self.total.macs);
        let _ = writeln!(s, "total_flops = {}", self.flops());
        let _ = writeln!(s, "total_params = {}", self.total.params);
        s
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Cost of executing exactly the open paths of `mask`. A node's cell (and
/// gate, when `with_gates`) counts iff any of its paths is open.
pub fn static_cost_report(
    space: &RoutingSpace,
    mask: &ArchMask,
    input: Shape,
    classes: usize,
    convention: Convention,
    with_gates: bool,
) -> Result<CostReport> {
    let check = validate_mask(space, mask);
    if !check.is_ok() {
        let list: Vec<String> = check.violations.iter().map(ToString::to_string).collect();
        return Err(Error::Validation(list.join("; ")));
    }
    let model = CostModel::new(space, input, classes, false)?;
    Ok(report_from_model(&model, mask, convention, with_gates))
}

pub fn report_from_model(model: &CostModel, mask: &ArchMask, convention: Convention, with_gates: bool) -> CostReport {
    let mut rows = Vec::new();
    for (&n, c) in model.nodes() {
        let v = mask.get(n);
        if v.iter().all(|&x| x <= 0.0) {
            continue;
        }
        let transforms = PathKind::ALL.iter().filter(|k| v[k.index()] > 0.0).map(|k| c.paths[k.index()]).sum();
        rows.push(NodeCostRow { node: n, cell: c.cell, gate: if with_gates { c.gate } else { OpCost::ZERO }, transforms });
    }
    let mut report = CostReport {
        name: mask.name.clone(),
        input: model.input.with_batch(1),
        classes: model.classes,
        convention,
        gates: with_gates,
        stem: model.stem,
        decoder: model.decoder,
        nodes: rows,
        total: OpCost::ZERO,
    };
    report.total = report.breakdown_sum();
    report
}
