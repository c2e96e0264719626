//! The layered routing space: nodes over four scales, legal up/keep/down
//! edges between adjacent layers, and fixed gate assignments ([`ArchMask`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of scales: 1/4, 1/8, 1/16, 1/32 of the input.
pub const NUM_SCALES: usize = 4;
pub const DEFAULT_BASE_CHANNELS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub layer: usize,
    pub scale: usize,
}

impl NodeId {
    pub const ENTRY: NodeId = NodeId { layer: 1, scale: 0 };

    pub fn new(layer: usize, scale: usize) -> Self {
        NodeId { layer, scale }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}/S{}", self.layer, self.scale)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PathKind {
    Up,
    Keep,
    Down,
}

impl PathKind {
    pub const ALL: [PathKind; 3] = [PathKind::Up, PathKind::Keep, PathKind::Down];

    /// Position in `(up, keep, down)` triples.
    pub fn index(self) -> usize {
        match self {
            PathKind::Up => 0,
            PathKind::Keep => 1,
            PathKind::Down => 2,
        }
    }

    pub fn target_scale(self, scale: usize) -> Option<usize> {
        match self {
            PathKind::Up => scale.checked_sub(1),
            PathKind::Keep => Some(scale),
            PathKind::Down => (scale + 1 < NUM_SCALES).then_some(scale + 1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PathKind::Up => "up",
            PathKind::Keep => "keep",
            PathKind::Down => "down",
        }
    }
}

/// Number of scales present at `layer` (1-based): 1, 2, 3, then 4.
pub fn scales_at(layer: usize) -> usize {
    layer.clamp(1, NUM_SCALES)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingSpace {
    layers: usize,
    base_channels: usize,
    nodes: Vec<NodeId>,
    edges: BTreeMap<NodeId, Vec<(NodeId, PathKind)>>,
}

pub fn build_space(layers: usize, base_channels: usize) -> Result<RoutingSpace> {
    RoutingSpace::new(layers, base_channels)
}

impl RoutingSpace {
    pub fn new(layers: usize, base_channels: usize) -> Result<Self> {
        if layers < 1 {
            return Err(Error::Argument("a routing space needs at least one layer".into()));
        }
        if base_channels < 1 {
            return Err(Error::Argument("base_channels must be at least 1".into()));
        }
        // Keep the widest scale's channel count representable.
        if base_channels.checked_mul(1 << (NUM_SCALES - 1)).is_none() {
            return Err(Error::Argument(format!("base_channels {base_channels} is too large")));
        }
        let mut nodes = Vec::new();
        for layer in 1..=layers {
            for scale in 0..scales_at(layer) {
                nodes.push(NodeId::new(layer, scale));
            }
        }
        let mut edges = BTreeMap::new();
        for &n in &nodes {
            let mut out = Vec::new();
            if n.layer < layers {
                for kind in PathKind::ALL {
                    if let Some(t) = kind.target_scale(n.scale) {
                        if t < scales_at(n.layer + 1) {
                            out.push((NodeId::new(n.layer + 1, t), kind));
                        }
                    }
                }
            }
            edges.insert(n, out);
        }
        Ok(RoutingSpace { layers, base_channels, nodes, edges })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels
    }

    /// Nodes in canonical order: layer-major, then scale.
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains(&self, n: NodeId) -> bool {
        n.layer >= 1 && n.layer <= self.layers && n.scale < scales_at(n.layer)
    }

    /// Position of `n` in [`nodes`](Self::nodes).
    pub fn node_index(&self, n: NodeId) -> Result<usize> {
        if !self.contains(n) {
            return Err(Error::Lookup(format!("node {n} is not in a {}-layer space", self.layers)));
        }
        let before: usize = (1..n.layer).map(scales_at).sum();
        Ok(before + n.scale)
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    /// Number of scales present in the final layer (all feed the decoder).
    pub fn final_scales(&self) -> usize {
        scales_at(self.layers)
    }

    pub fn is_final(&self, n: NodeId) -> bool {
        n.layer == self.layers
    }

    /// Successors of `n` inside the space; empty for the final layer.
    pub fn neighbors(&self, n: NodeId) -> Result<&[(NodeId, PathKind)]> {
        self.edges
            .get(&n)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("node {n} is not in a {}-layer space", self.layers)))
    }

    /// Which of a node's gate outputs `(up, keep, down)` may open. The final
    /// layer only keeps its scale, which feeds the decoder.
    pub fn legal_paths(&self, n: NodeId) -> [bool; 3] {
        if self.is_final(n) {
            return [false, true, false];
        }
        let mut legal = [false; 3];
        for &(_, kind) in self.edges.get(&n).map(Vec::as_slice).unwrap_or(&[]) {
            legal[kind.index()] = true;
        }
        legal
    }

    /// Producers of `n`: (source node, path kind) pairs from layer `n.layer - 1`.
    pub fn predecessors(&self, n: NodeId) -> Vec<(NodeId, PathKind)> {
        if n.layer <= 1 {
            return Vec::new();
        }
        let prev = n.layer - 1;
        let mut out = Vec::new();
        // Order: from the finer scale (up), same scale (keep), coarser scale (down).
        for (src_scale, kind) in [(n.scale.checked_sub(1), PathKind::Down), (Some(n.scale), PathKind::Keep), (Some(n.scale + 1), PathKind::Up)] {
            if let Some(s) = src_scale {
                if s < scales_at(prev) {
                    out.push((NodeId::new(prev, s), kind));
                }
            }
        }
        out
    }
}

/// A fixed gate assignment: per node `(up, keep, down)` values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArchMask {
    pub name: Option<String>,
    pub layers: Option<usize>,
    pub base_channels: Option<usize>,
    pub values: BTreeMap<NodeId, [f64; 3]>,
}

impl ArchMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn named(name: impl Into<String>) -> Self {
        ArchMask { name: Some(name.into()), ..Self::default() }
    }

    pub fn for_space(mut self, space: &RoutingSpace) -> Self {
        self.layers = Some(space.layers());
        self.base_channels = Some(space.base_channels());
        self
    }

    pub fn get(&self, n: NodeId) -> [f64; 3] {
        self.values.get(&n).copied().unwrap_or([0.0; 3])
    }

    pub fn open(&mut self, n: NodeId, kind: PathKind) {
        self.values.entry(n).or_insert([0.0; 3])[kind.index()] = 1.0;
    }

    pub fn set(&mut self, n: NodeId, values: [f64; 3]) {
        self.values.insert(n, values);
    }

    pub fn is_open(&self, n: NodeId, kind: PathKind) -> bool {
        self.get(n)[kind.index()] > 0.0
    }

    /// Nodes with at least one open path.
    pub fn active_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.values.iter().filter(|(_, v)| v.iter().any(|&x| x > 0.0)).map(|(&n, _)| n)
    }

    /// Open (node, path) pairs in canonical order.
    pub fn support(&self) -> BTreeSet<(NodeId, PathKind)> {
        let mut out = BTreeSet::new();
        for (&n, v) in &self.values {
            for kind in PathKind::ALL {
                if v[kind.index()] > 0.0 {
                    out.insert((n, kind));
                }
            }
        }
        out
    }

    /// Every legal path of the space open; the final layer keeps only.
    pub fn full(space: &RoutingSpace) -> Self {
        let mut m = ArchMask::named("full").for_space(space);
        for &n in space.nodes() {
            let legal = space.legal_paths(n);
            m.set(n, legal.map(|b| if b { 1.0 } else { 0.0 }));
        }
        m
    }

    /// Canonical text form. Rows with all values zero are omitted.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(name) = &self.name {
            let _ = writeln!(s, "name = {name}");
        }
        if let Some(l) = self.layers {
            let _ = writeln!(s, "layers = {l}");
        }
        if let Some(c) = self.base_channels {
            let _ = writeln!(s, "base_channels = {c}");
        }
        for (n, v) in &self.values {
            if v.iter().all(|&x| x == 0.0) {
                continue;
            }
            let _ = writeln!(s, "{} {} {} {} {}", n.layer, n.scale, fmt_value(v[0]), fmt_value(v[1]), fmt_value(v[2]));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = ArchMask::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: line_no, msg };
            if let Some((key, value)) = line.split_once('=') {
                let (key, value) = (key.trim(), value.trim());
                match key {
                    "name" => m.name = Some(value.to_string()),
                    "layers" => m.layers = Some(value.parse().map_err(|_| perr(format!("bad layer count `{value}`")))?),
                    "base_channels" => {
                        m.base_channels = Some(value.parse().map_err(|_| perr(format!("bad channel count `{value}`")))?)
                    }
                    _ => return Err(perr(format!("unknown key `{key}`"))),
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(perr(format!("expected `layer scale up keep down`, got `{line}`")));
            }
            let layer: usize = fields[0].parse().map_err(|_| perr(format!("bad layer `{}`", fields[0])))?;
            let scale: usize = fields[1].parse().map_err(|_| perr(format!("bad scale `{}`", fields[1])))?;
            let mut v = [0.0; 3];
            for (k, f) in fields[2..].iter().enumerate() {
                let x: f64 = f.parse().map_err(|_| perr(format!("bad value `{f}`")))?;
                if !x.is_finite() || !(0.0..=1.0).contains(&x) {
                    return Err(perr(format!("value {x} outside [0, 1]")));
                }
                v[k] = x;
            }
            let n = NodeId::new(layer, scale);
            if m.values.insert(n, v).is_some() {
                return Err(perr(format!("duplicate row for node {n}")));
            }
        }
        Ok(m)
    }
}

fn fmt_value(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    HeaderMismatch { field: &'static str, mask: usize, space: usize },
    OutsideSpace(NodeId),
    IllegalPath(NodeId, PathKind),
    NonBinary(NodeId, PathKind, f64),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::HeaderMismatch { field, mask, space } => write!(f, "mask {field} = {mask} but space has {space}"),
            Violation::OutsideSpace(n) => write!(f, "node {n} is outside the space"),
            Violation::IllegalPath(n, k) => write!(f, "path {} is illegal at node {n}", k.name()),
            Violation::NonBinary(n, k, v) => write!(f, "path {} at node {n} has non-binary value {v}", k.name()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskCheck {
    pub violations: Vec<Violation>,
    /// Space nodes not reachable from the entry node under the mask.
    pub unreachable: Vec<NodeId>,
}

impl MaskCheck {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_mask(space: &RoutingSpace, mask: &ArchMask) -> MaskCheck {
    let mut check = MaskCheck::default();
    if let Some(l) = mask.layers.filter(|&l| l != space.layers()) {
        check.violations.push(Violation::HeaderMismatch { field: "layers", mask: l, space: space.layers() });
    }
    if let Some(c) = mask.base_channels.filter(|&c| c != space.base_channels()) {
        check.violations.push(Violation::HeaderMismatch { field: "base_channels", mask: c, space: space.base_channels() });
    }
    for (&n, v) in &mask.values {
        if !space.contains(n) {
            if v.iter().any(|&x| x != 0.0) {
                check.violations.push(Violation::OutsideSpace(n));
            }
            continue;
        }
        let legal = space.legal_paths(n);
        for kind in PathKind::ALL {
            let x = v[kind.index()];
            if x != 0.0 && !legal[kind.index()] {
                check.violations.push(Violation::IllegalPath(n, kind));
            } else if x != 0.0 && x != 1.0 {
                check.violations.push(Violation::NonBinary(n, kind, x));
            }
        }
    }
    let reach = reachable(space, mask);
    check.unreachable = space.nodes().iter().copied().filter(|n| !reach.contains(n)).collect();
    check
}

/// Nodes reachable from the entry node through open, legal paths.
pub fn reachable(space: &RoutingSpace, mask: &ArchMask) -> BTreeSet<NodeId> {
    let mut reach = BTreeSet::new();
    reach.insert(NodeId::ENTRY);
    for &n in space.nodes() {
        if !reach.contains(&n) {
            continue;
        }
        for &(t, kind) in space.neighbors(n).unwrap_or(&[]) {
            if mask.is_open(n, kind) {
                reach.insert(t);
            }
        }
    }
    reach
}
