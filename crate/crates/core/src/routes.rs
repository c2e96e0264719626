//! Route logs: per-sample activating factors recorded across forwards.
//!
//! Serialized as JSON lines: a header line followed by one line per
//! (forward, sample, node).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Route;
use crate::space::{ArchMask, NodeId, PathKind, RoutingSpace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(RouteLogHeader),
    Route(RouteRecord),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteLogHeader {
    pub layers: usize,
    pub base_channels: usize,
    /// Name of the frozen mask the forwards ran under, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub forward: u64,
    pub sample: usize,
    pub layer: usize,
    pub scale: usize,
    /// `(up, keep, down)`.
    pub alpha: [f64; 3],
}

impl RouteRecord {
    pub fn node(&self) -> NodeId {
        NodeId::new(self.layer, self.scale)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouteLog {
    pub header: RouteLogHeader,
    pub records: Vec<RouteRecord>,
}

impl RouteLog {
    pub fn new(header: RouteLogHeader) -> Self {
        RouteLog { header, records: Vec::new() }
    }

    pub fn push_forward(&mut self, forward: u64, routes: &[Route]) {
        self.records.extend(routes.iter().map(|r| record(forward, r)));
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", line_json(&Line::Header(self.header.clone())));
        for r in &self.records {
            let _ = writeln!(s, "{}", line_json(&Line::Route(r.clone())));
        }
        s
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut header = None;
        let mut records = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let parsed: Line =
                serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
            match parsed {
                Line::Header(h) if header.is_none() && records.is_empty() => header = Some(h),
                Line::Header(_) => return Err(Error::Parse { line: i + 1, msg: "unexpected header".into() }),
                Line::Route(r) => {
                    if header.is_none() {
                        return Err(Error::Parse { line: i + 1, msg: "route before header".into() });
                    }
                    records.push(r);
                }
            }
        }
        let header = header.ok_or_else(|| Error::Parse { line: 1, msg: "missing header".into() })?;
        Ok(RouteLog { header, records })
    }

    /// Number of distinct (forward, sample) pairs.
    pub fn sample_count(&self) -> usize {
        self.records.iter().map(|r| (r.forward, r.sample)).collect::<BTreeSet<_>>().len()
    }

    /// Per node and path, the fraction of logged samples with the path open.
    /// A sample that never reached a node counts as closed there.
    pub fn frequencies(&self) -> Result<BTreeMap<NodeId, [f64; 3]>> {
        let n = self.sample_count();
        if n == 0 {
            return Err(Error::Argument("route log has no records".into()));
        }
        let mut counts: BTreeMap<NodeId, [usize; 3]> = BTreeMap::new();
        for r in &self.records {
            let c = counts.entry(r.node()).or_default();
            for j in 0..3 {
                if r.alpha[j] > 0.0 {
                    c[j] += 1;
                }
            }
        }
        Ok(counts.into_iter().map(|(k, c)| (k, c.map(|x| x as f64 / n as f64))).collect())
    }
}

fn record(forward: u64, r: &Route) -> RouteRecord {
    RouteRecord { forward, sample: r.sample, layer: r.node.layer, scale: r.node.scale, alpha: r.alpha }
}

fn line_json(l: &Line) -> String {
    serde_json::to_string(l).expect("route lines serialize")
}

/// Appends route lines to a stream as forwards happen.
pub struct RouteLogWriter<W: Write> {
    out: W,
}

impl<W: Write> RouteLogWriter<W> {
    pub fn new(mut out: W, header: &RouteLogHeader) -> Result<Self> {
        writeln!(out, "{}", line_json(&Line::Header(header.clone())))?;
        Ok(RouteLogWriter { out })
    }

    pub fn write_forward(&mut self, forward: u64, routes: &[Route]) -> Result<()> {
        for r in routes {
            writeln!(self.out, "{}", line_json(&Line::Route(record(forward, r))))?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Mask of the paths open in more than `threshold` of the logged samples.
/// Paths open in every sample are kept even at `threshold = 1`.
pub fn extract_common(log: &RouteLog, threshold: f64, name: Option<&str>) -> Result<ArchMask> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Argument(format!("threshold must be in (0, 1], got {threshold}")));
    }
    let freq = log.frequencies()?;
    let mut m = ArchMask::new();
    m.name = name.map(str::to_string).or_else(|| log.header.mask.clone());
    m.layers = Some(log.header.layers);
    for (n, f) in freq {
        for kind in PathKind::ALL {
            let x = f[kind.index()];
            if x > threshold || x >= 1.0 {
                m.open(n, kind);
            }
        }
    }
    Ok(m)
}

/// Distribution of logged activating factors over legal paths.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// Values exactly zero.
    pub zeros: u64,
    /// Bin `i` holds positive values in `[i/n, (i+1)/n)`; 1.0 goes to the last bin.
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.zeros + self.counts.iter().sum::<u64>()
    }

    pub fn bin_of(&self, v: f64) -> usize {
        let n = self.counts.len();
        ((v * n as f64).floor() as usize).min(n - 1)
    }

    pub fn to_text(&self) -> String {
        let n = self.counts.len();
        let mut s = format!("zero {}\n", self.zeros);
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{:.4} {:.4} {c}", i as f64 / n as f64, (i + 1) as f64 / n as f64);
        }
        s
    }
}

pub fn route_histogram(log: &RouteLog, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::Argument(format!("need at least 2 bins, got {bins}")));
    }
    let space = RoutingSpace::new(log.header.layers, log.header.base_channels.max(1))?;
    let mut h = Histogram { zeros: 0, counts: vec![0; bins] };
    for r in &log.records {
        let n = r.node();
        if !space.contains(n) {
            return Err(Error::Lookup(format!("route record for node {n} outside the space")));
        }
        let legal = space.legal_paths(n);
        for j in 0..3 {
            if !legal[j] {
                continue;
            }
            let v = r.alpha[j];
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!("activating factor {v} outside [0, 1] at {n}")));
            }
            if v == 0.0 {
                h.zeros += 1;
            } else {
                let b = h.bin_of(v);
                h.counts[b] += 1;
            }
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> RouteLogHeader {
        RouteLogHeader { layers: 3, base_channels: 4, mask: None }
    }

    fn rec(forward: u64, sample: usize, layer: usize, scale: usize, alpha: [f64; 3]) -> RouteRecord {
        RouteRecord { forward, sample, layer, scale, alpha }
    }

    #[test]
    fn jsonl_round_trip() {
        let mut log = RouteLog::new(RouteLogHeader { mask: Some("x".into()), ..header() });
        log.records.push(rec(0, 0, 1, 0, [0.0, 0.9051482536448666, 0.1]));
        log.records.push(rec(3, 1, 2, 1, [1.0 / 3.0, 0.0, 0.0]));
        let text = log.to_jsonl();
        assert!(text.lines().next().unwrap().contains("\"kind\":\"header\""));
        assert_eq!(RouteLog::parse_jsonl(&text).unwrap(), log);

        let bad = format!("{}{{\"kind\":\"route\"}}\n", log.to_jsonl());
        assert!(matches!(RouteLog::parse_jsonl(&bad), Err(Error::Parse { line: 4, .. })));
        assert!(matches!(RouteLog::parse_jsonl(""), Err(Error::Parse { .. })));
    }

    #[test]
    fn writer_matches_to_jsonl() {
        let routes = vec![Route { sample: 0, node: NodeId::new(1, 0), alpha: [0.0, 1.0, 0.5] }];
        let mut w = RouteLogWriter::new(Vec::new(), &header()).unwrap();
        w.write_forward(7, &routes).unwrap();
        let bytes = w.finish().unwrap();
        let mut log = RouteLog::new(header());
        log.push_forward(7, &routes);
        assert_eq!(String::from_utf8(bytes).unwrap(), log.to_jsonl());
    }

    #[test]
    fn extraction_applies_threshold() {
        // 100 samples over one node: up open 97 times, keep 50 times, down never.
        let mut log = RouteLog::new(header());
        for i in 0..100 {
            let up = if i < 97 { 0.8 } else { 0.0 };
            let keep = if i % 2 == 0 { 0.3 } else { 0.0 };
            log.records.push(rec(i as u64 / 4, i % 4, 2, 1, [up, keep, 0.0]));
        }
        let m = extract_common(&log, 0.95, Some("c")).unwrap();
        assert_eq!(m.get(NodeId::new(2, 1)), [1.0, 0.0, 0.0]);
        assert_eq!(m.name.as_deref(), Some("c"));
        assert!(matches!(extract_common(&log, 0.0, None), Err(Error::Argument(_))));
        assert!(matches!(extract_common(&RouteLog::new(header()), 0.95, None), Err(Error::Argument(_))));
    }

    #[test]
    fn always_open_paths_survive_threshold_one() {
        let space = RoutingSpace::new(3, 4).unwrap();
        let full = ArchMask::full(&space);
        let mut log = RouteLog::new(header());
        for f in 0..3 {
            for &n in space.nodes() {
                log.records.push(rec(f, 0, n.layer, n.scale, full.get(n)));
            }
        }
        let m = extract_common(&log, 1.0, None).unwrap();
        assert_eq!(m.support(), full.support());
    }

    #[test]
    fn histogram_hand_binning() {
        let mut log = RouteLog::new(header());
        // (2,1) has all three paths legal; (3,0) is final and keeps only.
        log.records.push(rec(0, 0, 2, 1, [0.0, 0.05, 0.95]));
        log.records.push(rec(0, 1, 2, 1, [1.0, 0.5, 0.25]));
        log.records.push(rec(0, 0, 3, 0, [0.7, 0.0, 0.7]));
        let h = route_histogram(&log, 4).unwrap();
        assert_eq!(h.zeros, 2);
        assert_eq!(h.counts, vec![1, 1, 1, 2]);
        assert_eq!(h.total(), 7);

        let mut closed = RouteLog::new(header());
        closed.records.push(rec(0, 0, 2, 1, [0.0; 3]));
        let h = route_histogram(&closed, 10).unwrap();
        assert_eq!((h.zeros, h.counts.iter().sum::<u64>()), (3, 0));
        assert!(route_histogram(&closed, 1).is_err());
    }
}
