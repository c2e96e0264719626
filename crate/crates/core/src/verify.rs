//! Invariant suites shared by the command line and the test targets.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost::{static_cost_report, Convention, CostModel};
use crate::error::{Error, Result};
use crate::gradcheck::{check_coordinates, sample_coords, Coord, GradCheckReport};
use crate::network::{Gating, Network, NetworkConfig};
use crate::nn::{Forward, Mode};
use crate::node::Exec;
use crate::params::ParamStore;
use crate::presets::{preset_mask, PRESET_LAYERS};
use crate::space::{ArchMask, NodeId, RoutingSpace, DEFAULT_BASE_CHANNELS};
use crate::tensor::{Init, Shape, Tensor};
use crate::trainer::joint_loss;

/// Published GFLOPs of the five static architectures, in increasing order.
pub const PUBLISHED_GFLOPS: [(&str, f64); 5] =
    [("autodeeplab", 33.1), ("fcn32s", 35.1), ("deeplabv3", 42.5), ("unet", 53.9), ("hrnetv2", 62.5)];

/// Published parameter counts in millions.
pub const PUBLISHED_PARAMS_M: [(&str, f64); 7] = [
    ("fcn32s", 2.9),
    ("unet", 6.1),
    ("deeplabv3", 3.7),
    ("hrnetv2", 5.4),
    ("autodeeplab", 2.5),
    ("full", 15.3),
    ("full+gates", 17.8),
];

pub const REFERENCE_CLASSES: usize = 19;

pub fn reference_input() -> Shape {
    Shape::new(1, 3, 1024, 2048)
}

#[derive(Clone, Debug)]
pub struct GradCheckSetup {
    pub layers: usize,
    pub base_channels: usize,
    pub size: usize,
    pub batch: usize,
    pub classes: usize,
    pub lambda2: f64,
    pub mu: f64,
    /// Uniformly sampled coordinates over all parameters.
    pub coords: usize,
    /// Extra coordinates drawn from gate parameters only.
    pub gate_coords: usize,
    pub eps: f64,
    pub seed: u64,
    /// Negative control: perturb one analytic gradient entry.
    pub corrupt: bool,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        GradCheckSetup {
            layers: 3,
            base_channels: 8,
            size: 32,
            batch: 2,
            classes: 3,
            lambda2: 0.5,
            mu: 0.2,
            coords: 100,
            gate_coords: 30,
            eps: 1e-5,
            seed: 11,
            corrupt: false,
        }
    }
}

/// Move every gate off the symmetric initial point so the factors no longer tie.
pub fn jitter_gates(net: &mut Network, std: f64, seed: u64) {
    let w2: Vec<_> = net.nodes().iter().map(|p| p.gate.w2).collect();
    for (i, id) in w2.into_iter().enumerate() {
        let shape = net.store().get(id).shape();
        let noise = Tensor::new(shape, Init::Normal { seed: crate::seed::derive_indexed(seed, "jitter", i as u64), std })
            .expect("gate shape");
        *net.store_mut().get_mut(id) = noise;
    }
}

fn gradcheck_net(s: &GradCheckSetup) -> Result<(Network, Tensor, Vec<usize>)> {
    let cfg = NetworkConfig {
        layers: s.layers,
        base_channels: s.base_channels,
        classes: s.classes,
        gate_downsample: false,
        seed: s.seed,
    };
    let mut net = Network::new(cfg)?;
    jitter_gates(&mut net, 0.1, s.seed);
    let images = Tensor::new(Shape::new(s.batch, 3, s.size, s.size), Init::Normal { seed: s.seed ^ 1, std: 1.0 })?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 2);
    let targets = (0..s.batch * s.size * s.size).map(|_| rng.random_range(0..s.classes)).collect();
    Ok((net, images, targets))
}

fn loss_value(store: &ParamStore, net: &Network, images: &Tensor, targets: &[usize], s: &GradCheckSetup) -> Result<f64> {
    let mut fw = Forward::new(store, Mode::Train);
    let out = net.forward(&mut fw, images, &Gating::Learned, Exec::Pruned)?;
    let p = joint_loss(&mut fw.graph, out.logits, targets, out.expected_cost, out.real_total, 1.0, s.lambda2, s.mu)?;
    Ok(fw.graph.value(p.loss).data()[0])
}

/// Joint-loss gradients of a small network against central differences.
pub fn full_model_gradcheck(s: &GradCheckSetup) -> Result<GradCheckReport> {
    let (net, images, targets) = gradcheck_net(s)?;
    let analytic: Vec<Tensor> = {
        let mut fw = Forward::new(net.store(), Mode::Train);
        let out = net.forward(&mut fw, &images, &Gating::Learned, Exec::Pruned)?;
        let p = joint_loss(&mut fw.graph, out.logits, &targets, out.expected_cost, out.real_total, 1.0, s.lambda2, s.mu)?;
        let grads = fw.graph.backward(p.loss)?;
        fw.param_gradients(&grads)
            .into_iter()
            .zip(net.store().values())
            .map(|(g, v)| g.unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    };
    let mut analytic = analytic;
    let mut coords = sample_coords(net.store().values(), s.coords, s.seed ^ 3);
    let gate_tensors: Vec<usize> = net
        .store()
        .names()
        .iter()
        .enumerate()
        .filter(|(_, n)| n.starts_with("gate."))
        .map(|(i, _)| i)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 4);
    for _ in 0..s.gate_coords {
        let t = gate_tensors[rng.random_range(0..gate_tensors.len())];
        let c: Coord = (t, rng.random_range(0..net.store().values()[t].len()));
        if !coords.contains(&c) {
            coords.push(c);
        }
    }
    if s.corrupt {
        let (t, i) = coords[0];
        analytic[t].data_mut()[i] += 1.0;
    }
    let mut store = net.store().clone();
    check_coordinates(&mut store, |st| loss_value(st, &net, &images, &targets, s), &analytic, &coords, s.eps)
}

/// Randomise gate biases and weights so that paths and whole nodes close
/// for some samples and not for others.
pub fn random_gate_state(net: &mut Network, rng: &mut ChaCha8Rng) {
    let gates: Vec<_> = net.nodes().iter().map(|p| (p.gate.w2, p.gate.beta)).collect();
    for (w2, beta) in gates {
        let scale = rng.random_range(0.0..3.0);
        for v in net.store_mut().get_mut(w2).data_mut() {
            *v = scale * rng.random_range(-1.0..1.0);
        }
        for v in net.store_mut().get_mut(beta).data_mut() {
            *v = rng.random_range(-1.5..1.5);
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PruningReport {
    pub states: usize,
    pub max_abs_diff: f64,
    /// States in which at least one cell was skipped for some sample.
    pub states_with_skips: usize,
    /// States in which a cell did not run at all.
    pub states_with_pruned_cells: usize,
}

/// Per-sample pruned inference against dense masked evaluation.
pub fn pruning_equivalence(layers: usize, base: usize, size: usize, batch: usize, states: usize, seed: u64) -> Result<PruningReport> {
    let mut net = Network::new(NetworkConfig { layers, base_channels: base, classes: 3, gate_downsample: false, seed })?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, "gate-states"));
    let mut rep = PruningReport::default();
    for k in 0..states {
        random_gate_state(&mut net, &mut rng);
        let images = Tensor::new(
            Shape::new(batch, 3, size, size),
            Init::Normal { seed: crate::seed::derive_indexed(seed, "images", k as u64), std: 1.0 },
        )?;
        let mut fp = Forward::new(net.store(), Mode::Infer);
        let pruned = net.forward(&mut fp, &images, &Gating::Learned, Exec::Pruned)?;
        let mut fd = Forward::new(net.store(), Mode::Infer);
        let dense = net.forward(&mut fd, &images, &Gating::Learned, Exec::Dense)?;
        if pruned.routes != dense.routes {
            let first = pruned.routes.iter().zip(&dense.routes).find(|(a, b)| a != b);
            return Err(Error::Numeric(format!(
                "gate state {k}: routes differ between pruned and dense runs ({} vs {} records, first {first:?})",
                pruned.routes.len(),
                dense.routes.len()
            )));
        }
        let d = fp.graph.value(pruned.logits).max_abs_diff(fd.graph.value(dense.logits));
        rep.max_abs_diff = rep.max_abs_diff.max(d);
        rep.states += 1;
        if !pruned.trace.skipped.is_empty() {
            rep.states_with_skips += 1;
        }
        if pruned.trace.cells.len() < dense.trace.cells.len() {
            rep.states_with_pruned_cells += 1;
        }
    }
    Ok(rep)
}

/// Expected cost with every factor 1 against the static report of the full mask.
pub fn cost_consistency(layers: usize, base: usize, input: Shape, classes: usize) -> Result<(f64, u64)> {
    let space = RoutingSpace::new(layers, base)?;
    let model = CostModel::new(&space, input, classes, false)?;
    let ones: BTreeMap<NodeId, Vec<[f64; 3]>> = space.nodes().iter().map(|&n| (n, vec![[1.0; 3]])).collect();
    let expected = model.space_expected_cost(&ones)?;
    // The gates are part of every node's expected cost; the static report of
    // the full mask with gates counted is the matching total.
    let report = static_cost_report(&space, &ArchMask::full(&space), input, classes, Convention::Macs, true)?;
    Ok((expected, report.total.macs))
}

/// MACs and parameters of each preset at reference resolution.
pub fn preset_costs(names: &[&str]) -> Result<Vec<(String, u64, u64)>> {
    let space = RoutingSpace::new(PRESET_LAYERS, DEFAULT_BASE_CHANNELS)?;
    names
        .iter()
        .map(|&n| {
            let r = static_cost_report(&space, &preset_mask(n)?, reference_input(), REFERENCE_CLASSES, Convention::Macs, false)?;
            Ok((n.to_string(), r.total.macs, r.total.params))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct OrderingReport {
    pub strictly_increasing: bool,
    /// Worst `|ours / published - 1|` over ordered pairs of MAC ratios.
    pub worst_ratio_error: f64,
}

pub fn preset_ordering() -> Result<OrderingReport> {
    let names: Vec<&str> = PUBLISHED_GFLOPS.iter().map(|(n, _)| *n).collect();
    let costs = preset_costs(&names)?;
    let strictly_increasing = costs.windows(2).all(|w| w[0].1 < w[1].1);
    let mut worst = 0.0f64;
    for i in 0..costs.len() {
        for j in 0..costs.len() {
            if i != j {
                let ours = costs[i].1 as f64 / costs[j].1 as f64;
                let theirs = PUBLISHED_GFLOPS[i].1 / PUBLISHED_GFLOPS[j].1;
                worst = worst.max((ours / theirs - 1.0).abs());
            }
        }
    }
    Ok(OrderingReport { strictly_increasing, worst_ratio_error: worst })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    /// Negative control for the gradient suite.
    pub corrupt_gradient: bool,
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult { name, passed, detail, seconds: t.elapsed().as_secs_f64() }
}

/// Run the invariant suites. Tolerances match the acceptance gate.
pub fn run_suites(level: Level, opts: &VerifyOptions) -> Vec<CheckResult> {
    let full = level == Level::Full;
    let mut out = Vec::new();
    out.push(timed("gradient_check", || {
        let s = GradCheckSetup {
            coords: if full { 100 } else { 30 },
            gate_coords: if full { 30 } else { 10 },
            corrupt: opts.corrupt_gradient,
            ..GradCheckSetup::default()
        };
        let r = full_model_gradcheck(&s)?;
        Ok((r.max_rel_error <= 1e-3, format!("{} coordinates, max relative error {:.3e}", r.checked, r.max_rel_error)))
    }));
    out.push(timed("pruning_equivalence", || {
        let r = pruning_equivalence(4, 4, 32, 3, if full { 50 } else { 8 }, 5)?;
        let ok = r.max_abs_diff <= 1e-12 && r.states_with_skips > 0;
        Ok((ok, format!("{} gate states, max |diff| {:.3e}, {} with skipped cells", r.states, r.max_abs_diff, r.states_with_skips)))
    }));
    out.push(timed("cost_consistency", || {
        let (e, c) = cost_consistency(if full { 16 } else { 6 }, 64, Shape::new(1, 3, 256, 512), 19)?;
        Ok((e == c as f64, format!("expected {e} vs static {c}")))
    }));
    out.push(timed("preset_ordering", || {
        let r = preset_ordering()?;
        let ok = r.strictly_increasing && (!full || r.worst_ratio_error <= 0.2);
        let detail = if full {
            format!("ordering {}, worst pairwise ratio error {:.3}", r.strictly_increasing, r.worst_ratio_error)
        } else {
            format!("ordering {}", r.strictly_increasing)
        };
        Ok((ok, detail))
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_gradient_fails() {
        let s = GradCheckSetup { coords: 3, gate_coords: 0, corrupt: true, layers: 2, size: 32, ..GradCheckSetup::default() };
        let r = full_model_gradcheck(&s).unwrap();
        assert!(r.max_rel_error > 1e-3);
    }

    #[test]
    fn small_gradcheck_passes() {
        let s = GradCheckSetup { coords: 20, gate_coords: 10, layers: 2, ..GradCheckSetup::default() };
        let r = full_model_gradcheck(&s).unwrap();
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }

    #[test]
    fn pruning_matches_dense_on_small_space() {
        let r = pruning_equivalence(3, 4, 32, 3, 6, 1).unwrap();
        assert!(r.max_abs_diff <= 1e-12, "{r:?}");
        assert!(r.states_with_skips > 0, "{r:?}");
    }

    #[test]
    fn cost_consistency_small() {
        let (e, c) = cost_consistency(5, 8, Shape::new(1, 3, 64, 64), 4).unwrap();
        assert_eq!(e, c as f64);
    }
}
