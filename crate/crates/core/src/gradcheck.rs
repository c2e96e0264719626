//! Central-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Something that exposes a flat list of parameter tensors.
pub trait ParamSet {
    fn tensors(&self) -> &[Tensor];
    fn tensors_mut(&mut self) -> &mut [Tensor];
}

impl ParamSet for Vec<Tensor> {
    fn tensors(&self) -> &[Tensor] {
        self
    }

    fn tensors_mut(&mut self) -> &mut [Tensor] {
        self
    }
}

/// A coordinate: (tensor index, element index).
pub type Coord = (usize, usize);

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coord>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Every coordinate of every tensor.
pub fn all_coords(tensors: &[Tensor]) -> Vec<Coord> {
    tensors
        .iter()
        .enumerate()
        .flat_map(|(t, x)| (0..x.len()).map(move |i| (t, i)))
        .collect()
}

/// `count` distinct coordinates drawn uniformly from the flattened parameter set.
pub fn sample_coords(tensors: &[Tensor], count: usize, seed: u64) -> Vec<Coord> {
    let all = all_coords(tensors);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, all.len(), count.min(all.len())).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

/// Compare `analytic` against central differences of `value` at `coords`.
pub fn check_coordinates<P, F>(
    params: &mut P,
    mut value: F,
    analytic: &[Tensor],
    coords: &[Coord],
    eps: f64,
) -> Result<GradCheckReport>
where
    P: ParamSet + ?Sized,
    F: FnMut(&P) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for &(t, i) in coords {
        let orig = params.tensors()[t].data()[i];
        params.tensors_mut()[t].data_mut()[i] = orig + eps;
        let plus = value(params);
        params.tensors_mut()[t].data_mut()[i] = orig - eps;
        let minus = value(params);
        params.tensors_mut()[t].data_mut()[i] = orig;
        let (plus, minus) = (plus?, minus?);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite function value at coordinate ({t}, {i})")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[t].data()[i], numeric);
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((t, i));
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Gradient check of a function built on a [`Graph`] from leaf inputs.
///
/// `f` receives a fresh graph and one leaf per parameter and must return a
/// scalar. Every coordinate is checked.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let out = f(&mut g, &leaves)?;
    if !g.value(out).all_finite() {
        return Err(Error::Numeric("non-finite function value".into()));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&v| grads.wrt(v)).collect();
    let mut owned = params.to_vec();
    let coords = all_coords(&owned);
    check_coordinates(
        &mut owned,
        |ps: &Vec<Tensor>| {
            let mut g = Graph::new();
            let leaves: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone(), false)).collect();
            let out = f(&mut g, &leaves)?;
            g.value(out).item()
        },
        &analytic,
        &coords,
        eps,
    )
}
