//! Finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates checked per parameter; larger tensors are subsampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: DEFAULT_STEP,
            max_coords: 48,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamReport {
    pub name: String,
    pub shape: Vec<usize>,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub params: Vec<ParamReport>,
    pub step: f64,
    pub seed: u64,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_err))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn coordinates(len: usize, max: usize, seed: u64) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, len, max).into_vec();
    idx.sort_unstable();
    idx
}

fn evaluate<F>(f: &F, probes: &[(String, Tensor)]) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = probes.iter().map(|(_, t)| g.constant(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    g.value(out)
        .item()
        .ok_or_else(|| Error::Graph("gradcheck function must return a scalar".into()))
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences `(f(x+h) - f(x-h)) / 2h`, one coordinate at a time.
/// `f` receives one node per probe, in order.
pub fn gradcheck<F>(
    f: F,
    probes: &[(String, Tensor)],
    config: &GradCheckConfig,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(config.step > 0.0) {
        return Err(Error::invalid(format!(
            "gradcheck step must be positive, got {}",
            config.step
        )));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = probes.iter().map(|(_, t)| g.param(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out)?;

    let h = config.step;
    let mut work: Vec<(String, Tensor)> = probes.to_vec();
    let mut params = Vec::with_capacity(probes.len());
    for (p, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .ok_or_else(|| Error::Graph(format!("no gradient for `{}`", probes[p].0)))?;
        let coords = coordinates(
            probes[p].1.len(),
            config.max_coords,
            config.seed.wrapping_add(p as u64),
        );
        let mut report = ParamReport {
            name: probes[p].0.clone(),
            shape: probes[p].1.shape().to_vec(),
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &coords {
            let x0 = probes[p].1.data()[i];
            work[p].1.data_mut()[i] = x0 + h;
            let fp = evaluate(&f, &work)?;
            work[p].1.data_mut()[i] = x0 - h;
            let fm = evaluate(&f, &work)?;
            work[p].1.data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradcheck `{}` coordinate {i}: analytic {a}, numeric {numeric}",
                    probes[p].0
                )));
            }
            let err = relative_error(a, numeric);
            if i == coords[0] || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        params.push(report);
    }
    Ok(GradReport {
        params,
        step: h,
        seed: config.seed,
    })
}
