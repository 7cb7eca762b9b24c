//! The gradient verification suite: every graph primitive, one vertical
//! attention block, the oriented layer at several θ, and a whole model.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{gradcheck, Activation, GradCheckConfig, GradReport, Graph, NodeId};
use crate::error::Result;
use crate::model::{Model, ModelConfig, Variant};
use crate::orient::cva::{Residual, VerticalAttention};
use crate::orient::soa::{OrientedAttention, SoaOptions};
use crate::orient::{Lean, OrientationGeometry};
use crate::params::{Ctx, Mode, ParamStore};
use crate::tensor::Tensor;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const COMPOSITE_TOLERANCE: f64 = 1e-5;
/// Orientations for the θ checks, chosen away from integer `|cot θ|`.
pub const THETA_PROBES: [f64; 3] = [0.9, 1.2, 2.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseKind {
    Primitive,
    Block,
    Model,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCase {
    pub name: String,
    pub kind: CaseKind,
    pub tolerance: f64,
    pub report: GradReport,
}

impl GradCase {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

type Loss = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from `±gap` around each of `kinks`.
fn avoiding(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
    kinks: &[f64],
    gap: f64,
) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            break v;
        }
    })
}

/// Pairwise distinct values, so max pooling has no ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| 0.1 * i as f64 - 0.05 * n as f64).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("shape matches length")
}

fn probes(named: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    named.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Reduces a node to a scalar with fixed random weights, so every output
/// coordinate contributes a distinct amount.
fn project(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, g.value(x).shape(), -1.0, 1.0);
    g.dot_const(x, w)
}

/// `(name, probes, loss)`
type Case = (String, Vec<(String, Tensor)>, Loss);

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    let mut add =
        |name: &str, p: Vec<(&str, Tensor)>, f: Loss| cases.push((name.to_string(), probes(p), f));
    let s = [2, 3, 4, 5];

    add(
        "add",
        vec![
            ("a", uniform(rng, &s, -1.0, 1.0)),
            ("b", uniform(rng, &s, -1.0, 1.0)),
        ],
        Box::new(|g, x| {
            let y = g.add(x[0], x[1])?;
            project(g, y, 1)
        }),
    );
    add(
        "sub",
        vec![
            ("a", uniform(rng, &s, -1.0, 1.0)),
            ("b", uniform(rng, &s, -1.0, 1.0)),
        ],
        Box::new(|g, x| {
            let y = g.sub(x[0], x[1])?;
            project(g, y, 2)
        }),
    );
    add(
        "mul",
        vec![
            ("a", uniform(rng, &s, -1.0, 1.0)),
            ("b", uniform(rng, &s, -1.0, 1.0)),
        ],
        Box::new(|g, x| {
            let y = g.mul(x[0], x[1])?;
            project(g, y, 3)
        }),
    );
    add(
        "scale",
        vec![("a", uniform(rng, &s, -1.0, 1.0))],
        Box::new(|g, x| {
            let y = g.scale(x[0], -1.7)?;
            project(g, y, 4)
        }),
    );
    add(
        "lerp",
        vec![
            ("a", uniform(rng, &s, -1.0, 1.0)),
            ("b", uniform(rng, &s, -1.0, 1.0)),
            ("t", Tensor::scalar(0.37)),
        ],
        Box::new(|g, x| {
            let y = g.lerp(x[0], x[1], x[2])?;
            project(g, y, 5)
        }),
    );
    for (stride, padding, bias) in [(1, 1, true), (2, 1, true), (2, 0, false), (1, 0, false)] {
        let k = if padding == 1 { 3 } else { 1 };
        let mut p = vec![
            ("x", uniform(rng, &[2, 3, 6, 5], -1.0, 1.0)),
            ("w", uniform(rng, &[4, 3, k, k], -1.0, 1.0)),
        ];
        if bias {
            p.push(("b", uniform(rng, &[4], -1.0, 1.0)));
        }
        add(
            &format!("conv2d {k}x{k} stride {stride}"),
            p,
            Box::new(move |g, x| {
                let y = g.conv2d(x[0], x[1], bias.then(|| x[2]), stride, padding)?;
                project(g, y, 6)
            }),
        );
    }
    for (name, act, x0) in [
        (
            "relu",
            Activation::Relu,
            avoiding(rng, &s, -2.0, 2.0, &[0.0], 0.01),
        ),
        (
            "hard_swish",
            Activation::HardSwish,
            avoiding(rng, &s, -4.5, 4.5, &[-3.0, 3.0], 0.01),
        ),
        ("gelu", Activation::Gelu, uniform(rng, &s, -3.0, 3.0)),
        ("sigmoid", Activation::Sigmoid, uniform(rng, &s, -4.0, 4.0)),
    ] {
        add(
            name,
            vec![("x", x0)],
            Box::new(move |g, x| {
                let y = g.activation(x[0], act)?;
                project(g, y, 7)
            }),
        );
    }
    add(
        "max_pool 2x2",
        vec![("x", distinct(rng, &[2, 2, 4, 6]))],
        Box::new(|g, x| {
            let y = g.max_pool(x[0], (2, 2), (2, 2))?;
            project(g, y, 8)
        }),
    );
    add(
        "max_pool 1x2",
        vec![("x", distinct(rng, &[2, 3, 1, 8]))],
        Box::new(|g, x| {
            let y = g.max_pool(x[0], (1, 2), (1, 2))?;
            project(g, y, 9)
        }),
    );
    add(
        "avg_pool_height",
        vec![("x", uniform(rng, &s, -1.0, 1.0))],
        Box::new(|g, x| {
            let y = g.avg_pool_height(x[0])?;
            project(g, y, 10)
        }),
    );
    for (lean, step) in [
        (Lean::Acute, 0),
        (Lean::Acute, 2),
        (Lean::Obtuse, 1),
        (Lean::Obtuse, 3),
    ] {
        let geom = Arc::new(OrientationGeometry::with_step(lean, step, 4, 5).expect("valid grid"));
        let lines = geom.len();
        let pool_geom = geom.clone();
        add(
            &format!("line_pool {lean:?} S={step}"),
            vec![("x", uniform(rng, &s, -1.0, 1.0))],
            Box::new(move |g, x| {
                let y = g.line_pool(x[0], pool_geom.clone())?;
                project(g, y, 11)
            }),
        );
        add(
            &format!("fold_back {lean:?} S={step}"),
            vec![("v", uniform(rng, &[2, 3, 1, lines], -1.0, 1.0))],
            Box::new(move |g, x| {
                let y = g.fold_back(x[0], geom.clone())?;
                project(g, y, 12)
            }),
        );
    }
    add(
        "batchnorm train",
        vec![
            ("x", uniform(rng, &[3, 2, 2, 3], -1.0, 1.0)),
            ("gamma", uniform(rng, &[2], 0.5, 1.5)),
            ("beta", uniform(rng, &[2], -0.5, 0.5)),
        ],
        Box::new(|g, x| {
            let (y, _) = g.batchnorm_train(x[0], x[1], x[2], 1e-5)?;
            project(g, y, 13)
        }),
    );
    add(
        "batchnorm eval",
        vec![
            ("x", uniform(rng, &[3, 2, 2, 3], -1.0, 1.0)),
            ("gamma", uniform(rng, &[2], 0.5, 1.5)),
            ("beta", uniform(rng, &[2], -0.5, 0.5)),
        ],
        Box::new(|g, x| {
            let y = g.batchnorm_infer(x[0], x[1], x[2], &[0.1, -0.2], &[0.5, 1.3], 1e-5)?;
            project(g, y, 14)
        }),
    );
    add(
        "global_avg_pool",
        vec![("x", uniform(rng, &s, -1.0, 1.0))],
        Box::new(|g, x| {
            let y = g.global_avg_pool(x[0])?;
            project(g, y, 15)
        }),
    );
    add(
        "reshape",
        vec![("x", uniform(rng, &s, -1.0, 1.0))],
        Box::new(|g, x| {
            let y = g.reshape(x[0], &[2, 60])?;
            project(g, y, 16)
        }),
    );
    add(
        "concat",
        vec![
            ("a", uniform(rng, &[3, 4], -1.0, 1.0)),
            ("b", uniform(rng, &[3, 2], -1.0, 1.0)),
        ],
        Box::new(|g, x| {
            let y = g.concat(x[0], x[1])?;
            project(g, y, 17)
        }),
    );
    add(
        "linear",
        vec![
            ("x", uniform(rng, &[3, 5], -1.0, 1.0)),
            ("w", uniform(rng, &[4, 5], -1.0, 1.0)),
            ("b", uniform(rng, &[4], -1.0, 1.0)),
        ],
        Box::new(|g, x| {
            let y = g.linear(x[0], x[1], x[2])?;
            project(g, y, 18)
        }),
    );
    add(
        "matmul",
        vec![
            ("a", uniform(rng, &[3, 5], -1.0, 1.0)),
            ("b", uniform(rng, &[5, 2], -1.0, 1.0)),
        ],
        Box::new(|g, x| {
            let y = g.matmul(x[0], x[1])?;
            project(g, y, 19)
        }),
    );
    add(
        "softmax",
        vec![("x", uniform(rng, &[3, 4], -2.0, 2.0))],
        Box::new(|g, x| {
            let y = g.softmax(x[0])?;
            project(g, y, 20)
        }),
    );
    add(
        "cross_entropy",
        vec![("logits", uniform(rng, &[4, 3], -2.0, 2.0))],
        Box::new(|g, x| g.cross_entropy(x[0], &[0, 2, 1, 2])),
    );
    add(
        "sum",
        vec![("x", uniform(rng, &s, -1.0, 1.0))],
        Box::new(|g, x| {
            let y = g.sum(x[0])?;
            g.scale(y, 0.3)
        }),
    );
    add(
        "theta_from_raw",
        vec![("raw", Tensor::scalar(0.4))],
        Box::new(|g, x| {
            let t = g.theta_from_raw(x[0])?;
            let y = g.mul(t, t)?;
            g.sum(y)
        }),
    );
    for theta in THETA_PROBES {
        add(
            &format!("step_fraction θ={theta}"),
            vec![("theta", Tensor::scalar(theta))],
            Box::new(|g, x| {
                let (l, _) = g.step_fraction(x[0])?;
                let y = g.mul(l, l)?;
                g.sum(y)
            }),
        );
    }
    cases
}

/// Gradient check of a loss built from a parameter store plus extra inputs.
/// The store's parameters come first in the probe list, then `extra`.
fn check_with_store<F>(
    store: &ParamStore,
    extra: Vec<(String, Tensor)>,
    config: &GradCheckConfig,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Ctx<'_>, &[NodeId]) -> Result<NodeId>,
{
    let n = store.len();
    let mut all: Vec<(String, Tensor)> = store
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    all.extend(extra);
    gradcheck(
        |g, ids| {
            let bound = store.bind_nodes(&ids[..n])?;
            let mut ctx = Ctx::new(g, store, &bound, Mode::Train);
            f(&mut ctx, &ids[n..])
        },
        &all,
        config,
    )
}

/// A chained vertical attention block: residual, pooled attention and the
/// product with the previous block's attention.
fn cva_block(config: &GradCheckConfig) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let residual = Residual::new(&mut store, "block1", 3, 8, &mut rng);
    let attn = VerticalAttention::new(&mut store, "block1.attn", 8, Some(4), &mut rng);
    let extra = probes(vec![
        ("input", uniform(&mut rng, &[2, 3, 8, 10], -1.0, 1.0)),
        ("prev", distinct(&mut rng, &[2, 4, 1, 10])),
    ]);
    check_with_store(&store, extra, config, |ctx, x| {
        let f = residual.forward(ctx, x[0])?;
        let out = attn.forward(ctx, f, Some(x[1]))?;
        project(ctx.g, out.output, 22)
    })
}

/// The oriented layer at a fixed θ, with θ itself among the probes.
fn soa_layer(theta: f64, config: &GradCheckConfig) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut store = ParamStore::new();
    let layer = OrientedAttention::new(
        &mut store,
        "block1.attn",
        8,
        Some(4),
        SoaOptions::default(),
        &mut rng,
    );
    let extra = probes(vec![
        ("fconv", uniform(&mut rng, &[2, 8, 5, 6], -1.0, 1.0)),
        ("prev", distinct(&mut rng, &[2, 4, 10, 12])),
        ("theta", Tensor::scalar(theta)),
    ]);
    check_with_store(&store, extra, config, |ctx, x| {
        let out = layer.forward(ctx, x[0], x[2], Some(x[1]))?;
        project(ctx.g, out.output, 24)
    })
}

/// Small variant-B model with θ pinned away from a step breakpoint.
pub fn probe_model() -> Result<Model> {
    let mut model = Model::build(&ModelConfig {
        variant: Variant::B,
        input_size: 16,
        channels: vec![4, 8, 8, 8],
        seed: 25,
        ..ModelConfig::default()
    })?;
    model.set_theta(0, THETA_PROBES[1])?;
    Ok(model)
}

fn full_model(config: &GradCheckConfig) -> Result<GradReport> {
    let model = probe_model()?;
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let s = model.config.input_size;
    let extra = probes(vec![("input", uniform(&mut rng, &[2, 1, s, s], -1.0, 1.0))]);
    // Freshly initialized logits are ~1e-4, so a cross-entropy loss sits
    // near ln K and its rounding noise swamps the smallest gradients. A
    // random functional of the logits keeps the loss on their scale;
    // cross-entropy's own backward is checked as a primitive.
    check_with_store(&model.store, extra, config, |ctx, x| {
        let out = model.forward(ctx, x[0], None)?;
        project(ctx.g, out.logits, 27)
    })
}

/// Runs every case. Errors only on a structural failure; numeric mismatches
/// are reported through [`GradCase::passes`].
pub fn run_suite() -> Result<Vec<GradCase>> {
    let config = GradCheckConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut out = Vec::new();
    for (name, p, f) in primitive_cases(&mut rng) {
        out.push(GradCase {
            name,
            kind: CaseKind::Primitive,
            tolerance: PRIMITIVE_TOLERANCE,
            report: gradcheck(f, &p, &config)?,
        });
    }
    out.push(GradCase {
        name: "vertical attention block".into(),
        kind: CaseKind::Block,
        tolerance: COMPOSITE_TOLERANCE,
        report: cva_block(&config)?,
    });
    for theta in THETA_PROBES {
        out.push(GradCase {
            name: format!("oriented layer θ={theta}"),
            kind: CaseKind::Block,
            tolerance: COMPOSITE_TOLERANCE,
            report: soa_layer(theta, &config)?,
        });
    }
    out.push(GradCase {
        name: "variant B model, 2 samples".into(),
        kind: CaseKind::Model,
        tolerance: COMPOSITE_TOLERANCE,
        report: full_model(&config)?,
    });
    Ok(out)
}

/// One line per case: name, kind, coordinates checked, worst error, verdict.
pub fn format_table(cases: &[GradCase]) -> String {
    let width = cases.iter().map(|c| c.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!(
        "{:<width$}  {:<9}  {:>6}  {:>10}  {:>8}  result\n",
        "case", "kind", "coords", "max_rel", "tol"
    );
    for c in cases {
        let coords: usize = c.report.params.iter().map(|p| p.checked).sum();
        let kind = match c.kind {
            CaseKind::Primitive => "primitive",
            CaseKind::Block => "block",
            CaseKind::Model => "model",
        };
        s.push_str(&format!(
            "{:<width$}  {:<9}  {:>6}  {:>10.3e}  {:>8.0e}  {}\n",
            c.name,
            kind,
            coords,
            c.report.max_rel_err(),
            c.tolerance,
            if c.passes() { "ok" } else { "FAIL" }
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let cases = run_suite().unwrap();
        let table = format_table(&cases);
        assert!(cases.iter().all(GradCase::passes), "\n{table}");
    }
}
