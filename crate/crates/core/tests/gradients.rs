mod common;

use common::random;
use orient_attn::autodiff::{gradcheck, GradCheckConfig};
use orient_attn::orient::{Residual, VerticalAttention};
use orient_attn::params::{Ctx, Mode, ParamStore};
use orient_attn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn conv_then_sigmoid_matches_central_differences() {
    let probes = vec![
        ("x".to_string(), random(&[2, 3, 6, 7], 1, -1.0, 1.0)),
        ("w".to_string(), random(&[4, 3, 3, 3], 2, -0.5, 0.5)),
        ("b".to_string(), random(&[4], 3, -0.1, 0.1)),
    ];
    let report = gradcheck(
        |g, p| {
            let y = g.conv2d(p[0], p[1], Some(p[2]), 2, 1)?;
            let s = g.sigmoid(y)?;
            g.sum(s)
        },
        &probes,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.max_rel_err() < 1e-6, "{report:?}");
}

#[test]
fn chained_vertical_block_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let residual = Residual::new(&mut store, "r", 4, 8, &mut rng);
    let attn = VerticalAttention::new(&mut store, "a", 8, Some(4), &mut rng);
    let n = store.len();
    let mut probes: Vec<(String, Tensor)> = store
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    probes.push(("x".into(), random(&[3, 4, 8, 8], 5, -1.0, 1.0)));
    // Distinct values keep the max pool away from ties.
    let prev = Tensor::from_fn([3, 4, 1, 8], |i| 0.1 + 0.01 * ((i * 37) % 96) as f64);
    probes.push(("prev".into(), prev));
    let weights = random(&[3, 8, 4, 4], 6, -1.0, 1.0);
    let report = gradcheck(
        |g, ids| {
            let bound = store.bind_nodes(&ids[..n])?;
            let mut ctx = Ctx::new(g, &store, &bound, Mode::Train);
            let f = residual.forward(&mut ctx, ids[n])?;
            let out = attn.forward(&mut ctx, f, Some(ids[n + 1]))?;
            g.dot_const(out.output, weights.clone())
        },
        &probes,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.max_rel_err() < 1e-6, "{report:?}");
}
