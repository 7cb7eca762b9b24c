mod common;

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use common::{conv_ref, dims, hard_swish, random, sigmoid};
use orient_attn::autodiff::Graph;
use orient_attn::orient::{
    soa_equals_cva_at_vertical, OapDenominator, OrientedAttention, Residual, SoaOptions,
    VerticalAttention,
};
use orient_attn::params::{Ctx, Mode, ParamStore};
use orient_attn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn fill(store: &mut ParamStore, id: orient_attn::params::ParamId, v: f64) {
    let shape = store.value(id).shape().to_vec();
    store.set_value(id, Tensor::full(shape, v)).unwrap();
}

/// Oriented layer output at θ in eval mode, first block.
fn soa_output(store: &ParamStore, layer: &OrientedAttention, fconv: &Tensor, theta: f64) -> Tensor {
    let mut g = Graph::new();
    let bound = store.bind_constants(&mut g);
    let x = g.constant(fconv.clone());
    let t = g.constant(Tensor::scalar(theta));
    let mut ctx = Ctx::new(&mut g, store, &bound, Mode::Eval);
    let out = layer.forward(&mut ctx, x, t, None).unwrap();
    g.value(out.output).clone()
}

#[test]
fn identity_attention_at_vertical_passes_features_through() {
    let mut store = ParamStore::new();
    let layer =
        OrientedAttention::new(&mut store, "a", 4, None, SoaOptions::default(), &mut rng(1));
    // Positive pooled statistics, positive hidden units, saturating logits.
    fill(&mut store, layer.bottleneck.reduce, 0.5);
    fill(&mut store, layer.bottleneck.expand, 50.0);
    let f = random(&[2, 4, 5, 6], 2, 0.5, 1.5);
    let out = soa_output(&store, &layer, &f, FRAC_PI_2);
    assert!(out.max_abs_diff(&f).unwrap() < 1e-9);
}

#[test]
fn integer_step_collapses_to_the_single_branch() {
    let mut store = ParamStore::new();
    let layer =
        OrientedAttention::new(&mut store, "a", 8, None, SoaOptions::default(), &mut rng(3));
    let f = random(&[2, 8, 5, 6], 4, -1.0, 1.0);
    let blended = soa_output(&store, &layer, &f, FRAC_PI_4);
    let mut single = layer.clone();
    single.options.step_override = Some(1);
    let pinned = soa_output(&store, &single, &f, FRAC_PI_4);
    assert!(blended.max_abs_diff(&pinned).unwrap() < 1e-12);
}

struct CvaFixture {
    store: ParamStore,
    residual: Residual,
    attn: VerticalAttention,
}

fn chained_cva(seed: u64) -> CvaFixture {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let residual = Residual::new(&mut store, "b1", 3, 8, &mut r);
    let attn = VerticalAttention::new(&mut store, "b1.attn", 8, Some(4), &mut r);
    let norm = attn.bottleneck.norm.unwrap();
    let nb = store.norm_mut(norm);
    nb.running_mean = vec![0.2];
    nb.running_var = vec![1.7];
    CvaFixture {
        store,
        residual,
        attn,
    }
}

fn cva_forward(fx: &CvaFixture, x: &Tensor, prev: &Tensor) -> (Tensor, Tensor, Tensor) {
    let mut g = Graph::new();
    let bound = fx.store.bind_constants(&mut g);
    let xi = g.constant(x.clone());
    let pi = g.constant(prev.clone());
    let mut ctx = Ctx::new(&mut g, &fx.store, &bound, Mode::Eval);
    let fconv = fx.residual.forward(&mut ctx, xi).unwrap();
    let out = fx.attn.forward(&mut ctx, fconv, Some(pi)).unwrap();
    (
        g.value(fconv).clone(),
        g.value(out.vectors[0].1).clone(),
        g.value(out.output).clone(),
    )
}

#[test]
fn neutral_attention_leaves_features_unchanged() {
    let mut fx = chained_cva(5);
    let b = fx.attn.bottleneck.clone();
    fill(&mut fx.store, b.reduce, 0.5);
    fill(&mut fx.store, b.expand, 60.0);
    let nb = fx.store.norm_mut(b.norm.unwrap());
    nb.running_mean = vec![0.0];
    nb.running_var = vec![1.0];
    // One unit weight per output channel: the chained factor is exactly 1.
    let chain = fx.attn.chain.as_ref().unwrap().weight;
    let w = Tensor::from_fn(
        [8, 4, 1, 1],
        |i| if i % 4 == (i / 4) % 4 { 1.0 } else { 0.0 },
    );
    fx.store.set_value(chain, w).unwrap();

    let x = random(&[2, 3, 8, 8], 6, 0.5, 1.5);
    let prev = Tensor::ones([2, 4, 1, 8]);
    let (fconv, attn, out) = cva_forward(&fx, &x, &prev);
    assert!(attn.data().iter().all(|&a| a == 1.0));
    assert_eq!(out, fconv);
}

#[test]
fn constant_feature_map_gives_constant_attention_per_channel() {
    let mut store = ParamStore::new();
    let attn = VerticalAttention::new(&mut store, "a", 8, None, &mut rng(7));
    let f = Tensor::from_fn([2, 8, 4, 5], |i| 0.3 + 0.1 * ((i / 20) % 8) as f64);
    let mut g = Graph::new();
    let bound = store.bind_constants(&mut g);
    let fi = g.constant(f.clone());
    let mut ctx = Ctx::new(&mut g, &store, &bound, Mode::Eval);
    let out = attn.forward(&mut ctx, fi, None).unwrap();
    let a = g.value(out.vectors[0].1);
    let y = g.value(out.output);
    for bc in 0..16 {
        let row = &a.data()[bc * 5..(bc + 1) * 5];
        assert!(row.iter().all(|&v| (v - row[0]).abs() < 1e-15));
        let ratio = y.data()[bc * 20] / f.data()[bc * 20];
        for k in 0..20 {
            assert!((y.data()[bc * 20 + k] / f.data()[bc * 20 + k] - ratio).abs() < 1e-12);
        }
    }
}

#[test]
fn chained_block_matches_step_by_step_reference() {
    let fx = chained_cva(8);
    let x = random(&[2, 3, 8, 8], 9, -1.0, 1.0);
    let prev = random(&[2, 4, 1, 8], 10, 0.0, 1.0);
    let (_, attn, out) = cva_forward(&fx, &x, &prev);

    let p = |id| fx.store.value(id).clone();
    let r = &fx.residual;
    let main = conv_ref(
        &conv_ref(&x, &p(r.conv3), Some(&p(r.bias3)), 2, 1),
        &p(r.conv1),
        None,
        1,
        0,
    );
    let short = conv_ref(&x, &p(r.shortcut), None, 2, 0);
    let fconv = main.add(&short).unwrap().map(|v| v.max(0.0));
    let [b, c, h, w] = dims(&fconv);

    let bn = &fx.attn.bottleneck;
    let nb = fx.store.norm(bn.norm.unwrap());
    let (gamma, beta) = (p(nb.gamma).data()[0], p(nb.beta).data()[0]);
    let (w1, w2) = (p(bn.reduce), p(bn.expand));
    let wc = p(fx.attn.chain.as_ref().unwrap().weight);
    let mut expect_attn = vec![0.0; b * c * w];
    let mut expect_out = vec![0.0; b * c * h * w];
    for n in 0..b {
        for col in 0..w {
            let mean: Vec<f64> = (0..c)
                .map(|k| {
                    (0..h)
                        .map(|i| fconv.data()[((n * c + k) * h + i) * w + col])
                        .sum::<f64>()
                        / h as f64
                })
                .collect();
            let z: f64 = (0..c).map(|k| w1.data()[k] * mean[k]).sum();
            let z =
                (z - nb.running_mean[0]) / (nb.running_var[0] + nb.epsilon).sqrt() * gamma + beta;
            let hidden = hard_swish(z);
            let pooled_prev: Vec<f64> = (0..4)
                .map(|q| {
                    let base = (n * 4 + q) * 8;
                    prev.data()[base + 2 * col].max(prev.data()[base + 2 * col + 1])
                })
                .collect();
            for k in 0..c {
                let carried: f64 = (0..4).map(|q| wc.data()[k * 4 + q] * pooled_prev[q]).sum();
                let a = sigmoid(w2.data()[k] * hidden) * carried;
                expect_attn[(n * c + k) * w + col] = a;
                for i in 0..h {
                    let idx = ((n * c + k) * h + i) * w + col;
                    expect_out[idx] = fconv.data()[idx] * a;
                }
            }
        }
    }
    let ea = Tensor::new([b, c, 1, w], expect_attn).unwrap();
    let eo = Tensor::new([b, c, h, w], expect_out).unwrap();
    assert!(attn.max_abs_diff(&ea).unwrap() < 1e-12);
    assert!(out.max_abs_diff(&eo).unwrap() < 1e-12);
}

#[test]
fn transplanted_weights_agree_on_random_probe() {
    let mut store = ParamStore::new();
    let cva = VerticalAttention::new(&mut store, "a", 4, None, &mut rng(11));
    let soa = OrientedAttention::from_vertical(&cva, SoaOptions::default());
    let probe = random(&[4, 4, 8, 8], 12, -1.0, 1.0);
    assert!(soa_equals_cva_at_vertical(&store, &cva, &soa, &probe).unwrap());
}

#[test]
fn hot_column_ranks_first_in_both() {
    let mut store = ParamStore::new();
    let cva = VerticalAttention::new(&mut store, "a", 4, None, &mut rng(13));
    // Monotone bottleneck: positive maps around a hard-swish fed nonnegative input.
    fill(&mut store, cva.bottleneck.reduce, 0.3);
    fill(&mut store, cva.bottleneck.expand, 0.7);
    let soa = OrientedAttention::from_vertical(
        &cva,
        SoaOptions {
            epsilon: 0.0,
            denominator: OapDenominator::Count,
            step_override: Some(0),
        },
    );
    let hot = 3;
    let f = Tensor::from_fn([1, 4, 5, 7], |i| if i % 7 == hot { 1.0 } else { 0.0 });

    let mut g = Graph::new();
    let bound = store.bind_constants(&mut g);
    let fi = g.constant(f);
    let t = g.constant(Tensor::scalar(FRAC_PI_2));
    let mut ctx = Ctx::new(&mut g, &store, &bound, Mode::Eval);
    let a = cva.forward(&mut ctx, fi, None).unwrap();
    let b = soa.forward(&mut ctx, fi, t, None).unwrap();
    for v in [a.vectors[0].1, b.vectors[0].1] {
        let d = g.value(v).data();
        for ch in 0..4 {
            let row = &d[ch * 7..(ch + 1) * 7];
            let best = (0..7).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
            assert_eq!(best, hot);
        }
    }
}

#[test]
fn independent_weights_do_not_agree() {
    let mut store = ParamStore::new();
    let cva = VerticalAttention::new(&mut store, "a", 4, None, &mut rng(14));
    let other = OrientedAttention::new(
        &mut store,
        "b",
        4,
        None,
        SoaOptions::default(),
        &mut rng(15),
    );
    let probe = random(&[4, 4, 8, 8], 16, -1.0, 1.0);
    assert!(!soa_equals_cva_at_vertical(&store, &cva, &other, &probe).unwrap());
}
