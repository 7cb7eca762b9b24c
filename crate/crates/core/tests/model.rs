mod common;

use common::random;
use orient_attn::autodiff::Graph;
use orient_attn::model::{Model, ModelConfig, Variant, AU_LENGTH};
use orient_attn::params::{Ctx, Mode};
use orient_attn::Tensor;

fn config(variant: Variant, use_au: bool) -> ModelConfig {
    ModelConfig {
        variant,
        use_au,
        ..ModelConfig::default()
    }
}

#[test]
fn zero_input_gives_the_head_bias() {
    for variant in Variant::ALL {
        let mut model = Model::build(&config(variant, true)).unwrap();
        let bias = random(&[4], 1, -1.0, 1.0);
        model
            .store
            .set_value(model.head_bias, bias.clone())
            .unwrap();
        let logits = model
            .predict(
                &Tensor::zeros([2, 1, 64, 64]),
                Some(&Tensor::zeros([2, AU_LENGTH])),
            )
            .unwrap();
        for row in logits.data().chunks(4) {
            for (a, b) in row.iter().zip(bias.data()) {
                assert!((a - b).abs() < 1e-12, "{variant}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn shapes_through_the_network() {
    let model = Model::build(&config(Variant::C, false)).unwrap();
    let mut g = Graph::new();
    let bound = model.store.bind_constants(&mut g);
    let x = g.constant(random(&[2, 1, 64, 64], 2, -1.0, 1.0));
    let mut ctx = Ctx::new(&mut g, &model.store, &bound, Mode::Eval);
    let out = model.forward(&mut ctx, x, None).unwrap();
    assert_eq!(g.value(out.logits).shape(), &[2, 4]);
    assert_eq!(g.value(out.features).shape(), &[2, 128]);
    let sizes: Vec<Vec<usize>> = out
        .attention
        .iter()
        .map(|a| g.value(a.output).shape().to_vec())
        .collect();
    assert_eq!(
        sizes,
        vec![
            vec![2, 16, 32, 32],
            vec![2, 32, 16, 16],
            vec![2, 64, 8, 8],
            vec![2, 128, 4, 4]
        ]
    );
    assert_eq!(out.thetas.len(), 4);
}

#[test]
fn one_au_bit_moves_logits_by_one_head_column() {
    let model = Model::build(&config(Variant::B, true)).unwrap();
    let x = random(&[1, 1, 64, 64], 3, -0.2, 0.2);
    let mut bits = vec![0.0; AU_LENGTH];
    bits[1] = 1.0;
    bits[12] = 1.0;
    let base = model
        .predict(
            &x,
            Some(&Tensor::new([1, AU_LENGTH], bits.clone()).unwrap()),
        )
        .unwrap();
    let w = model.store.value(model.head_weight);
    let width = w.shape()[1];
    let c = width - AU_LENGTH;
    for j in [0, 12, 20] {
        let mut flipped = bits.clone();
        flipped[j] = 1.0 - flipped[j];
        let sign = flipped[j] - bits[j];
        let out = model
            .predict(&x, Some(&Tensor::new([1, AU_LENGTH], flipped).unwrap()))
            .unwrap();
        for k in 0..4 {
            let delta = out.data()[k] - base.data()[k];
            assert!((delta - sign * w.data()[k * width + c + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn frozen_variant_stores_as_much_as_b_but_trains_less() {
    let b = Model::build(&config(Variant::B, false))
        .unwrap()
        .param_count();
    let d = Model::build(&config(Variant::D, false))
        .unwrap()
        .param_count();
    assert_eq!(d.total_stored, b.total_stored);
    assert_eq!(d.total_trainable + 1, b.total_trainable);
}

#[test]
fn snapshot_round_trip_preserves_predictions() {
    let model = Model::build(&config(Variant::C, true)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fslt");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    let x = random(&[2, 1, 64, 64], 4, -1.0, 1.0);
    let au = Tensor::from_fn([2, AU_LENGTH], |i| (i % 3 == 0) as u8 as f64);
    assert_eq!(
        model.predict(&x, Some(&au)).unwrap(),
        back.predict(&x, Some(&au)).unwrap()
    );
    assert_eq!(back.theta_values(), model.theta_values());
}
