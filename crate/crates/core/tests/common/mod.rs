#![allow(dead_code)]

use orient_attn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Direct-loop convolution with zero padding.
pub fn conv_ref(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let [b, ci, h, wd] = dims(x);
    let [co, _, kh, kw] = dims(w);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * co * oh * ow];
    for n in 0..b {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias.map_or(0.0, |t| t.data()[o]);
                    for c in 0..ci {
                        for u in 0..kh {
                            for v in 0..kw {
                                let (r, s) = (
                                    (i * stride + u) as isize - pad as isize,
                                    (j * stride + v) as isize - pad as isize,
                                );
                                if r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < wd {
                                    acc += x.data()
                                        [((n * ci + c) * h + r as usize) * wd + s as usize]
                                        * w.data()[((o * ci + c) * kh + u) * kw + v];
                                }
                            }
                        }
                    }
                    out[((n * co + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new([b, co, oh, ow], out).unwrap()
}

pub fn dims(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn hard_swish(x: f64) -> f64 {
    x * (x + 3.0).max(0.0) / 6.0
}
