use super::Tensor;
use crate::error::{Error, Result};

/// Exact mean over the height axis: `[B,C,H,W] -> [B,C,1,W]`
/// (rank-3 input gives `[C,1,W]`).
pub fn avg_pool_height(input: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = input.dims4()?;
    let mut out = vec![0.0; b * c * w];
    for (bc, dst) in out.chunks_exact_mut(w).enumerate() {
        for row in input.data()[bc * h * w..(bc + 1) * h * w].chunks_exact(w) {
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
        for d in dst.iter_mut() {
            *d /= h as f64;
        }
    }
    if input.rank() == 3 {
        Tensor::new([c, 1, w], out)
    } else {
        Tensor::new([b, c, 1, w], out)
    }
}

/// Sliding-window maximum with a square window.
pub fn max_pool2d(input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let (out, _) = max_pool2d_with_argmax(input, (k, k), (stride, stride))?;
    if input.rank() == 3 {
        let s = out.shape()[1..].to_vec();
        out.reshape(s)
    } else {
        Ok(out)
    }
}

/// Window maximum plus, for every output element, the flat input index it
/// came from. Ties resolve to the first maximum in row-major scan order.
pub fn max_pool2d_with_argmax(
    input: &Tensor,
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
) -> Result<(Tensor, Vec<usize>)> {
    let [b, c, h, w] = input.dims4()?;
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
        return Err(Error::invalid("pool window and stride must be positive"));
    }
    if h < kh || w < kw {
        return Err(Error::shape(format!(
            "pool window {kh}x{kw} larger than input {h}x{w}"
        )));
    }
    let ho = (h - kh) / sh + 1;
    let wo = (w - kw) / sw + 1;
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    let x = input.data();
    for bc in 0..b * c {
        let base = bc * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + oy * sh * w + ox * sw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let i = base + (oy * sh + ky) * w + ox * sw + kx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new([b, c, ho, wo], out)?, arg))
}

/// Spatial mean: `[B,C,H,W] -> [B,C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = input.dims4()?;
    let n = (h * w) as f64;
    let out = input
        .data()
        .chunks_exact(h * w)
        .map(|p| p.iter().sum::<f64>() / n)
        .collect();
    Tensor::new([b, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn column_means() {
        let x = Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool_height(&x).unwrap().data(), &[2.0, 3.0]);
        let single = Tensor::new([1, 1, 3], vec![5.0, 6.0, 7.0]).unwrap();
        assert_eq!(avg_pool_height(&single).unwrap().data(), single.data());
    }

    #[test]
    fn avg_pool_height_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn([3, 5, 4], |_| rng.random_range(-2.0..2.0));
        let y = avg_pool_height(&x).unwrap();
        for c in 0..3 {
            for col in 0..4 {
                let s: f64 = (0..5).map(|i| x.data()[(c * 5 + i) * 4 + col]).sum();
                assert!((y.data()[c * 4 + col] - s / 5.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_pool_basics() {
        let x = Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(max_pool2d(&x, 2, 2).unwrap().data(), &[4.0]);
        let c = Tensor::full([2, 4, 4], 1.5);
        assert!(max_pool2d(&c, 2, 2)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.5));
        assert!(max_pool2d(&x, 3, 1).is_err());
    }

    #[test]
    fn max_pool_ties_pick_first_in_scan_order() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let (_, arg) = max_pool2d_with_argmax(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn max_pool_matches_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn([2, 4, 4], |_| rng.random_range(-1.0..1.0));
        let y = max_pool2d(&x, 2, 2).unwrap();
        for c in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut m = f64::MIN;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.data()[(c * 4 + 2 * oy + dy) * 4 + 2 * ox + dx]);
                        }
                    }
                    assert_eq!(y.data()[(c * 2 + oy) * 2 + ox], m);
                }
            }
        }
    }
}
