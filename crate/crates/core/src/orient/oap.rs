//! Orientation-aware pooling along a line family, and its inverse map.

use super::geometry::OrientationGeometry;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_grid(shape: [usize; 4], geom: &OrientationGeometry) -> Result<()> {
    if shape[2] != geom.height() || shape[3] != geom.width() {
        return Err(Error::shape(format!(
            "feature map {shape:?} does not match a {}x{} line geometry",
            geom.height(),
            geom.width()
        )));
    }
    Ok(())
}

fn check_lines(t: &Tensor, geom: &OrientationGeometry) -> Result<[usize; 2]> {
    match *t.shape() {
        [b, c, 1, l] if l == geom.len() => Ok([b, c]),
        _ => Err(Error::shape(format!(
            "line vector {:?} is not [B,C,1,{}]",
            t.shape(),
            geom.len()
        ))),
    }
}

/// Sums each line into `out` (length `L` per channel plane).
fn line_sums(plane: &[f64], geom: &OrientationGeometry, out: &mut [f64]) {
    let w = geom.width();
    for (i, row) in plane.chunks_exact(w).enumerate() {
        let dst = &mut out[geom.offsets()[i]..][..w];
        for (d, &v) in dst.iter_mut().zip(row) {
            *d += v;
        }
    }
}

/// Mean of `F` along every line: `[B,C,H,W] -> [B,C,1,L]` (rank 3 input
/// gives `[C,1,L]`). Sums run in row order.
pub fn oap_forward(f: &Tensor, geom: &OrientationGeometry) -> Result<Tensor> {
    let [b, c, h, w] = f.dims4()?;
    check_grid([b, c, h, w], geom)?;
    let l = geom.len();
    let mut out = vec![0.0; b * c * l];
    for (plane, dst) in f.data().chunks_exact(h * w).zip(out.chunks_exact_mut(l)) {
        line_sums(plane, geom, dst);
        for (j, d) in dst.iter_mut().enumerate() {
            *d /= geom.divisor(j);
        }
    }
    if f.rank() == 3 {
        Tensor::new([c, 1, l], out)
    } else {
        Tensor::new([b, c, 1, l], out)
    }
}

/// Adjoint of [`oap_forward`].
pub fn oap_backward(grad: &Tensor, geom: &OrientationGeometry) -> Result<Tensor> {
    let [b, c] = check_lines(grad, geom)?;
    let (h, w, l) = (geom.height(), geom.width(), geom.len());
    let mut out = vec![0.0; b * c * h * w];
    for (g, dst) in grad.data().chunks_exact(l).zip(out.chunks_exact_mut(h * w)) {
        for (i, row) in dst.chunks_exact_mut(w).enumerate() {
            let off = geom.offsets()[i];
            for (col, d) in row.iter_mut().enumerate() {
                *d = g[col + off] / geom.divisor(col + off);
            }
        }
    }
    Tensor::new([b, c, h, w], out)
}

/// Spreads a per-line value back onto every pixel of its line:
/// `[B,C,1,L] -> [B,C,H,W]`.
pub fn fold_back(lines: &Tensor, geom: &OrientationGeometry) -> Result<Tensor> {
    let [b, c] = check_lines(lines, geom)?;
    let (h, w, l) = (geom.height(), geom.width(), geom.len());
    let mut out = vec![0.0; b * c * h * w];
    for (a, dst) in lines
        .data()
        .chunks_exact(l)
        .zip(out.chunks_exact_mut(h * w))
    {
        for (i, row) in dst.chunks_exact_mut(w).enumerate() {
            row.copy_from_slice(&a[geom.offsets()[i]..][..w]);
        }
    }
    Tensor::new([b, c, h, w], out)
}

/// Adjoint of [`fold_back`]: plain line sums.
pub fn fold_back_backward(grad: &Tensor, geom: &OrientationGeometry) -> Result<Tensor> {
    let [b, c, h, w] = grad.dims4()?;
    check_grid([b, c, h, w], geom)?;
    let l = geom.len();
    let mut out = vec![0.0; b * c * l];
    for (plane, dst) in grad.data().chunks_exact(h * w).zip(out.chunks_exact_mut(l)) {
        line_sums(plane, geom, dst);
    }
    Tensor::new([b, c, 1, l], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orient::geometry::OAP_EPSILON;
    use crate::tensor::avg_pool_height;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn square() -> Tensor {
        Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn vertical_is_column_mean() {
        let g = OrientationGeometry::build(FRAC_PI_2, 2, 2).unwrap();
        let y = oap_forward(&square(), &g).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2]);
        assert_eq!(
            y.data(),
            &[4.0 / (2.0 + OAP_EPSILON), 6.0 / (2.0 + OAP_EPSILON)]
        );
        let exact = avg_pool_height(&square()).unwrap();
        for (a, b) in y.data().iter().zip(exact.data()) {
            assert!((a - b).abs() / b < 1e-8);
        }
    }

    #[test]
    fn diagonal_hand_enumeration() {
        // offsets [1, 0]: line 0 = {(1,0)}, line 1 = {(0,0),(1,1)}, line 2 = {(0,1)}
        let g = OrientationGeometry::build(FRAC_PI_4, 2, 2).unwrap();
        assert_eq!(g.offsets(), &[1, 0]);
        let y = oap_forward(&square(), &g).unwrap();
        let want = [3.0, 2.5, 2.0];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn constant_field() {
        let g = OrientationGeometry::build(0.7, 4, 5).unwrap();
        let y = oap_forward(&Tensor::full([1, 4, 5], 2.5), &g).unwrap();
        for (j, &v) in y.data().iter().enumerate() {
            let n = g.counts()[j] as f64;
            assert!((v - 2.5 * n / (n + OAP_EPSILON)).abs() < 1e-15);
        }
    }

    #[test]
    fn height_denominator_pads_with_zeros() {
        let g = OrientationGeometry::build(FRAC_PI_4, 2, 2)
            .unwrap()
            .with_denominator(super::super::geometry::OapDenominator::Height);
        let y = oap_forward(&square(), &g).unwrap();
        assert_eq!(y.data(), &[1.5, 2.5, 1.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let g = OrientationGeometry::build(FRAC_PI_4, 3, 3).unwrap();
        assert!(oap_forward(&square(), &g).is_err());
        assert!(fold_back(&Tensor::zeros([1, 1, 1, 4]), &g).is_err());
    }

    #[test]
    fn fold_back_reads_each_pixels_line() {
        let g = OrientationGeometry::build(FRAC_PI_4, 2, 2).unwrap();
        let a = Tensor::new([1, 1, 1, 3], vec![10.0, 20.0, 30.0]).unwrap();
        let grid = fold_back(&a, &g).unwrap();
        // (0,0)->1, (0,1)->2, (1,0)->0, (1,1)->1
        assert_eq!(grid.data(), &[20.0, 30.0, 10.0, 20.0]);
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        let g = OrientationGeometry::build(2.3, 5, 4).unwrap();
        let f = Tensor::from_fn([2, 3, 5, 4], |i| ((i * 37) % 11) as f64 - 5.0);
        let v = Tensor::from_fn([2, 3, 1, g.len()], |i| ((i * 13) % 7) as f64 * 0.5 - 1.0);
        let dot = |a: &Tensor, b: &Tensor| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| x * y)
                .sum::<f64>()
        };
        let lhs = dot(&oap_forward(&f, &g).unwrap(), &v);
        let rhs = dot(&f, &oap_backward(&v, &g).unwrap());
        assert!((lhs - rhs).abs() < 1e-10);
        let lhs = dot(&fold_back(&v, &g).unwrap(), &f);
        let rhs = dot(&v, &fold_back_backward(&f, &g).unwrap());
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
