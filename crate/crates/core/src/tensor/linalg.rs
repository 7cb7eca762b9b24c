use super::Tensor;
use crate::error::{Error, Result};

/// Row-major matrix operand: `(data, row_stride, col_stride)`.
pub(crate) type MatRef<'a> = (&'a [f64], isize, isize);

fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize
}

/// `c = a · b + beta · c` for an `m×k` times `k×n` product, with `c` dense
/// row-major `m×n`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
) {
    let (ad, rsa, csa) = a;
    let (bd, rsb, csb) = b;
    assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0);
    assert!(m * k == 0 || max_offset(m, k, rsa, csa) < ad.len());
    assert!(k * n == 0 || max_offset(k, n, rsb, csb) < bd.len());
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every element touched through the given strides lies within the
    // slices, checked by the asserts above; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            ad.as_ptr(),
            rsa,
            csa,
            bd.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain 2-D matrix product `[m,k] · [k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k1], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::shape(format!(
            "matmul expects 2-D operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    if k1 != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k1,
        n,
        (a.data(), k1 as isize, 1),
        (b.data(), n as isize, 1),
        0.0,
        &mut out,
    );
    Tensor::new([m, n], out)
}

/// Row-wise softmax of a `[rows, classes]` matrix.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let mut out = log_softmax_rows(x)?;
    for v in out.data_mut() {
        *v = v.exp();
    }
    Ok(out)
}

pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let &[_, k] = x.shape() else {
        return Err(Error::shape(format!(
            "softmax expects [rows, classes], got {:?}",
            x.shape()
        )));
    };
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let logp = log_softmax_rows(logits)?;
    let &[rows, k] = logits.shape() else {
        unreachable!()
    };
    if labels.len() != rows {
        return Err(Error::shape(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        total -= logp.data()[r * k + y];
    }
    Ok(total / rows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new([3, 1], vec![1.0, 0.0, -1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[-2.0, -2.0]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn confident_correct_prediction_has_vanishing_loss() {
        let logits = Tensor::new([1, 3], vec![40.0, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&logits, &[0]).unwrap() < 1e-15);
        let uniform = Tensor::zeros([2, 4]);
        let ce = cross_entropy(&uniform, &[1, 3]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let x = Tensor::new([3, 4], v).unwrap();
            let p = softmax_rows(&x).unwrap();
            for row in p.data().chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
