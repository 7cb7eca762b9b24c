use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// `confusion[true][pred]` counts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Classification {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub correct: usize,
    pub total: usize,
}

pub fn classification(
    labels: &[usize],
    predictions: &[usize],
    num_classes: usize,
) -> Result<Classification> {
    if labels.is_empty() {
        return Err(Error::invalid("cannot score an empty sample set"));
    }
    if labels.len() != predictions.len() {
        return Err(Error::invalid(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&l, &p) in labels.iter().zip(predictions) {
        if l >= num_classes || p >= num_classes {
            return Err(Error::invalid(format!(
                "class id out of range 0..{num_classes}"
            )));
        }
        confusion[l][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
    let per_class_f1: Vec<f64> = (0..num_classes)
        .map(|k| {
            let tp = confusion[k][k] as f64;
            let predicted: usize = (0..num_classes).map(|t| confusion[t][k]).sum();
            let actual: usize = confusion[k].iter().sum();
            if tp == 0.0 {
                return 0.0;
            }
            let (p, r) = (tp / predicted as f64, tp / actual as f64);
            2.0 * p * r / (p + r)
        })
        .collect();
    Ok(Classification {
        accuracy: correct as f64 / labels.len() as f64,
        macro_f1: per_class_f1.iter().sum::<f64>() / num_classes as f64,
        per_class_f1,
        confusion,
        correct,
        total: labels.len(),
    })
}

/// Row-wise argmax, first index on ties.
pub fn argmax_rows(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedTTest {
    pub n: usize,
    pub mean_difference: f64,
    pub t: f64,
    pub df: usize,
    /// Two-sided.
    pub p_value: f64,
}

/// Paired t-test on `a[i] - b[i]` with `n - 1` degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(format!(
            "paired t-test needs two equal-length samples of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let df = d.len() - 1;
    let (t, p_value) = if sd == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = mean / (sd / n.sqrt());
        let dist =
            StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::invalid(e.to_string()))?;
        (t, 2.0 * (1.0 - dist.cdf(t.abs())))
    };
    Ok(PairedTTest {
        n: d.len(),
        mean_difference: mean,
        t,
        df,
        p_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_classifier() {
        let y = [0, 1, 2, 3, 0, 1];
        let c = classification(&y, &y, 4).unwrap();
        assert_eq!(c.accuracy, 1.0);
        assert_eq!(c.macro_f1, 1.0);
    }

    #[test]
    fn cyclic_shift_scores_zero() {
        let y: Vec<usize> = (0..8).map(|i| i % 4).collect();
        let p: Vec<usize> = y.iter().map(|&k| (k + 1) % 4).collect();
        let c = classification(&y, &p, 4).unwrap();
        assert_eq!(c.accuracy, 0.0);
        assert!(c.per_class_f1.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn empty_is_rejected() {
        assert!(classification(&[], &[], 2).is_err());
    }

    #[test]
    fn t_test_known_value() {
        // d = [1, 2, 3]: mean 2, sd 1, t = 2·√3
        let r = paired_t_test(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r.t - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.df, 2);
        assert!(r.p_value > 0.05 && r.p_value < 0.1);
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.50, 1.58]);
        assert!((m - 1.54).abs() < 1e-12);
        assert!((s - 0.04).abs() < 1e-12);
    }
}
