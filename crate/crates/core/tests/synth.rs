use std::f64::consts::FRAC_PI_2;

use orient_attn::synth::{generate_dataset, DatasetSpec, SyntheticSample};

fn spec(axis: f64, amplitude: f64, distractor: f64) -> DatasetSpec {
    DatasetSpec {
        num_subjects: 3,
        samples_per_subject: 8,
        motion_axis: axis,
        motion_amplitude: amplitude,
        distractor_amplitude: distractor,
        noise_std: 0.0,
        ..DatasetSpec::default()
    }
}

/// Squared projections of the frame difference onto the onset's row-wise
/// and column-wise central differences, summed over samples. Under a small
/// displacement `d`, `apex - onset ≈ -∇I · d`, so the larger projection
/// names the dominant motion direction.
fn gradient_energy(samples: &[SyntheticSample], n: usize) -> (f64, f64) {
    let (mut vertical, mut horizontal) = (0.0, 0.0);
    for s in samples {
        let (i0, d) = (s.onset.data(), s.difference.data());
        let (mut pv, mut ph) = (0.0, 0.0);
        for r in 1..n - 1 {
            for c in 1..n - 1 {
                let gy = (i0[(r + 1) * n + c] - i0[(r - 1) * n + c]) / 2.0;
                let gx = (i0[r * n + c + 1] - i0[r * n + c - 1]) / 2.0;
                pv += d[r * n + c] * gy;
                ph += d[r * n + c] * gx;
            }
        }
        vertical += pv * pv;
        horizontal += ph * ph;
    }
    (vertical, horizontal)
}

fn mean_abs_difference(samples: &[SyntheticSample]) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| s.difference.data().iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    total / samples.iter().map(|s| s.difference.len()).sum::<usize>() as f64
}

#[test]
fn no_motion_means_no_difference() {
    let d = generate_dataset(&spec(0.0, 0.0, 0.0)).unwrap();
    for s in &d.samples {
        assert!(s.apex.max_abs_diff(&s.onset).unwrap() < 1e-12);
        assert!(s.difference.max_abs() < 1e-12);
    }
}

#[test]
fn motion_energy_follows_the_axis() {
    let n = DatasetSpec::default().image_size;
    let upright = generate_dataset(&spec(0.0, 1.5, 0.0)).unwrap();
    let (v, h) = gradient_energy(&upright.samples, n);
    assert!(v > 4.0 * h, "vertical {v} vs horizontal {h}");

    let sideways = generate_dataset(&spec(FRAC_PI_2, 1.5, 0.0)).unwrap();
    let (v, h) = gradient_energy(&sideways.samples, n);
    assert!(h > 4.0 * v, "vertical {v} vs horizontal {h}");
}

/// Least-squares displacement `(dx, dy)` explaining the frame difference
/// inside a square window, from `apex - onset ≈ -(Ix dx + Iy dy)`.
fn window_flow(s: &SyntheticSample, n: usize, cx: f64, cy: f64, half: f64) -> (f64, f64) {
    let (i0, d) = (s.onset.data(), s.difference.data());
    let (mut xx, mut xy, mut yy, mut xt, mut yt) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in 1..n - 1 {
        for c in 1..n - 1 {
            if (c as f64 - cx).abs() > half || (r as f64 - cy).abs() > half {
                continue;
            }
            let gy = (i0[(r + 1) * n + c] - i0[(r - 1) * n + c]) / 2.0;
            let gx = (i0[r * n + c + 1] - i0[r * n + c - 1]) / 2.0;
            let t = d[r * n + c];
            xx += gx * gx;
            xy += gx * gy;
            yy += gy * gy;
            xt += gx * t;
            yt += gy * t;
        }
    }
    let det = xx * yy - xy * xy;
    ((-yy * xt + xy * yt) / det, (xy * xt - xx * yt) / det)
}

#[test]
fn class_regions_move_along_the_axis_under_default_shear() {
    let s = DatasetSpec {
        motion_axis: 0.0,
        ..DatasetSpec::default()
    };
    let d = generate_dataset(&s).unwrap();
    let n = s.image_size as f64;
    let c = (n - 1.0) / 2.0;
    // Nominal feature centres at zero rotation: two brows, then the mouth.
    let upper = [(c - 0.2 * n, c - 0.2 * n), (c + 0.2 * n, c - 0.2 * n)];
    let lower = [(c, c + 0.22 * n)];
    let (mut along, mut across) = (0.0, 0.0);
    for sample in &d.samples {
        // Classes 0 and 1 move the brows, 2 and 3 the mouth.
        let regions: &[(f64, f64)] = if sample.label < 2 { &upper } else { &lower };
        for &(x, y) in regions {
            let (dx, dy) = window_flow(sample, s.image_size, x, y, 0.12 * n);
            along += dy * dy;
            across += dx * dx;
        }
    }
    assert!(along > across, "along {along} vs across {across}");
}

#[test]
fn difference_grows_with_amplitude() {
    let levels: Vec<f64> = [0.5, 1.0, 1.5, 2.0]
        .iter()
        .map(|&a| mean_abs_difference(&generate_dataset(&spec(0.0, a, 0.0)).unwrap().samples))
        .collect();
    assert!(levels.windows(2).all(|w| w[1] > w[0]), "{levels:?}");
}

#[test]
fn noise_is_the_only_change_without_motion() {
    let mut s = spec(0.0, 0.0, 0.0);
    s.noise_std = 0.02;
    let d = generate_dataset(&s).unwrap();
    let diffs: Vec<f64> = d
        .samples
        .iter()
        .flat_map(|x| x.difference.data().to_vec())
        .collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let var = diffs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / diffs.len() as f64;
    // Independent noise on both frames; clipping to [0, 1] only shrinks it.
    assert!(mean.abs() < 1e-3);
    assert!(
        var.sqrt() < 0.02 * 2f64.sqrt() * 1.05 && var.sqrt() > 0.02,
        "{}",
        var.sqrt()
    );
}
