//! End-to-end acceptance checks, shared by the `verify` command and the
//! acceptance test target.

pub mod grad;

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, FRAC_PI_6, PI};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Attention, Model, ModelConfig, Variant};
use crate::orient::{soa_equals_cva_at_vertical, OrientationGeometry};
use crate::synth::{generate_dataset, DatasetSpec};
use crate::tensor::Tensor;
use crate::train::{mean_std, paired_t_test};
use crate::train::{train, write_report, RunConfig, TrainReport};

#[derive(Clone, Debug, Serialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "criterion {} ({}): {} [{:.1}s] {}",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.seconds,
            self.detail
        )
    }
}

fn timed(
    id: u8,
    name: &'static str,
    f: impl FnOnce() -> Result<(bool, String)>,
) -> CriterionResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CriterionResult {
        id,
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Size of the training-based checks. The defaults keep all three under a
/// few minutes on one core.
#[derive(Clone, Debug, Serialize)]
pub struct Scale {
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

impl Default for Scale {
    fn default() -> Self {
        Scale {
            image_size: 32,
            channels: vec![8, 16, 32, 64],
            epochs: 20,
            seeds: (0..5).collect(),
            jobs: 1,
        }
    }
}

impl Scale {
    /// Variant-B or D run on the synthetic set with class axis `rho`, θ
    /// starting exactly at π/4.
    pub fn run_config(&self, variant: Variant, rho: f64, seed: u64) -> RunConfig {
        RunConfig {
            model: ModelConfig {
                variant,
                input_size: self.image_size,
                channels: self.channels.clone(),
                theta_init: FRAC_PI_4,
                theta_jitter: 0.0,
                ..ModelConfig::default()
            },
            data: DatasetSpec {
                image_size: self.image_size,
                motion_axis: rho,
                seed,
                ..DatasetSpec::default()
            },
            epochs: self.epochs,
            seed,
            ..RunConfig::default()
        }
    }

    fn train(&self, variant: Variant, rho: f64, seed: u64) -> Result<TrainReport> {
        let run = self.run_config(variant, rho, seed);
        let data = generate_dataset(&run.data)?;
        train(&run, &data, self.jobs)
    }
}

/// Final θ of a run: the mean over completed folds.
fn final_theta(report: &TrainReport) -> Result<f64> {
    report
        .summary
        .theta
        .as_ref()
        .map(|t| t.mean)
        .ok_or_else(|| Error::invalid("run has no completed fold with a θ"))
}

pub fn gradients() -> CriterionResult {
    timed(1, "gradient correctness", || {
        let cases = grad::run_suite()?;
        let failed: Vec<&str> = cases
            .iter()
            .filter(|c| !c.passes())
            .map(|c| c.name.as_str())
            .collect();
        let worst = cases
            .iter()
            .map(|c| c.report.max_rel_err())
            .fold(0.0, f64::max);
        Ok((
            failed.is_empty(),
            format!(
                "{} cases, worst relative error {worst:.2e}, failed: {failed:?}",
                cases.len()
            ),
        ))
    })
}

/// Largest attention or logit difference between a variant-A model and its
/// transplanted variant-B twin pinned to vertical lines.
pub fn vertical_degeneration_gap(probes: usize, seed: u64) -> Result<(usize, f64)> {
    let config = ModelConfig {
        variant: Variant::A,
        input_size: 16,
        channels: vec![4, 8, 8, 8],
        seed,
        ..ModelConfig::default()
    };
    let a = Model::build(&config)?;
    let b = a.transplant_to_oriented()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);

    // First-block attention vectors on random feature maps.
    let (cva, soa) = match (&a.blocks[0].attention, &b.blocks[0].attention) {
        (Attention::Vertical(v), Attention::Oriented { layer, .. }) => (v, layer),
        _ => return Err(Error::invalid("unexpected attention kinds")),
    };
    let c = config.channels[0];
    let mut agree = 0;
    for _ in 0..probes {
        let (h, w) = (rng.random_range(2..9), rng.random_range(2..9));
        let probe = Tensor::from_fn([2, c, h, w], |_| rng.random_range(-1.0..1.0));
        if soa_equals_cva_at_vertical(&a.store, cva, soa, &probe)? {
            agree += 1;
        }
    }
    // Whole-model logits.
    let opts = crate::model::ForwardOptions {
        step_override: Some(0),
        epsilon: Some(0.0),
        ablate_chain: false,
    };
    let mut gap = 0.0f64;
    for _ in 0..probes {
        let x = Tensor::from_fn([2, 1, 16, 16], |_| rng.random_range(0.0..1.0));
        let la = a.predict(&x, None)?;
        let lb = b.predict_with(&x, None, opts)?;
        gap = gap.max(la.max_abs_diff(&lb)?);
    }
    Ok((agree, gap))
}

pub fn vertical_degeneration() -> CriterionResult {
    timed(2, "vertical degeneration", || {
        let n = 10;
        let (agree, gap) = vertical_degeneration_gap(n, 7)?;
        Ok((
            agree == n && gap <= 1e-9,
            format!("attention agrees on {agree}/{n} probes, max logit gap {gap:.2e}"),
        ))
    })
}

/// Runs variant B on the vertical set once per seed. Shared by the θ
/// convergence and frozen-axis checks.
pub fn vertical_b_runs(scale: &Scale) -> Result<Vec<TrainReport>> {
    scale
        .seeds
        .iter()
        .map(|&s| scale.train(Variant::B, 0.0, s))
        .collect()
}

pub fn theta_convergence(b_runs: &[TrainReport], started: Instant) -> CriterionResult {
    let mut r = timed(3, "θ convergence", || {
        let thetas: Vec<f64> = b_runs.iter().map(final_theta).collect::<Result<_>>()?;
        let hits = thetas
            .iter()
            .filter(|t| (*t - FRAC_PI_2).abs() < 0.15)
            .count();
        Ok((
            hits * 5 >= 4 * thetas.len(),
            format!(
                "{hits}/{} seeds within π/2 ± 0.15, final θ {thetas:.3?}",
                thetas.len()
            ),
        ))
    });
    r.seconds = started.elapsed().as_secs_f64();
    r
}

pub fn axis_recovery(scale: &Scale) -> CriterionResult {
    timed(4, "axis recovery", || {
        let rho = FRAC_PI_6;
        let target = FRAC_PI_2 - rho;
        let mut thetas = Vec::new();
        for &s in &scale.seeds {
            thetas.push(final_theta(&scale.train(Variant::B, rho, s)?)?);
        }
        let hits = thetas
            .iter()
            .filter(|t| (*t - target).abs() < (*t - FRAC_PI_2).abs())
            .count();
        Ok((
            hits * 5 >= 4 * thetas.len(),
            format!(
                "{hits}/{} seeds closer to π/2 - ρ than π/2, final θ {thetas:.3?}",
                thetas.len()
            ),
        ))
    })
}

pub fn frozen_axis(scale: &Scale, b_runs: &[TrainReport]) -> CriterionResult {
    timed(5, "mis-frozen axis", || {
        let b: Vec<f64> = b_runs
            .iter()
            .map(|r| r.summary.mean_fold_accuracy)
            .collect();
        let mut d = Vec::new();
        for &s in &scale.seeds {
            d.push(scale.train(Variant::D, 0.0, s)?.summary.mean_fold_accuracy);
        }
        let (mb, md) = (mean_std(&b).0, mean_std(&d).0);
        let t = paired_t_test(&b, &d)?;
        Ok((
            mb - md >= 0.10,
            format!(
                "B {mb:.3}, D {md:.3}, drop {:.1} pp (paired t {:.2}, p {:.3})",
                100.0 * (mb - md),
                t.t,
                t.p_value
            ),
        ))
    })
}

pub fn param_accounting() -> CriterionResult {
    timed(6, "parameter accounting", || {
        let base = ModelConfig::default();
        let count = |v: Variant| {
            Model::build(&ModelConfig {
                variant: v,
                ..base.clone()
            })
            .map(|m| m.param_count())
        };
        let (a, b, c) = (count(Variant::A)?, count(Variant::B)?, count(Variant::C)?);
        let theta = crate::params::ParamGroup::Theta;
        let closed: Vec<usize> = base
            .channels
            .iter()
            .map(|&ch| {
                let r = 8.max(ch / 32);
                2 * ch * (ch / r)
            })
            .collect();
        let ok_c = c.total_trainable == b.total_trainable + 3;
        let ok_a = a.trainable[&theta] == 0 && a.stored[&theta] == 0;
        let ok_bn = [&a, &b, &c]
            .iter()
            .all(|p| p.bottleneck_per_block == closed);
        Ok((
            ok_c && ok_a && ok_bn,
            format!(
                "trainable A {} / B {} / C {}, A θ {}, bottlenecks {:?} vs closed form {closed:?}",
                a.total_trainable,
                b.total_trainable,
                c.total_trainable,
                a.trainable[&theta],
                b.bottleneck_per_block
            ),
        ))
    })
}

/// Checks one geometry against an independent construction of its lines:
/// walking from each line's top pixel down `S` columns per row.
fn partition_holds(theta: f64, h: usize, w: usize) -> Result<bool> {
    let g = OrientationGeometry::build(theta, h, w)?;
    let cot = (theta.cos() / theta.sin()).abs().max(1e-2);
    let s = (cot.round() as usize).min(w - 1);
    let l = s * (h - 1) + w;
    if g.step() != s || g.len() != l {
        return Ok(false);
    }
    if (theta - FRAC_PI_2).abs() < 1e-12 && l != w {
        return Ok(false);
    }
    let mut owner = vec![usize::MAX; h * w];
    let mut counts = vec![0usize; l];
    for (j, count) in counts.iter_mut().enumerate() {
        for row in 0..h {
            // Acute lines drift right going down; obtuse lines drift left.
            let col = if theta <= FRAC_PI_2 {
                j as isize - ((h - 1 - row) * s) as isize
            } else {
                j as isize - (row * s) as isize
            };
            if (0..w as isize).contains(&col) {
                let p = row * w + col as usize;
                if owner[p] != usize::MAX {
                    return Ok(false);
                }
                owner[p] = j;
                *count += 1;
            }
        }
    }
    let every_pixel_once = owner.iter().all(|&o| o != usize::MAX);
    let matches = (0..h).all(|r| (0..w).all(|c| g.line_of(r, c) == owner[r * w + c]));
    Ok(every_pixel_once
        && matches
        && counts == g.counts()
        && counts.iter().sum::<usize>() == h * w
        && counts.iter().all(|&c| c > 0))
}

pub fn geometry_invariants() -> CriterionResult {
    timed(7, "geometry invariants", || {
        let mut thetas: Vec<f64> = (1..180).map(|k| k as f64 * PI / 180.0).collect();
        thetas.extend([1e-3, PI - 1e-3, FRAC_PI_2, 0.9, 1.2, 2.0]);
        let mut checked = 0;
        let mut bad = Vec::new();
        for &t in &thetas {
            for h in 1..=12 {
                for w in 1..=12 {
                    checked += 1;
                    if !partition_holds(t, h, w)? {
                        bad.push((t, h, w));
                    }
                }
            }
        }
        Ok((
            bad.is_empty(),
            format!(
                "{checked} (θ, H, W) cases, {} violations {:?}",
                bad.len(),
                &bad[..bad.len().min(3)]
            ),
        ))
    })
}

/// Trains the same small config twice into `dir/a` and `dir/b` and compares
/// every written file byte for byte.
pub fn determinism_in(dir: &Path) -> Result<(bool, String)> {
    let mut run = Scale {
        image_size: 16,
        channels: vec![4, 8, 8, 8],
        epochs: 2,
        seeds: vec![3],
        jobs: 2,
    }
    .run_config(Variant::C, 0.0, 3);
    run.data.num_subjects = 4;
    run.data.samples_per_subject = 8;
    run.batch_size = 8;
    let data = generate_dataset(&run.data)?;
    let mut files = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.join(sub);
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        write_report(&train(&run, &data, 2)?, &out)?;
        files.push(read_tree(&out)?);
    }
    let n = files[0].len();
    Ok((files[0] == files[1] && n > 2, format!("{n} files compared")))
}

fn read_tree(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                let rel = p
                    .strip_prefix(dir)
                    .unwrap_or(&p)
                    .to_string_lossy()
                    .into_owned();
                out.push((rel, bytes));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn determinism(scratch: &Path) -> CriterionResult {
    timed(8, "determinism", || determinism_in(scratch))
}

/// Every criterion in order. `scratch` must be an empty writable directory.
pub fn run_all(
    scale: &Scale,
    scratch: &Path,
    mut report: impl FnMut(&CriterionResult),
) -> Vec<CriterionResult> {
    let mut out = Vec::new();
    let mut push = |r: CriterionResult| {
        report(&r);
        out.push(r);
    };
    push(gradients());
    push(vertical_degeneration());
    let started = Instant::now();
    match vertical_b_runs(scale) {
        Ok(b_runs) => {
            push(theta_convergence(&b_runs, started));
            push(axis_recovery(scale));
            push(frozen_axis(scale, &b_runs));
        }
        Err(e) => {
            for (id, name) in [
                (3, "θ convergence"),
                (4, "axis recovery"),
                (5, "mis-frozen axis"),
            ] {
                push(CriterionResult {
                    id,
                    name,
                    passed: false,
                    detail: format!("error: {e}"),
                    seconds: 0.0,
                });
            }
        }
    }
    push(param_accounting());
    push(geometry_invariants());
    push(determinism(scratch));
    out
}
