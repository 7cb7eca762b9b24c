//! Leave-one-subject-out training and evaluation.

mod metrics;
mod optim;

pub use metrics::{
    argmax_rows, classification, mean_std, paired_t_test, Classification, PairedTTest,
};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::params::{Ctx, Mode};
use crate::synth::{loso_folds, Dataset, DatasetSpec, Fold};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DatasetSpec,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub theta_lr_multiplier: f64,
    /// Seeds model initialization and batch order.
    pub seed: u64,
    /// Training subjects held out for checkpoint selection, taken cyclically
    /// after the test subject.
    pub val_subjects: usize,
    /// Test subjects to run; empty means every fold.
    pub folds: Vec<usize>,
    pub output_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            data: DatasetSpec::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 40,
            batch_size: 16,
            theta_lr_multiplier: 5.0,
            seed: 0,
            val_subjects: 1,
            folds: Vec::new(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.optimizer.validate()?;
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(
                "batch_size",
                "must be at least 2 (batch norm)",
            ));
        }
        if !(self.theta_lr_multiplier >= 0.0 && self.theta_lr_multiplier.is_finite()) {
            return Err(Error::config(
                "theta_lr_multiplier",
                "must be finite and nonnegative",
            ));
        }
        if self.model.num_classes != self.data.num_classes {
            return Err(Error::config(
                "model.num_classes",
                format!(
                    "{} classes in the model, {} in the data",
                    self.model.num_classes, self.data.num_classes
                ),
            ));
        }
        if self.model.input_size != self.data.image_size {
            return Err(Error::config(
                "model.input_size",
                format!(
                    "model input {} vs image size {}",
                    self.model.input_size, self.data.image_size
                ),
            ));
        }
        if self.val_subjects + 2 > self.data.num_subjects {
            return Err(Error::config(
                "val_subjects",
                format!(
                    "{} subjects cannot hold out 1 test and {} validation",
                    self.data.num_subjects, self.val_subjects
                ),
            ));
        }
        if let Some(bad) = self.folds.iter().find(|&&f| f >= self.data.num_subjects) {
            return Err(Error::config("folds", format!("no subject {bad}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub fold: usize,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub thetas: Vec<f64>,
}

pub const METRICS_HEADER: &str =
    "fold,epoch,split,loss,acc,macro_f1,theta_0,theta_1,theta_2,theta_3";

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.fold,
            r.epoch,
            r.split.name(),
            r.loss,
            r.accuracy,
            r.macro_f1
        );
        for k in 0..4 {
            out.push(',');
            if let Some(t) = r.thetas.get(k) {
                let _ = write!(out, "{t}");
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldStatus {
    Completed,
    Diverged,
}

#[derive(Clone, Debug, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_subject: usize,
    pub val_subjects: Vec<usize>,
    pub status: FoldStatus,
    pub diagnostic: Option<String>,
    /// Epoch whose weights were kept (best validation accuracy).
    pub best_epoch: usize,
    pub test: Option<Classification>,
    pub final_thetas: Vec<f64>,
    #[serde(skip)]
    pub model: Option<Model>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    /// Correct over total across all completed folds.
    pub overall_accuracy: f64,
    pub mean_fold_accuracy: f64,
    pub mean_fold_macro_f1: f64,
    pub completed_folds: usize,
    pub diverged_folds: usize,
    pub theta: Option<ThetaSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub records: Vec<MetricsRecord>,
    pub folds: Vec<FoldResult>,
    pub summary: RunSummary,
}

/// Mean and population std of final θ, per parameter and pooled.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThetaSummary {
    pub mean: f64,
    pub std: f64,
    pub per_param: Vec<(f64, f64)>,
    pub finals: Vec<Vec<f64>>,
}

pub fn theta_summary(finals: &[Vec<f64>]) -> Option<ThetaSummary> {
    let width = finals.first()?.len();
    if width == 0 || finals.iter().any(|f| f.len() != width) {
        return None;
    }
    let pooled: Vec<f64> = finals.iter().flatten().copied().collect();
    let (mean, std) = mean_std(&pooled);
    let per_param = (0..width)
        .map(|k| mean_std(&finals.iter().map(|f| f[k]).collect::<Vec<_>>()))
        .collect();
    Some(ThetaSummary {
        mean,
        std,
        per_param,
        finals: finals.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub metrics: Classification,
}

/// Inference-mode loss and metrics over `indices`.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty sample set"));
    }
    let k = model.config.num_classes;
    let mut preds = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    let mut loss_sum = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, au, y) = dataset.batch(chunk)?;
        let logits = model.predict(&x, model.config.use_au.then_some(&au))?;
        loss_sum += crate::tensor::cross_entropy(&logits, &y)? * chunk.len() as f64;
        preds.extend(argmax_rows(logits.data(), k));
        labels.extend(y);
    }
    Ok(Evaluation {
        loss: loss_sum / indices.len() as f64,
        metrics: classification(&labels, &preds, k)?,
    })
}

fn derive(seed: u64, a: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a.wrapping_mul(0xD1B5_4A32_D192_ED03))
        ^ 0x5DEE_CE66
}

/// Splits a batch order into chunks of `size`, folding a trailing singleton
/// into the previous chunk so batch statistics stay defined.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + size).min(order.len());
        if order.len() - end == 1 {
            end = order.len();
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}

/// Trains and evaluates one LOSO fold.
pub fn train_fold(
    run: &RunConfig,
    dataset: &Dataset,
    fold_index: usize,
    fold: &Fold,
) -> Result<(FoldResult, Vec<MetricsRecord>)> {
    let subjects = dataset.subjects();
    let pos = subjects
        .iter()
        .position(|&s| s == fold.test_subject)
        .unwrap_or(0);
    let val: Vec<usize> = (1..=run.val_subjects)
        .map(|k| subjects[(pos + k) % subjects.len()])
        .collect();
    let train_subj: Vec<usize> = fold
        .train_subjects
        .iter()
        .copied()
        .filter(|s| !val.contains(s))
        .collect();
    let train_idx = dataset.indices_of(&train_subj);
    let val_idx = dataset.indices_of(&val);
    let test_idx = dataset.indices_of(&[fold.test_subject]);
    if train_idx.len() < 2 {
        return Err(Error::invalid("fold has fewer than two training samples"));
    }

    let mut mcfg = run.model.clone();
    mcfg.seed = derive(run.seed, fold_index as u64);
    let mut model = Model::build(&mcfg)?;
    let mut opt = Optimizer::new(run.optimizer.clone(), run.theta_lr_multiplier);
    let mut rng = ChaCha8Rng::seed_from_u64(derive(run.seed, 1000 + fold_index as u64));
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut diverged = None;
    let use_au = model.config.use_au;

    'epochs: for epoch in 1..=run.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut preds, mut labels) = (0.0, Vec::new(), Vec::new());
        for chunk in batches(&order, run.batch_size) {
            let (x, au, y) = dataset.batch(chunk)?;
            let mut g = Graph::new();
            let bound = model.store.bind(&mut g);
            let xi = g.constant(x);
            let ai = use_au.then(|| g.constant(au));
            let mut ctx = Ctx::new(&mut g, &model.store, &bound, Mode::Train);
            let out = model.forward(&mut ctx, xi, ai)?;
            let updates = std::mem::take(&mut ctx.norm_updates);
            let loss = g.cross_entropy(out.logits, &y)?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                diverged = Some(format!("loss became {lv} in epoch {epoch}"));
                break 'epochs;
            }
            loss_sum += lv * chunk.len() as f64;
            preds.extend(argmax_rows(
                g.value(out.logits).data(),
                model.config.num_classes,
            ));
            labels.extend(y);
            let mut grads = g.backward(loss)?;
            let grads = model.store.collect_grads(&bound, &mut grads);
            drop(g);
            model.store.apply_norm_updates(&updates);
            opt.step(&mut model.store, &grads)?;
        }
        let thetas = model.theta_values();
        let train_m = classification(&labels, &preds, model.config.num_classes)?;
        records.push(MetricsRecord {
            fold: fold_index,
            epoch,
            split: Split::Train,
            loss: loss_sum / order.len() as f64,
            accuracy: train_m.accuracy,
            macro_f1: train_m.macro_f1,
            thetas: thetas.clone(),
        });
        let mut val_acc = train_m.accuracy;
        for (split, idx) in [(Split::Val, &val_idx), (Split::Test, &test_idx)] {
            if idx.is_empty() {
                continue;
            }
            let e = evaluate(&model, dataset, idx, run.batch_size)?;
            if split == Split::Val {
                val_acc = e.metrics.accuracy;
            }
            records.push(MetricsRecord {
                fold: fold_index,
                epoch,
                split,
                loss: e.loss,
                accuracy: e.metrics.accuracy,
                macro_f1: e.metrics.macro_f1,
                thetas: thetas.clone(),
            });
        }
        if best.as_ref().is_none_or(|(a, _, _)| val_acc > *a) {
            best = Some((val_acc, epoch, model.clone()));
        }
    }

    let final_thetas = model.theta_values();
    let result = match (diverged, best) {
        (Some(msg), _) => FoldResult {
            fold: fold_index,
            test_subject: fold.test_subject,
            val_subjects: val,
            status: FoldStatus::Diverged,
            diagnostic: Some(msg),
            best_epoch: 0,
            test: None,
            final_thetas,
            model: None,
        },
        (None, Some((_, epoch, kept))) => {
            let test = evaluate(&kept, dataset, &test_idx, run.batch_size)?.metrics;
            FoldResult {
                fold: fold_index,
                test_subject: fold.test_subject,
                val_subjects: val,
                status: FoldStatus::Completed,
                diagnostic: None,
                best_epoch: epoch,
                test: Some(test),
                final_thetas,
                model: Some(kept),
            }
        }
        (None, None) => unreachable!("at least one epoch runs"),
    };
    Ok((result, records))
}

/// Runs every selected LOSO fold, `jobs` at a time, and merges results in
/// fold order.
pub fn train(run: &RunConfig, dataset: &Dataset, jobs: usize) -> Result<TrainReport> {
    run.validate()?;
    if dataset.spec != run.data {
        return Err(Error::invalid(
            "dataset was generated from a different data spec",
        ));
    }
    let all = loso_folds(dataset)?;
    let selected: Vec<(usize, Fold)> = all
        .into_iter()
        .enumerate()
        .filter(|(_, f)| run.folds.is_empty() || run.folds.contains(&f.test_subject))
        .collect();

    let mut results: Vec<Result<(FoldResult, Vec<MetricsRecord>)>> =
        Vec::with_capacity(selected.len());
    for group in selected.chunks(jobs.max(1)) {
        if group.len() == 1 {
            results.push(train_fold(run, dataset, group[0].0, &group[0].1));
            continue;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = group
                .iter()
                .map(|(i, f)| s.spawn(move || train_fold(run, dataset, *i, f)))
                .collect();
            for h in handles {
                results.push(
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Graph("fold worker panicked".into()))),
                );
            }
        });
    }

    let mut records = Vec::new();
    let mut folds = Vec::new();
    for r in results {
        let (f, rec) = r?;
        records.extend(rec);
        folds.push(f);
    }
    let summary = summarize(run, &folds);
    Ok(TrainReport {
        records,
        folds,
        summary,
    })
}

fn summarize(run: &RunConfig, folds: &[FoldResult]) -> RunSummary {
    let done: Vec<&Classification> = folds.iter().filter_map(|f| f.test.as_ref()).collect();
    let (correct, total) = done
        .iter()
        .fold((0, 0), |(c, t), m| (c + m.correct, t + m.total));
    let accs: Vec<f64> = done.iter().map(|m| m.accuracy).collect();
    let f1s: Vec<f64> = done.iter().map(|m| m.macro_f1).collect();
    let finals: Vec<Vec<f64>> = folds
        .iter()
        .filter(|f| f.status == FoldStatus::Completed)
        .map(|f| f.final_thetas.clone())
        .collect();
    RunSummary {
        variant: run.model.variant,
        seed: run.seed,
        overall_accuracy: if total > 0 {
            correct as f64 / total as f64
        } else {
            f64::NAN
        },
        mean_fold_accuracy: mean_std(&accs).0,
        mean_fold_macro_f1: mean_std(&f1s).0,
        completed_folds: done.len(),
        diverged_folds: folds.len() - done.len(),
        theta: theta_summary(&finals),
    }
}

/// Writes `metrics.csv`, `summary.json` and one checkpoint per completed fold.
pub fn write_report(report: &TrainReport, dir: &Path) -> Result<()> {
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("metrics.csv", metrics_csv(&report.records))?;
    let summary = serde_json::json!({
        "summary": report.summary,
        "folds": report.folds,
    });
    write(
        "summary.json",
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    let ckpt = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    for f in &report.folds {
        if let Some(m) = &f.model {
            m.save(&ckpt.join(format!("fold_{:02}.fslt", f.fold)))?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub theta: f64,
    pub mean_acc: f64,
    pub mean_f1: f64,
}

/// Trains θ-frozen models at every grid value, averaging LOSO accuracy
/// over `seeds`.
pub fn sweep_theta(
    run: &RunConfig,
    dataset: &Dataset,
    grid: &[f64],
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::invalid("sweep needs at least one seed"));
    }
    grid.iter()
        .map(|&theta| {
            if !(theta > 0.0 && theta < std::f64::consts::PI) {
                return Err(Error::invalid(format!(
                    "grid value {theta} outside (0, pi)"
                )));
            }
            let (mut accs, mut f1s) = (Vec::new(), Vec::new());
            for &seed in seeds {
                let mut r = run.clone();
                r.seed = seed;
                r.model.variant = Variant::D;
                r.model.frozen_theta = theta;
                let rep = train(&r, dataset, jobs)?;
                accs.push(rep.summary.mean_fold_accuracy);
                f1s.push(rep.summary.mean_fold_macro_f1);
            }
            Ok(SweepRow {
                theta,
                mean_acc: mean_std(&accs).0,
                mean_f1: mean_std(&f1s).0,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("theta,mean_acc,mean_f1\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.theta, r.mean_acc, r.mean_f1);
    }
    out
}
