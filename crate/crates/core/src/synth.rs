//! Synthetic onset/apex pairs with a controllable dominant motion axis.
//!
//! Each subject has a fixed smooth texture and a slightly individual layout
//! of three facial features: two brows and a mouth, drawn as anisotropic
//! Gaussian bumps elongated along the motion axis, so that most of a
//! feature's displacement signal lies on lines parallel to it. A sample's class moves
//! the upper and/or lower features along the class axis; every sample also
//! gets a subject-phased shear along the orthogonal axis. The whole layout,
//! motion and shear included, is rotated by `motion_axis` about the centre.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AU_LENGTH;
use crate::snapshot::Snapshot;
use crate::tensor::Tensor;

/// Feature extent across and along the motion axis, as fractions of the image size.
const FEATURE_WIDTH: f64 = 0.03;
const FEATURE_LENGTH: f64 = 0.12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_subjects: usize,
    pub samples_per_subject: usize,
    pub num_classes: usize,
    pub image_size: usize,
    /// Rotation of the class axis away from vertical, radians.
    pub motion_axis: f64,
    /// Peak class displacement, pixels.
    pub motion_amplitude: f64,
    /// Peak orthogonal shear displacement, pixels.
    pub distractor_amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_subjects: 8,
            samples_per_subject: 30,
            num_classes: 4,
            image_size: 64,
            motion_axis: 0.0,
            motion_amplitude: 1.5,
            distractor_amplitude: 0.75,
            noise_std: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Region {
    Upper,
    Lower,
}

/// `(region, moves toward the top of the face, AU bit)`
type Movement = (Region, bool, usize);

const TEMPLATES: [&[Movement]; 8] = [
    &[(Region::Upper, true, 1)],
    &[(Region::Upper, false, 3)],
    &[(Region::Lower, false, 15)],
    &[(Region::Lower, true, 12)],
    &[(Region::Upper, true, 1), (Region::Lower, true, 12)],
    &[(Region::Upper, false, 3), (Region::Lower, false, 15)],
    &[(Region::Upper, true, 1), (Region::Lower, false, 15)],
    &[(Region::Upper, false, 3), (Region::Lower, true, 12)],
];

pub const MAX_CLASSES: usize = TEMPLATES.len();

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > MAX_CLASSES {
            return Err(Error::config(
                "data.num_classes",
                format!(
                    "must be in 2..={MAX_CLASSES} (defined class templates), got {}",
                    self.num_classes
                ),
            ));
        }
        if self.num_subjects < 1 || self.samples_per_subject < 1 {
            return Err(Error::config(
                "data",
                "need at least one subject and one sample per subject",
            ));
        }
        if self.image_size < 8 {
            return Err(Error::config("data.image_size", "must be at least 8"));
        }
        for (k, v) in [
            ("data.motion_amplitude", self.motion_amplitude),
            ("data.distractor_amplitude", self.distractor_amplitude),
            ("data.noise_std", self.noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(
                    k,
                    format!("must be finite and nonnegative, got {v}"),
                ));
            }
        }
        if !self.motion_axis.is_finite() {
            return Err(Error::config("data.motion_axis", "must be finite"));
        }
        Ok(())
    }
}

/// AU bits of a class, a function of the label alone.
pub fn au_bits_for(label: usize) -> Vec<u8> {
    let mut bits = vec![0u8; AU_LENGTH];
    for &(_, _, bit) in TEMPLATES[label] {
        bits[bit] = 1;
    }
    bits
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub onset: Tensor,
    pub apex: Tensor,
    pub difference: Tensor,
    pub au_bits: Vec<u8>,
    pub label: usize,
    pub subject: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<SyntheticSample>,
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the packed triple
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Feature geometry in face coordinates: `u` across, `v` along the class
/// axis (downwards at zero rotation), both in pixels from the centre.
#[derive(Clone, Debug)]
struct Feature {
    u: f64,
    v: f64,
    /// spread across / along the motion axis
    su: f64,
    sv: f64,
    amp: f64,
    region: Region,
}

struct Subject {
    /// noiseless onset frame
    onset: Vec<f64>,
    features: Vec<Feature>,
    phase: f64,
}

struct Frame {
    axis: (f64, f64),
    across: (f64, f64),
    centre: f64,
}

impl Frame {
    fn new(n: usize, rho: f64) -> Self {
        Frame {
            axis: (rho.sin(), rho.cos()),
            across: (rho.cos(), -rho.sin()),
            centre: (n as f64 - 1.0) / 2.0,
        }
    }

    /// `(u, v)` of image point `(x, y)`.
    fn to_face(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.centre, y - self.centre);
        (
            dx * self.across.0 + dy * self.across.1,
            dx * self.axis.0 + dy * self.axis.1,
        )
    }
}

fn make_subject(spec: &DatasetSpec, frame: &Frame, subject: usize) -> Subject {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, subject as u64, u64::MAX));
    let n = spec.image_size;
    let nf = n as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.0..nf),
                rng.random_range(0.0..nf),
                rng.random_range(nf / 10.0..nf / 4.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let mut texture: Vec<f64> = (0..n * n)
        .map(|p| {
            let (x, y) = ((p % n) as f64, (p / n) as f64);
            blobs
                .iter()
                .map(|&(bx, by, s, a)| {
                    a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * s * s)).exp()
                })
                .sum()
        })
        .collect();
    let (lo, hi) = texture
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &t| {
            (l.min(t), h.max(t))
        });
    let span = (hi - lo).max(1e-12);
    for t in &mut texture {
        *t = 0.35 + 0.2 * (*t - lo) / span;
    }

    let mut jit = |scale: f64| rng.random_range(-scale..=scale) * nf;
    let brow_v = -0.2 * nf + jit(0.02);
    let brow_u = 0.2 * nf + jit(0.02);
    let mouth_v = 0.22 * nf + jit(0.02);
    let features = vec![
        Feature {
            u: -brow_u,
            v: brow_v,
            su: FEATURE_WIDTH * nf,
            sv: FEATURE_LENGTH * nf,
            amp: 0.35,
            region: Region::Upper,
        },
        Feature {
            u: brow_u,
            v: brow_v,
            su: FEATURE_WIDTH * nf,
            sv: FEATURE_LENGTH * nf,
            amp: 0.35,
            region: Region::Upper,
        },
        Feature {
            u: jit(0.02),
            v: mouth_v,
            su: FEATURE_WIDTH * nf,
            sv: FEATURE_LENGTH * nf,
            amp: 0.3,
            region: Region::Lower,
        },
    ];
    let phase = rng.random_range(0.0..2.0 * PI);
    let mut onset = texture;
    for (p, px) in onset.iter_mut().enumerate() {
        let (u, v) = frame.to_face((p % n) as f64, (p / n) as f64);
        for f in &features {
            let (du, dv) = (u - f.u, v - f.v);
            *px -=
                f.amp * (-(du * du) / (2.0 * f.su * f.su) - (dv * dv) / (2.0 * f.sv * f.sv)).exp();
        }
    }
    Subject {
        onset,
        features,
        phase,
    }
}

fn bilinear(img: &[f64], n: usize, x: f64, y: f64) -> f64 {
    let max = (n - 1) as f64;
    let (x, y) = (x.clamp(0.0, max), y.clamp(0.0, max));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(n - 1), (y0 + 1).min(n - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = img[y0 * n + x0] * (1.0 - fx) + img[y0 * n + x1] * fx;
    let bot = img[y1 * n + x0] * (1.0 - fx) + img[y1 * n + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

fn render(
    spec: &DatasetSpec,
    frame: &Frame,
    subj: &Subject,
    subject: usize,
    index: usize,
) -> SyntheticSample {
    let n = spec.image_size;
    let nf = n as f64;
    let label = index % spec.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, subject as u64, index as u64));
    let amp = spec.motion_amplitude * rng.random_range(0.8..1.2);
    let shear = spec.distractor_amplitude * rng.random_range(0.8..1.2);
    let phase = subj.phase + rng.random_range(-0.5..0.5);
    let wavelength = 0.5 * nf;
    let window = 0.12 * nf;

    let moves = TEMPLATES[label];
    let mut apex = vec![0.0; n * n];
    for (p, a) in apex.iter_mut().enumerate() {
        let (x, y) = ((p % n) as f64, (p / n) as f64);
        let (u, v) = frame.to_face(x, y);
        let mut dv = 0.0;
        for &(region, up, _) in moves {
            let sign = if up { -1.0 } else { 1.0 };
            for f in subj.features.iter().filter(|f| f.region == region) {
                let r2 = (u - f.u).powi(2) + (v - f.v).powi(2);
                dv += sign * amp * (-r2 / (2.0 * window * window)).exp();
            }
        }
        let du = shear * (2.0 * PI * v / wavelength + phase).sin();
        let dx = du * frame.across.0 + dv * frame.axis.0;
        let dy = du * frame.across.1 + dv * frame.axis.1;
        *a = bilinear(&subj.onset, n, x - dx, y - dy);
    }

    let noise = Normal::new(0.0, spec.noise_std).expect("finite noise std");
    let mut finish = |img: Vec<f64>| -> Tensor {
        let data = img
            .into_iter()
            .map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0))
            .collect();
        Tensor::new([1, n, n], data).expect("square frame")
    };
    let onset = finish(subj.onset.clone());
    let apex = finish(apex);
    let difference = apex.sub(&onset).expect("same frame shape");
    SyntheticSample {
        onset,
        apex,
        difference,
        au_bits: au_bits_for(label),
        label,
        subject,
    }
}

/// Generates every subject's samples in subject order. Each sample draws
/// from its own stream seeded by `(seed, subject, index)`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let frame = Frame::new(spec.image_size, spec.motion_axis);
    let mut samples = Vec::with_capacity(spec.num_subjects * spec.samples_per_subject);
    for s in 0..spec.num_subjects {
        let subj = make_subject(spec, &frame, s);
        for i in 0..spec.samples_per_subject {
            samples.push(render(spec, &frame, &subj, s, i));
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub test_subject: usize,
    pub train_subjects: Vec<usize>,
}

/// One fold per subject, in subject order.
pub fn loso_folds(dataset: &Dataset) -> Result<Vec<Fold>> {
    let subjects = dataset.subjects();
    if subjects.len() < 2 {
        return Err(Error::invalid(
            "leave-one-subject-out needs at least two subjects",
        ));
    }
    Ok(subjects
        .iter()
        .map(|&t| Fold {
            test_subject: t,
            train_subjects: subjects.iter().copied().filter(|&s| s != t).collect(),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub subject: usize,
    pub label: usize,
    pub au: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    /// Snapshot file per subject, relative to the manifest.
    pub files: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Dataset {
    /// Distinct subject ids in ascending order.
    pub fn subjects(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.samples.iter().map(|x| x.subject).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn indices_of(&self, subjects: &[usize]) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| subjects.contains(&self.samples[i].subject))
            .collect()
    }

    /// Difference frames `[B,1,H,W]`, AU bits `[B,21]` and labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let n = self.spec.image_size;
        let mut x = Vec::with_capacity(indices.len() * n * n);
        let mut au = Vec::with_capacity(indices.len() * AU_LENGTH);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            x.extend_from_slice(s.difference.data());
            au.extend(s.au_bits.iter().map(|&b| b as f64));
            labels.push(s.label);
        }
        Ok((
            Tensor::new([indices.len(), 1, n, n], x)?,
            Tensor::new([indices.len(), AU_LENGTH], au)?,
            labels,
        ))
    }

    /// Writes one snapshot per subject (onset and apex stacks) and a JSON
    /// manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let n = self.spec.image_size;
        let mut files = Vec::new();
        for s in self.subjects() {
            let idx = self.indices_of(&[s]);
            let stack = |f: fn(&SyntheticSample) -> &Tensor| -> Result<Tensor> {
                let mut d = Vec::with_capacity(idx.len() * n * n);
                for &i in &idx {
                    d.extend_from_slice(f(&self.samples[i]).data());
                }
                Tensor::new([idx.len(), 1, n, n], d)
            };
            let mut snap = Snapshot::new();
            snap.push("onset", stack(|x| &x.onset)?);
            snap.push("apex", stack(|x| &x.apex)?);
            let name = format!("subject_{s:03}.fslt");
            snap.save(&dir.join(&name))?;
            files.push(name);
        }
        let manifest = DatasetManifest {
            spec: self.spec.clone(),
            files,
            samples: self
                .samples
                .iter()
                .map(|x| SampleRecord {
                    subject: x.subject,
                    label: x.label,
                    au: x.au_bits.clone(),
                })
                .collect(),
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = parse_manifest(&text)?;
        let n = manifest.spec.image_size;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        let mut records = manifest.samples.iter();
        for file in &manifest.files {
            if file.contains('/') || file.contains('\\') || file.starts_with('.') {
                return Err(Error::invalid(format!(
                    "manifest names a file outside the dataset: {file}"
                )));
            }
            let snap = Snapshot::load(&dir.join(file))?;
            let get = |k: &str| {
                snap.get(k)
                    .ok_or_else(|| Error::Snapshot(format!("{file}: missing `{k}`")))
            };
            let (onset, apex) = (get("onset")?, get("apex")?);
            let shape = onset.shape();
            if shape.len() != 4 || shape[1..] != [1, n, n] || apex.shape() != shape {
                return Err(Error::Snapshot(format!(
                    "{file}: frames {shape:?} are not [B,1,{n},{n}]"
                )));
            }
            for b in 0..shape[0] {
                let rec = records.next().ok_or_else(|| {
                    Error::invalid("manifest lists fewer samples than the snapshots hold")
                })?;
                let slice = |t: &Tensor| {
                    Tensor::new([1, n, n], t.data()[b * n * n..(b + 1) * n * n].to_vec())
                };
                let (o, a) = (slice(onset)?, slice(apex)?);
                let difference = a.sub(&o)?;
                samples.push(SyntheticSample {
                    onset: o,
                    apex: a,
                    difference,
                    au_bits: rec.au.clone(),
                    label: rec.label,
                    subject: rec.subject,
                });
            }
        }
        if records.next().is_some() {
            return Err(Error::invalid(
                "manifest lists more samples than the snapshots hold",
            ));
        }
        Ok(Dataset {
            spec: manifest.spec,
            samples,
        })
    }
}

/// Parses and checks a dataset manifest.
pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let m: DatasetManifest = serde_json::from_str(text)?;
    m.spec.validate()?;
    for (i, r) in m.samples.iter().enumerate() {
        if r.label >= m.spec.num_classes {
            return Err(Error::invalid(format!(
                "sample {i}: label {} out of range",
                r.label
            )));
        }
        if r.au.len() != AU_LENGTH || r.au.iter().any(|&b| b > 1) {
            return Err(Error::invalid(format!(
                "sample {i}: AU vector must be {AU_LENGTH} bits"
            )));
        }
    }
    Ok(m)
}
