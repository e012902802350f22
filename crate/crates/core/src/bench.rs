//! Corruption-robustness suite: five corruption types at three severities,
//! applied at evaluation time only.
//!
//! | type           | parameter             | severity 1 | 2    | 3    |
//! |----------------|-----------------------|-----------:|-----:|-----:|
//! | gaussian-noise | noise σ               | 0.04       | 0.08 | 0.12 |
//! | impulse-noise  | salt/pepper fraction  | 0.01       | 0.03 | 0.05 |
//! | gaussian-blur  | kernel σ (pixels)     | 0.5        | 1.0  | 1.5  |
//! | contrast       | contrast factor       | 0.6        | 0.4  | 0.25 |
//! | brightness     | additive shift        | 0.1        | 0.2  | 0.3  |
//!
//! Severity 0 is the identity for every type.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::rng::{derive_path, seeded};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionType {
    GaussianNoise,
    ImpulseNoise,
    GaussianBlur,
    Contrast,
    Brightness,
}

impl CorruptionType {
    pub const ALL: [CorruptionType; 5] = [
        CorruptionType::GaussianNoise,
        CorruptionType::ImpulseNoise,
        CorruptionType::GaussianBlur,
        CorruptionType::Contrast,
        CorruptionType::Brightness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionType::GaussianNoise => "gaussian-noise",
            CorruptionType::ImpulseNoise => "impulse-noise",
            CorruptionType::GaussianBlur => "gaussian-blur",
            CorruptionType::Contrast => "contrast",
            CorruptionType::Brightness => "brightness",
        }
    }

    fn code(self) -> u64 {
        self as u64
    }

    /// Severity parameter; severity 0 maps to the identity value.
    pub fn magnitude(self, severity: u8) -> Result<f64> {
        let table = match self {
            CorruptionType::GaussianNoise => [0.0, 0.04, 0.08, 0.12],
            CorruptionType::ImpulseNoise => [0.0, 0.01, 0.03, 0.05],
            CorruptionType::GaussianBlur => [0.0, 0.5, 1.0, 1.5],
            CorruptionType::Contrast => [1.0, 0.6, 0.4, 0.25],
            CorruptionType::Brightness => [0.0, 0.1, 0.2, 0.3],
        };
        table
            .get(severity as usize)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("severity {severity} outside 0..=3")))
    }
}

impl fmt::Display for CorruptionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown corruption type `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionType,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionType, severity: u8, seed: u64) -> Result<Self> {
        kind.magnitude(severity)?;
        Ok(Self { kind, severity, seed })
    }
}

/// All 15 (type, severity ≥ 1) specs sharing one seed.
pub fn standard_suite(seed: u64) -> Vec<CorruptionSpec> {
    CorruptionType::ALL
        .into_iter()
        .flat_map(|kind| (1..=3).map(move |severity| CorruptionSpec { kind, severity, seed }))
        .collect()
}

/// Corrupts one `(C, H, W)` image. `index` selects the image's noise stream.
pub fn corrupt(image: &[f32], shape: (usize, usize, usize), spec: &CorruptionSpec, index: u64) -> Result<Vec<f32>> {
    let (c, h, w) = shape;
    if image.len() != c * h * w {
        return Err(Error::Invalid(format!(
            "image has {} values, shape {shape:?}",
            image.len()
        )));
    }
    let m = spec.kind.magnitude(spec.severity)?;
    if spec.severity == 0 {
        return Ok(image.to_vec());
    }
    let mut rng = seeded(derive_path(spec.seed, &[spec.kind.code(), spec.severity as u64, index]));
    let px = |v: f64| v.clamp(0.0, 1.0) as f32;
    let out = match spec.kind {
        CorruptionType::GaussianNoise => image
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                px(v as f64 + m * z)
            })
            .collect(),
        CorruptionType::ImpulseNoise => image
            .iter()
            .map(|&v| {
                if rng.random_bool(m) {
                    if rng.random_bool(0.5) {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            })
            .collect(),
        CorruptionType::GaussianBlur => gaussian_blur(image, shape, m),
        CorruptionType::Contrast => {
            let plane = h * w;
            let mut out = Vec::with_capacity(image.len());
            for ch in image.chunks(plane) {
                let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
                out.extend(ch.iter().map(|&v| px((v as f64 - mean) * m + mean)));
            }
            out
        }
        CorruptionType::Brightness => image.iter().map(|&v| px(v as f64 + m)).collect(),
    };
    Ok(out)
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_blur(image: &[f32], (c, h, w): (usize, usize, usize), sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0f32; image.len()];
    let mut tmp = vec![0f64; h * w];
    for ch in 0..c {
        let src = &image[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * src[y * w + clamp(x as isize + j as isize - r, w)] as f64)
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp[clamp(y as isize + j as isize - r, h) * w + x])
                    .sum();
                out[ch * h * w + y * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// The whole dataset under one corruption.
pub fn corrupt_dataset(data: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    let shape = data.image_shape();
    let d = shape.0 * shape.1 * shape.2;
    let mut out = Vec::with_capacity(data.len() * d);
    for (i, img) in data.images().data().chunks(d).enumerate() {
        out.extend(corrupt(img, shape, spec, i as u64)?);
    }
    Dataset::new(
        Tensor::new(data.images().shape(), out)?,
        data.labels().to_vec(),
        data.classes(),
        format!("{}/{}-{}", data.split, spec.kind, spec.severity),
    )
}

/// Top-1 accuracy under inference (Main branch, running statistics).
pub fn evaluate_accuracy<T: Scalar>(net: &Network<T>, data: &Dataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(batch.max(1)) {
        let (x, y) = data.slice::<T>(start, start + batch)?;
        correct += net
            .predict(&x)?
            .iter()
            .zip(&y)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecResult {
    pub kind: CorruptionType,
    pub severity: u8,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub per_spec: Vec<SpecResult>,
    /// Mean error over severities, per type.
    pub per_type: BTreeMap<CorruptionType, f64>,
    /// Mean error over every spec.
    pub mean_error: f64,
    pub mean_accuracy: f64,
    /// Mean over types of `per_type / reference`, ×100. `None` without a reference.
    pub normalized_score: Option<f64>,
    pub warning: Option<String>,
}

/// Evaluates `net` under every spec. Specs run on parallel threads; the
/// result does not depend on scheduling.
pub fn corruption_suite_eval<T: Scalar>(
    net: &Network<T>,
    data: &Dataset,
    specs: &[CorruptionSpec],
    reference_errors: Option<&BTreeMap<CorruptionType, f64>>,
    batch: usize,
) -> Result<SuiteReport> {
    if specs.is_empty() {
        return Err(Error::Invalid("no corruption specs".into()));
    }
    let errors: Vec<Result<f64>> = std::thread::scope(|s| {
        let handles: Vec<_> = specs
            .iter()
            .map(|spec| {
                s.spawn(move || {
                    let corrupted = corrupt_dataset(data, spec)?;
                    Ok(1.0 - evaluate_accuracy(net, &corrupted, batch)?)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });
    let mut per_spec = Vec::with_capacity(specs.len());
    let mut sums: BTreeMap<CorruptionType, (f64, usize)> = BTreeMap::new();
    for (spec, e) in specs.iter().zip(errors) {
        let e = e?;
        per_spec.push(SpecResult {
            kind: spec.kind,
            severity: spec.severity,
            error: e,
        });
        let s = sums.entry(spec.kind).or_default();
        s.0 += e;
        s.1 += 1;
    }
    let per_type: BTreeMap<CorruptionType, f64> =
        sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    let mean_error = per_spec.iter().map(|r| r.error).sum::<f64>() / per_spec.len() as f64;
    let (normalized_score, warning) = match reference_errors {
        Some(reference) => {
            let mut ratios = Vec::with_capacity(per_type.len());
            for (kind, e) in &per_type {
                let r = reference
                    .get(kind)
                    .ok_or_else(|| Error::Invalid(format!("reference lacks `{kind}`")))?;
                ratios.push(if e == r { 1.0 } else { e / r });
            }
            (Some(100.0 * ratios.iter().sum::<f64>() / ratios.len() as f64), None)
        }
        None => (
            None,
            Some("no reference errors given; reporting unnormalized mean error".to_string()),
        ),
    };
    Ok(SuiteReport {
        per_spec,
        per_type,
        mean_error,
        mean_accuracy: 1.0 - mean_error,
        normalized_score,
        warning,
    })
}
