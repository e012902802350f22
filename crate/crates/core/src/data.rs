//! Datasets, IDX ingestion, synthetic generators and shard-tagged batching.

use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, Record, RecordKind};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, permutation, seeded};
use crate::tensor::{Scalar, Tensor};

pub const IDX_IMAGE_MAGIC: u32 = 2051;
pub const IDX_LABEL_MAGIC: u32 = 2049;

/// Images `(N, C, H, W)` in `[0, 1]` with labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: impl Into<String>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Invalid(format!(
                "images must be (N, C, H, W), got {:?}",
                images.shape()
            )));
        }
        if images.batch() != labels.len() {
            return Err(Error::Invalid(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Invalid(format!("label {l} outside [0, {classes})")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("pixel values outside [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `(C, H, W)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.images.select_rows(rows)?,
            rows.iter().map(|&r| self.labels[r]).collect(),
            self.classes,
            self.split.clone(),
        )
    }

    /// Rows `[start, end)` as a tensor of precision `T`, with labels.
    pub fn slice<T: Scalar>(&self, start: usize, end: usize) -> Result<(Tensor<T>, Vec<usize>)> {
        let rows: Vec<usize> = (start..end.min(self.len())).collect();
        Ok((self.images.select_rows(&rows)?.cast(), self.labels[start..end.min(self.len())].to_vec()))
    }

    pub fn to_container(&self) -> Container<f32> {
        Container {
            header: serde_json::json!({ "classes": self.classes, "split": self.split }),
            records: vec![
                Record {
                    name: "images".into(),
                    kind: RecordKind::Data,
                    shape: self.images.shape().to_vec(),
                    values: self.images.data().to_vec(),
                },
                Record {
                    name: "labels".into(),
                    kind: RecordKind::Data,
                    shape: vec![self.len()],
                    values: self.labels.iter().map(|&l| l as f32).collect(),
                },
            ],
        }
    }

    pub fn from_container(c: &Container<f32>) -> Result<Self> {
        let classes = c.header["classes"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("dataset header lacks `classes`".into()))? as usize;
        let split = c.header["split"].as_str().unwrap_or("").to_string();
        let img = c.get("images")?;
        let labels = c.get("labels")?.values.iter().map(|&v| v as usize).collect();
        Dataset::new(Tensor::new(&img.shape, img.values.clone())?, labels, classes, split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Idx(format!("{what}: truncated header")))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

/// Parses an IDX image file (`magic 2051`, dims N, H, W) into `(N, 1, H, W)`
/// values in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let magic = be_u32(bytes, 0, "image file")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Idx(format!(
            "image file has magic {magic}, expected {IDX_IMAGE_MAGIC}"
        )));
    }
    let n = be_u32(bytes, 4, "image file")? as usize;
    let h = be_u32(bytes, 8, "image file")? as usize;
    let w = be_u32(bytes, 12, "image file")? as usize;
    let body = &bytes[16..];
    let need = n * h * w;
    if body.len() < need {
        return Err(Error::Idx(format!(
            "image file truncated: {} of {need} pixel bytes",
            body.len()
        )));
    }
    Tensor::new(&[n, 1, h, w], body[..need].iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "label file")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Idx(format!(
            "label file has magic {magic}, expected {IDX_LABEL_MAGIC}"
        )));
    }
    let n = be_u32(bytes, 4, "label file")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Idx(format!("label file truncated: {} of {n} labels", body.len())));
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label file pair. `classes` is one past the largest label.
pub fn load_idx(images: &Path, labels: &Path, split: &str) -> Result<Dataset> {
    let x = parse_idx_images(&read_all(images)?)?;
    let y = parse_idx_labels(&read_all(labels)?)?;
    if x.batch() != y.len() {
        return Err(Error::Idx(format!(
            "{} images but {} labels",
            x.batch(),
            y.len()
        )));
    }
    let classes = y.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(x, y, classes, split)
}

/// Balanced labels `i mod classes`, shuffled.
fn balanced_labels(n: usize, classes: usize, seed: u64) -> Vec<usize> {
    permutation(n, seed).into_iter().map(|i| i % classes).collect()
}

fn clip01(v: f64) -> f32 {
    v.clamp(0.0, 1.0) as f32
}

/// Class-conditional Gaussian images: pixel `= 0.5 + separation·μ_c + 0.1·z`,
/// with `μ_c ~ N(0, 0.15²)` per pixel, clipped to `[0, 1]`.
pub fn synth_blobs(
    n: usize,
    classes: usize,
    shape: (usize, usize, usize),
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n < classes || classes < 2 {
        return Err(Error::Invalid(format!("{n} examples for {classes} classes")));
    }
    let (c, h, w) = shape;
    let d = c * h * w;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|k| Tensor::<f64>::randn(&[d], 0.15, derive_path3(seed, 1, k)).into_data())
        .collect();
    let labels = balanced_labels(n, classes, derive_seed(seed, 2));
    let mut data = Vec::with_capacity(n * d);
    for (i, &y) in labels.iter().enumerate() {
        let mut rng = seeded(derive_path3(seed, 3, i));
        for &m in &means[y] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(clip01(0.5 + separation * m + 0.1 * z));
        }
    }
    Dataset::new(Tensor::new(&[n, c, h, w], data)?, labels, classes, "synth_blobs")
}

fn derive_path3(seed: u64, a: u64, b: usize) -> u64 {
    derive_seed(derive_seed(seed, a), b as u64)
}

/// Parameters of the two-feature pattern generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatternParams {
    /// Amplitude of the class-specific low-frequency shape.
    pub shape_amplitude: f64,
    /// Amplitude of the class-specific high-frequency texture.
    pub texture_amplitude: f64,
    /// Amplitude of the class-independent low-frequency background.
    pub clutter_amplitude: f64,
    /// Per-pixel Gaussian noise.
    pub pixel_noise: f64,
}

impl Default for PatternParams {
    fn default() -> Self {
        Self {
            shape_amplitude: 0.12,
            texture_amplitude: 0.04,
            clutter_amplitude: 0.12,
            pixel_noise: 0.05,
        }
    }
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
}

impl Wave {
    fn at(&self, y: usize, x: usize, h: usize, w: usize) -> f64 {
        (2.0 * PI * (self.fx * x as f64 / w as f64 + self.fy * y as f64 / h as f64) + self.phase).cos()
    }
}

fn random_wave(rng: &mut crate::rng::Rng, lo: u32, hi: u32) -> Wave {
    loop {
        let fx = rng.random_range(0..=hi) as f64;
        let fy = rng.random_range(0..=hi) as f64;
        if fx.max(fy) >= lo as f64 {
            return Wave {
                fx,
                fy,
                phase: rng.random_range(0.0..2.0 * PI),
            };
        }
    }
}

/// Images combining a class shape (low spatial frequency, amplitude
/// `shape_amplitude`), a class texture (high spatial frequency, amplitude
/// `texture_amplitude`), a random low-frequency background per image and
/// pixel noise. The texture alone identifies the class but is erased by
/// blur and masked by noise; the shape survives both.
pub fn synth_patterns(
    n: usize,
    classes: usize,
    shape: (usize, usize, usize),
    params: &PatternParams,
    seed: u64,
) -> Result<Dataset> {
    if n < classes || classes < 2 {
        return Err(Error::Invalid(format!("{n} examples for {classes} classes")));
    }
    let (c, h, w) = shape;
    let hf_lo = (h.min(w) as u32 / 4).max(2);
    let hf_hi = (h.min(w) as u32 / 2).max(hf_lo);
    let mut proto_rng = seeded(derive_seed(seed, 1));
    let shapes: Vec<[Wave; 2]> = (0..classes)
        .map(|_| [random_wave(&mut proto_rng, 1, 2), random_wave(&mut proto_rng, 1, 2)])
        .collect();
    let textures: Vec<Wave> = (0..classes)
        .map(|_| random_wave(&mut proto_rng, hf_lo, hf_hi))
        .collect();
    let labels = balanced_labels(n, classes, derive_seed(seed, 2));
    let mut data = Vec::with_capacity(n * c * h * w);
    for (i, &y) in labels.iter().enumerate() {
        let mut rng = seeded(derive_path3(seed, 3, i));
        let clutter = [random_wave(&mut rng, 1, 2), random_wave(&mut rng, 1, 2)];
        let gain = rng.random_range(0.7..1.3);
        for _ in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let s = (shapes[y][0].at(yy, xx, h, w) + shapes[y][1].at(yy, xx, h, w)) / 2.0;
                    let b = (clutter[0].at(yy, xx, h, w) + clutter[1].at(yy, xx, h, w)) / 2.0;
                    let t = textures[y].at(yy, xx, h, w);
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(clip01(
                        0.5 + gain * params.shape_amplitude * s
                            + params.clutter_amplitude * b
                            + params.texture_amplitude * t
                            + params.pixel_noise * z,
                    ));
                }
            }
        }
    }
    Dataset::new(Tensor::new(&[n, c, h, w], data)?, labels, classes, "synth_patterns")
}

/// One mini-batch; `shards[i]` is the shard of row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub shards: Vec<usize>,
}

impl Batch {
    pub fn load<T: Scalar>(&self, data: &Dataset) -> Result<(Tensor<T>, Vec<usize>)> {
        Ok((
            data.images.select_rows(&self.indices)?.cast(),
            self.indices.iter().map(|&i| data.labels[i]).collect(),
        ))
    }
}

/// Seed-shuffled batches of `total_batch` rows split into `shards` equal
/// consecutive shards. A short final batch is dropped when `drop_last`.
pub fn batch_iter(
    n: usize,
    total_batch: usize,
    shards: usize,
    seed: u64,
    drop_last: bool,
) -> Result<impl Iterator<Item = Batch>> {
    if total_batch == 0 || shards == 0 || total_batch % shards != 0 {
        return Err(Error::config(
            "batch_size",
            format!("batch of {total_batch} cannot be split into {shards} equal shards"),
        ));
    }
    let order = permutation(n, seed);
    let per = total_batch / shards;
    let count = if drop_last {
        n / total_batch
    } else {
        n.div_ceil(total_batch)
    };
    Ok((0..count).map(move |b| {
        let indices = order[b * total_batch..((b + 1) * total_batch).min(n)].to_vec();
        let shards = (0..indices.len()).map(|i| i / per).collect();
        Batch { indices, shards }
    }))
}
