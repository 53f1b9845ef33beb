//! Datasets: built-in synthetic generators and precomputed feature files.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PqkError, Result};
use crate::format;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Tensor,
    labels: Vec<usize>,
    split: Split,
}

impl Dataset {
    pub fn new(examples: Tensor, labels: Vec<usize>, split: Split) -> Result<Self> {
        if examples.rank() < 2 {
            return Err(PqkError::Data(format!(
                "examples need shape [N, ...], got {:?}",
                examples.shape()
            )));
        }
        if examples.shape()[0] != labels.len() {
            return Err(PqkError::Data(format!(
                "{} examples but {} labels",
                examples.shape()[0],
                labels.len()
            )));
        }
        Ok(Dataset {
            examples,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn examples(&self) -> &Tensor {
        &self.examples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Per-example feature shape.
    pub fn feature_shape(&self) -> &[usize] {
        &self.examples.shape()[1..]
    }

    /// Fails unless every label is below `classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= classes) {
            Some(l) => Err(PqkError::Data(format!(
                "label {l} in the {} split is outside [0, {classes})",
                self.split.label()
            ))),
            None => Ok(()),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let x = self.examples.select_rows(indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    /// Mini-batch index lists for one epoch. The order depends only on
    /// `(seed, stream, epoch)`; the last batch may be short.
    pub fn epoch_batches(&self, batch_size: usize, seed: u64, stream: u32, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((stream as u64) << 32) | epoch as u64);
        order.shuffle(&mut rng);
        order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticTask {
    /// Two interleaved 2-D spirals.
    TwoSpirals,
    /// Isotropic Gaussian clusters around fixed centres.
    GaussianBlobs,
    /// `[1, 16, 16]` images holding an oriented grating patch at a random place.
    PatchTextures,
}

impl SyntheticTask {
    fn default_classes(self) -> usize {
        match self {
            SyntheticTask::TwoSpirals => 2,
            SyntheticTask::GaussianBlobs => 4,
            SyntheticTask::PatchTextures => 8,
        }
    }

    fn default_noise(self) -> f64 {
        match self {
            SyntheticTask::TwoSpirals => 0.03,
            SyntheticTask::GaussianBlobs => 1.0,
            SyntheticTask::PatchTextures => 0.9,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "two-spirals" => Ok(SyntheticTask::TwoSpirals),
            "gaussian-blobs" => Ok(SyntheticTask::GaussianBlobs),
            "patch-textures" => Ok(SyntheticTask::PatchTextures),
            other => Err(PqkError::config(format!("unknown synthetic task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task: SyntheticTask,
    pub n: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    /// Feature count (gaussian-blobs only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
}

impl SyntheticSpec {
    pub fn new(task: SyntheticTask, n: usize, seed: u64) -> Self {
        SyntheticSpec {
            task,
            n,
            seed,
            classes: None,
            dims: None,
            noise: None,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes.unwrap_or(self.task.default_classes())
    }

    pub fn generate(&self, split: Split) -> Result<Dataset> {
        let classes = self.classes();
        let noise = self.noise.unwrap_or(self.task.default_noise());
        if classes < 2 || self.n < 2 * classes {
            return Err(PqkError::config(format!(
                "synthetic data needs at least 2 classes and n >= 2 * classes, got {classes} classes and n = {}",
                self.n
            )));
        }
        if !(noise >= 0.0) {
            return Err(PqkError::config("synthetic noise must be >= 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut labels: Vec<usize> = (0..self.n).map(|i| i % classes).collect();
        labels.shuffle(&mut rng);
        let gauss = Normal::new(0.0, 1.0).expect("unit normal");
        let (shape, data): (Vec<usize>, Vec<f32>) = match self.task {
            SyntheticTask::TwoSpirals => {
                if classes != 2 {
                    return Err(PqkError::config("two-spirals has exactly 2 classes"));
                }
                let mut data = Vec::with_capacity(2 * self.n);
                for &c in &labels {
                    let t: f64 = rng.random_range(0.0..1.0);
                    let r = 0.1 + 0.9 * t;
                    let angle = 3.0 * PI * t + c as f64 * PI;
                    data.push((r * angle.cos() + noise * gauss.sample(&mut rng)) as f32);
                    data.push((r * angle.sin() + noise * gauss.sample(&mut rng)) as f32);
                }
                (vec![self.n, 2], data)
            }
            SyntheticTask::GaussianBlobs => {
                let dims = self.dims.unwrap_or(2);
                if dims == 0 {
                    return Err(PqkError::config("gaussian-blobs needs at least one dimension"));
                }
                // Centres are fixed per (classes, dims) so every seed samples the same task.
                let mut centre_rng = ChaCha8Rng::seed_from_u64(((classes as u64) << 32) | dims as u64);
                let centres: Vec<f64> = (0..classes * dims).map(|_| centre_rng.random_range(-4.0..4.0)).collect();
                let mut data = Vec::with_capacity(self.n * dims);
                for &c in &labels {
                    for d in 0..dims {
                        data.push((centres[c * dims + d] + noise * gauss.sample(&mut rng)) as f32);
                    }
                }
                (vec![self.n, dims], data)
            }
            SyntheticTask::PatchTextures => {
                let mut data = Vec::with_capacity(self.n * TEXTURE_SIDE * TEXTURE_SIDE);
                for &c in &labels {
                    data.extend(texture_image(c, noise, &mut rng, &gauss));
                }
                (vec![self.n, 1, TEXTURE_SIDE, TEXTURE_SIDE], data)
            }
        };
        Dataset::new(Tensor::new(shape, data)?, labels, split)
    }
}

const TEXTURE_SIDE: usize = 16;
const PATCH_SIDE: usize = 8;

/// Class `c` is a grating with orientation `(c % 4)·45°` and spatial frequency
/// `(1 + c / 4) / 8` cycles per pixel, placed at a random offset with random
/// phase and contrast, under additive Gaussian noise.
fn texture_image(class: usize, noise: f64, rng: &mut ChaCha8Rng, gauss: &Normal<f64>) -> Vec<f32> {
    let theta = (class % 4) as f64 * PI / 4.0 + rng.random_range(-0.15..0.15);
    let freq = (1 + class / 4) as f64 / 8.0;
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let contrast: f64 = rng.random_range(0.6..1.0);
    let oy = rng.random_range(0..=TEXTURE_SIDE - PATCH_SIDE);
    let ox = rng.random_range(0..=TEXTURE_SIDE - PATCH_SIDE);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut img = vec![0.0f32; TEXTURE_SIDE * TEXTURE_SIDE];
    for y in 0..PATCH_SIDE {
        for x in 0..PATCH_SIDE {
            let u = x as f64 * ct + y as f64 * st;
            img[(oy + y) * TEXTURE_SIDE + ox + x] = (contrast * (2.0 * PI * freq * u + phase).sin()) as f32;
        }
    }
    for v in &mut img {
        *v += (noise * gauss.sample(rng)) as f32;
    }
    img
}

/// Synthetic dataset with the task's default classes and noise.
pub fn make_synthetic(task: SyntheticTask, n: usize, seed: u64) -> Result<Dataset> {
    SyntheticSpec::new(task, n, seed).generate(Split::Train)
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// A `PQKT` feature tensor `[N, ...]` and a file of `N` little-endian `u16` labels.
    Files { features: PathBuf, labels: PathBuf },
}

impl DataSource {
    pub fn load(&self, split: Split) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(spec) => spec.generate(split),
            DataSource::Files { features, labels } => load_feature_files(features, labels, split),
        }
    }

    /// Parses a command-line data source:
    /// `synthetic:<task>[:key=value]...` (keys `n`, `seed`, `classes`, `dims`, `noise`)
    /// or `files:<features.pqkt>:<labels.u16>`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut parts = spec.split(':');
        match parts.next() {
            Some("synthetic") => {
                let task = SyntheticTask::parse(parts.next().unwrap_or(""))?;
                let mut s = SyntheticSpec::new(task, 1000, 0);
                for kv in parts {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| PqkError::config(format!("expected key=value in data source, got {kv:?}")))?;
                    let bad = || PqkError::config(format!("bad value for {k} in data source: {v:?}"));
                    match k {
                        "n" => s.n = v.parse().map_err(|_| bad())?,
                        "seed" => s.seed = v.parse().map_err(|_| bad())?,
                        "classes" => s.classes = Some(v.parse().map_err(|_| bad())?),
                        "dims" => s.dims = Some(v.parse().map_err(|_| bad())?),
                        "noise" => s.noise = Some(v.parse().map_err(|_| bad())?),
                        other => return Err(PqkError::config(format!("unknown data source key {other:?}"))),
                    }
                }
                Ok(DataSource::Synthetic(s))
            }
            Some("files") => {
                let rest: Vec<&str> = parts.collect();
                if rest.len() != 2 || rest.iter().any(|p| p.is_empty()) {
                    return Err(PqkError::config("files data source is files:<features>:<labels>"));
                }
                Ok(DataSource::Files {
                    features: PathBuf::from(rest[0]),
                    labels: PathBuf::from(rest[1]),
                })
            }
            _ => Err(PqkError::config(format!(
                "data source must start with synthetic: or files:, got {spec:?}"
            ))),
        }
    }
}

/// Training and development data of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DataSource,
    pub dev: DataSource,
}

impl DataConfig {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        Ok((self.train.load(Split::Train)?, self.dev.load(Split::Dev)?))
    }
}

pub fn load_feature_files(features: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let x = format::read_tensor_file(features)?;
    let raw = std::fs::read(labels).map_err(|e| PqkError::io(labels, e))?;
    if raw.len() % 2 != 0 {
        return Err(PqkError::Data(format!(
            "label file {} has odd length {}",
            labels.display(),
            raw.len()
        )));
    }
    let y: Vec<usize> = raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]]) as usize).collect();
    Dataset::new(x, y, split)
}

pub fn write_label_file(path: &Path, labels: &[usize]) -> Result<()> {
    let mut raw = Vec::with_capacity(labels.len() * 2);
    for &l in labels {
        let v = u16::try_from(l).map_err(|_| PqkError::Data(format!("label {l} does not fit in u16")))?;
        raw.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, raw).map_err(|e| PqkError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        for task in [SyntheticTask::TwoSpirals, SyntheticTask::GaussianBlobs, SyntheticTask::PatchTextures] {
            let a = make_synthetic(task, 64, 3).unwrap();
            let b = make_synthetic(task, 64, 3).unwrap();
            assert!(a.examples().bit_eq(b.examples()));
            assert_eq!(a.labels(), b.labels());
            let c = make_synthetic(task, 64, 4).unwrap();
            assert!(!a.examples().bit_eq(c.examples()));
        }
    }

    #[test]
    fn spirals_are_balanced() {
        let d = make_synthetic(SyntheticTask::TwoSpirals, 1000, 0).unwrap();
        assert_eq!(d.examples().shape(), &[1000, 2]);
        assert_eq!(d.labels().iter().filter(|&&l| l == 0).count(), 500);
        assert_eq!(d.labels().iter().filter(|&&l| l == 1).count(), 500);
    }

    #[test]
    fn texture_shape_and_classes() {
        let d = make_synthetic(SyntheticTask::PatchTextures, 80, 1).unwrap();
        assert_eq!(d.examples().shape(), &[80, 1, 16, 16]);
        for c in 0..8 {
            assert_eq!(d.labels().iter().filter(|&&l| l == c).count(), 10);
        }
    }

    #[test]
    fn too_few_examples_rejected() {
        assert!(make_synthetic(SyntheticTask::PatchTextures, 15, 0).is_err());
        let mut s = SyntheticSpec::new(SyntheticTask::TwoSpirals, 100, 0);
        s.classes = Some(3);
        assert!(s.generate(Split::Train).is_err());
    }

    #[test]
    fn epoch_order_is_a_permutation_and_reproducible() {
        let d = make_synthetic(SyntheticTask::GaussianBlobs, 50, 0).unwrap();
        let a = d.epoch_batches(16, 7, 1, 3);
        assert_eq!(a.len(), 4);
        assert_eq!(a[3].len(), 2);
        let mut flat: Vec<usize> = a.concat();
        assert_eq!(a, d.epoch_batches(16, 7, 1, 3));
        assert_ne!(a, d.epoch_batches(16, 7, 1, 4));
        assert_ne!(a, d.epoch_batches(16, 7, 2, 3));
        flat.sort_unstable();
        assert_eq!(flat, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn parse_data_specs() {
        let s = DataSource::parse("synthetic:patch-textures:n=400:seed=9").unwrap();
        match s {
            DataSource::Synthetic(spec) => {
                assert_eq!(spec.task, SyntheticTask::PatchTextures);
                assert_eq!((spec.n, spec.seed), (400, 9));
            }
            _ => panic!("expected synthetic"),
        }
        assert!(matches!(DataSource::parse("files:a.pqkt:b.u16").unwrap(), DataSource::Files { .. }));
        assert!(DataSource::parse("synthetic:nope").is_err());
        assert!(DataSource::parse("synthetic:two-spirals:n=abc").is_err());
        assert!(DataSource::parse("files:onlyone").is_err());
        assert!(DataSource::parse("http://x").is_err());
    }

    #[test]
    fn data_source_json() {
        let json = r#"{"source": "synthetic", "task": "gaussian-blobs", "n": 40, "seed": 1, "dims": 3}"#;
        let s: DataSource = serde_json::from_str(json).unwrap();
        let d = s.load(Split::Dev).unwrap();
        assert_eq!(d.examples().shape(), &[40, 3]);
        assert_eq!(d.split(), Split::Dev);
        let back: DataSource = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        let bad = r#"{"source": "synthetic", "task": "gaussian-blobs", "n": 40, "seed": 1, "colour": 3}"#;
        assert!(serde_json::from_str::<DataSource>(bad).is_err());
    }

    #[test]
    fn feature_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let d = make_synthetic(SyntheticTask::GaussianBlobs, 20, 2).unwrap();
        let (f, l) = (dir.path().join("x.pqkt"), dir.path().join("y.u16"));
        format::write_tensor_file(&f, d.examples()).unwrap();
        write_label_file(&l, d.labels()).unwrap();
        let back = load_feature_files(&f, &l, Split::Train).unwrap();
        assert_eq!(back, d);
        std::fs::write(&l, [1u8, 0, 2]).unwrap();
        assert!(matches!(load_feature_files(&f, &l, Split::Train), Err(PqkError::Data(_))));
        std::fs::write(&l, [1u8, 0]).unwrap();
        assert!(matches!(load_feature_files(&f, &l, Split::Train), Err(PqkError::Data(_))));
    }

    #[test]
    fn label_range_check() {
        let d = make_synthetic(SyntheticTask::GaussianBlobs, 20, 2).unwrap();
        assert!(d.check_classes(4).is_ok());
        assert!(matches!(d.check_classes(3), Err(PqkError::Data(_))));
    }
}
