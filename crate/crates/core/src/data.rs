//! Datasets: synthetic Gaussian-blob benchmarks with known class geometry,
//! IDX and CIFAR binary loaders, image augmentation and normalization.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Channel-major (`C x H x W`) layout of an image feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    classes: usize,
    splits: Vec<Split>,
    shape: Option<ImageShape>,
    provenance: String,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        classes: usize,
        splits: Vec<Split>,
        shape: Option<ImageShape>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(Error::invalid("dataset dims must be positive"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Shape {
                what: "dataset features",
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        if splits.len() != labels.len() {
            return Err(Error::Shape {
                what: "split assignments",
                expected: labels.len(),
                actual: splits.len(),
            });
        }
        if let Some(s) = shape {
            if s.len() != dim {
                return Err(Error::Shape {
                    what: "image shape",
                    expected: dim,
                    actual: s.len(),
                });
            }
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelRange {
                record: i,
                label: l,
                classes,
            });
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature in sample {}", i / dim)));
        }
        Ok(Self {
            features,
            dim,
            labels,
            classes,
            splits,
            shape,
            provenance: provenance.into(),
        })
    }

    /// Stitch a train and a test dataset into one with split assignments.
    pub fn from_splits(train: Dataset, test: Dataset) -> Result<Self> {
        if train.dim != test.dim || train.shape != test.shape {
            return Err(Error::Inconsistent(format!(
                "train feature dim {} differs from test feature dim {}",
                train.dim, test.dim
            )));
        }
        let classes = train.classes.max(test.classes);
        let mut features = train.features;
        features.extend(test.features);
        let mut labels = train.labels;
        let n_train = labels.len();
        labels.extend(test.labels);
        let mut splits = vec![Split::Train; n_train];
        splits.resize(labels.len(), Split::Test);
        let provenance = format!("train={} test={}", train.provenance, test.provenance);
        let ds = Self::new(features, train.dim, labels, classes, splits, train.shape, provenance)?;
        ds.check_coverage()?;
        Ok(ds)
    }

    /// Every class must occur in the train split.
    pub fn check_coverage(&self) -> Result<()> {
        let mut seen = vec![false; self.classes];
        for (l, s) in self.labels.iter().zip(&self.splits) {
            if *s == Split::Train {
                seen[*l] = true;
            }
        }
        match seen.iter().position(|s| !s) {
            Some(class) => Err(Error::EmptyClass { class }),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn shape(&self) -> Option<ImageShape> {
        self.shape
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    /// Indices of `split` in canonical (ascending) order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Indices of `split` labeled `class`, ascending.
    pub fn class_indices(&self, split: Split, class: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split && self.labels[i] == class)
            .collect()
    }
}

/// Placement of the class means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanLayout {
    /// One mean per class; shorter vectors are zero-padded to `dim`.
    Explicit(Vec<Vec<f64>>),
    /// Classes grouped by similarity. Group centers sit pairwise `between`
    /// apart; members of a multi-class group sit pairwise `within` apart
    /// around their center, singletons sit on it.
    Tree {
        groups: Vec<usize>,
        within: f64,
        between: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub means: MeanLayout,
    pub sigma: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Three classes in 32 dimensions: A and B two apart, C ten away from both.
    pub fn tri_blob(seed: u64) -> Self {
        Self {
            classes: 3,
            train_per_class: 500,
            test_per_class: 200,
            dim: 32,
            means: MeanLayout::Explicit(vec![
                vec![0.0, 0.0],
                vec![2.0, 0.0],
                vec![1.0, 99f64.sqrt()],
            ]),
            sigma: 1.2,
            label_noise: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.classes < 1 {
            errs.push("classes: must be >= 1".to_string());
        }
        if self.train_per_class < 1 {
            errs.push("train_per_class: must be >= 1".to_string());
        }
        if self.dim < 1 {
            errs.push("dim: must be >= 1".to_string());
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            errs.push(format!("sigma: must be finite and >= 0, got {}", self.sigma));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            errs.push(format!("label_noise: must be in [0, 1), got {}", self.label_noise));
        }
        match self.class_means() {
            Ok(means) => {
                for i in 0..means.len() {
                    for j in i + 1..means.len() {
                        if means[i] == means[j] {
                            errs.push(format!("means: classes {i} and {j} share a mean"));
                        }
                    }
                }
            }
            Err(e) => errs.push(e),
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// The placed class means, each of length `dim`.
    pub fn class_means(&self) -> std::result::Result<Vec<Vec<f64>>, String> {
        match &self.means {
            MeanLayout::Explicit(ms) => {
                if ms.len() != self.classes {
                    return Err(format!(
                        "means: {} explicit means for {} classes",
                        ms.len(),
                        self.classes
                    ));
                }
                ms.iter()
                    .enumerate()
                    .map(|(c, m)| {
                        if m.len() > self.dim {
                            return Err(format!("means[{c}]: longer than dim {}", self.dim));
                        }
                        if m.iter().any(|v| !v.is_finite()) {
                            return Err(format!("means[{c}]: non-finite entry"));
                        }
                        let mut v = m.clone();
                        v.resize(self.dim, 0.0);
                        Ok(v)
                    })
                    .collect()
            }
            MeanLayout::Tree {
                groups,
                within,
                between,
            } => {
                if groups.iter().sum::<usize>() != self.classes || groups.contains(&0) {
                    return Err(format!(
                        "means.tree.groups: sizes must be positive and sum to {}",
                        self.classes
                    ));
                }
                if !(*within > 0.0 && *between > 0.0) {
                    return Err("means.tree: distances must be positive".into());
                }
                let offsets: usize = groups.iter().filter(|&&g| g > 1).sum();
                let needed = groups.len() + offsets;
                if needed > self.dim {
                    return Err(format!("means.tree: layout needs dim >= {needed}"));
                }
                let mut means = Vec::with_capacity(self.classes);
                let mut axis = groups.len();
                for (g, &size) in groups.iter().enumerate() {
                    for _ in 0..size {
                        let mut m = vec![0.0; self.dim];
                        m[g] = between / 2f64.sqrt();
                        if size > 1 {
                            m[axis] = within / 2f64.sqrt();
                            axis += 1;
                        }
                        means.push(m);
                    }
                }
                Ok(means)
            }
        }
    }
}

/// Gaussian blobs around the placed means. Train samples come first (class
/// by class), then test samples. Exactly `round(label_noise * n_train)`
/// train labels are redrawn uniformly over all classes; test labels are clean.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let means = spec.class_means().map_err(|e| Error::Config(vec![e]))?;
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = substream(spec.seed, "synthetic", 0);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for (split, per_class) in [(Split::Train, spec.train_per_class), (Split::Test, spec.test_per_class)] {
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                features.extend(mean.iter().map(|m| m + noise.sample(&mut rng)));
                labels.push(c);
                splits.push(split);
            }
        }
    }
    let n_train = spec.train_per_class * spec.classes;
    let flips = (spec.label_noise * n_train as f64).round() as usize;
    if flips > 0 {
        let mut rng = substream(spec.seed, "label-noise", 0);
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng);
        for &i in &order[..flips] {
            labels[i] = rng.random_range(0..spec.classes);
        }
    }
    let ds = Dataset::new(
        features,
        spec.dim,
        labels,
        spec.classes,
        splits,
        None,
        format!("synthetic(seed={})", spec.seed),
    )?;
    ds.check_coverage()?;
    Ok(ds)
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::file(path, e))
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes(b.try_into().unwrap())),
        None => Err(Error::Truncated {
            offset: bytes.len(),
            needed: offset + 4 - bytes.len(),
        }),
    }
}

/// Parse an IDX image/label pair. Class count is `max label + 1`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    parse_idx(&read_file(images)?, &read_file(labels)?, &format!("idx:{}", images.display()))
}

pub fn parse_idx(images: &[u8], labels: &[u8], provenance: &str) -> Result<Dataset> {
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            actual: magic,
        });
    }
    let n = be_u32(images, 4)? as usize;
    let h = be_u32(images, 8)? as usize;
    let w = be_u32(images, 12)? as usize;
    let body = n * h * w;
    if images.len() < 16 + body {
        return Err(Error::Truncated {
            offset: images.len(),
            needed: 16 + body - images.len(),
        });
    }
    if images.len() > 16 + body {
        return Err(Error::Parse {
            offset: 16 + body,
            msg: format!("{} trailing bytes in image file", images.len() - 16 - body),
        });
    }
    let magic = be_u32(labels, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            actual: magic,
        });
    }
    let nl = be_u32(labels, 4)? as usize;
    if nl != n {
        return Err(Error::Inconsistent(format!(
            "image file has {n} items, label file has {nl}"
        )));
    }
    if labels.len() != 8 + n {
        return Err(if labels.len() < 8 + n {
            Error::Truncated {
                offset: labels.len(),
                needed: 8 + n - labels.len(),
            }
        } else {
            Error::Parse {
                offset: 8 + n,
                msg: "trailing bytes in label file".into(),
            }
        });
    }
    let ys: Vec<usize> = labels[8..].iter().map(|&b| b as usize).collect();
    let classes = ys.iter().max().map_or(1, |m| m + 1);
    let features = images[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let shape = ImageShape {
        channels: 1,
        height: h,
        width: w,
    };
    Dataset::new(
        features,
        h * w,
        ys,
        classes,
        vec![Split::Train; n],
        Some(shape),
        provenance,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    /// One label byte per record.
    Cifar10,
    /// Coarse then fine label byte; the fine label (100 classes) is used.
    Cifar100Fine,
    /// Coarse then fine label byte; the coarse label (20 classes) is used.
    Cifar100Coarse,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            _ => 2,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100Fine => 100,
            CifarVariant::Cifar100Coarse => 20,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }
}

pub const CIFAR_PIXELS: usize = 3 * 32 * 32;
pub const CIFAR_SHAPE: ImageShape = ImageShape {
    channels: 3,
    height: 32,
    width: 32,
};

/// Concatenate CIFAR binary batch files.
pub fn load_cifar_bin(paths: &[PathBuf], variant: CifarVariant) -> Result<Dataset> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_file(path)?;
        parse_cifar_records(&bytes, variant, &mut features, &mut labels).map_err(|e| match e {
            Error::Parse { offset, msg } => Error::Parse {
                offset,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })?;
    }
    let n = labels.len();
    Dataset::new(
        features,
        CIFAR_PIXELS,
        labels,
        variant.classes(),
        vec![Split::Train; n],
        Some(CIFAR_SHAPE),
        format!("cifar:{variant:?}"),
    )
}

pub fn parse_cifar_records(
    bytes: &[u8],
    variant: CifarVariant,
    features: &mut Vec<f64>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    let rec = variant.record_len();
    if bytes.len() % rec != 0 {
        return Err(Error::Parse {
            offset: bytes.len() - bytes.len() % rec,
            msg: format!(
                "file length {} is not a multiple of the {rec}-byte record size",
                bytes.len()
            ),
        });
    }
    let base = labels.len();
    for (r, chunk) in bytes.chunks_exact(rec).enumerate() {
        let label = match variant {
            CifarVariant::Cifar10 | CifarVariant::Cifar100Coarse => chunk[0],
            CifarVariant::Cifar100Fine => chunk[1],
        } as usize;
        if label >= variant.classes() {
            return Err(Error::LabelRange {
                record: base + r,
                label,
                classes: variant.classes(),
            });
        }
        labels.push(label);
        features.extend(chunk[variant.label_bytes()..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}

/// Zero padding added on each side before cropping.
pub const AUG_PAD: usize = 4;

/// Pad by [`AUG_PAD`], crop back to the original size at a uniformly random
/// offset, then mirror horizontally with probability one half.
pub fn augment<R: Rng + ?Sized>(features: &[f64], shape: Option<ImageShape>, rng: &mut R) -> Result<Vec<f64>> {
    let shape = shape.ok_or_else(|| {
        Error::Config(vec![
            "augment: features have no spatial shape; disable augmentation for vector data".into(),
        ])
    })?;
    let dy = rng.random_range(0..=2 * AUG_PAD);
    let dx = rng.random_range(0..=2 * AUG_PAD);
    let flip = rng.random_bool(0.5);
    augment_with(features, shape, (dy, dx), flip)
}

/// Deterministic core of [`augment`]; `offset` is `(row, col)` into the
/// padded image, so `(AUG_PAD, AUG_PAD)` is the identity crop.
pub fn augment_with(
    features: &[f64],
    shape: ImageShape,
    offset: (usize, usize),
    flip: bool,
) -> Result<Vec<f64>> {
    if features.len() != shape.len() {
        return Err(Error::Shape {
            what: "image features",
            expected: shape.len(),
            actual: features.len(),
        });
    }
    if offset.0 > 2 * AUG_PAD || offset.1 > 2 * AUG_PAD {
        return Err(Error::invalid(format!("crop offset {offset:?} outside padded image")));
    }
    let (h, w) = (shape.height, shape.width);
    let mut out = vec![0.0; features.len()];
    for c in 0..shape.channels {
        let plane = &features[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            // Row in the original image, or None if it falls in the padding.
            let sy = (y + offset.0).checked_sub(AUG_PAD).filter(|&v| v < h);
            for x in 0..w {
                let ox = if flip { w - 1 - x } else { x };
                let sx = (ox + offset.1).checked_sub(AUG_PAD).filter(|&v| v < w);
                if let (Some(sy), Some(sx)) = (sy, sx) {
                    dst[y * w + x] = plane[sy * w + sx];
                }
            }
        }
    }
    Ok(out)
}

/// Per-channel normalization statistics, computed on the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Channel of every feature: image channels when the data is spatial,
/// otherwise each feature is its own channel.
fn channel_map(ds: &Dataset) -> (usize, Vec<usize>) {
    match ds.shape {
        Some(s) => {
            let plane = s.height * s.width;
            (s.channels, (0..ds.dim).map(|i| i / plane).collect())
        }
        None => (ds.dim, (0..ds.dim).collect()),
    }
}

impl NormStats {
    pub fn from_train(ds: &Dataset) -> Result<Self> {
        let (channels, map) = channel_map(ds);
        let train = ds.indices(Split::Train);
        if train.is_empty() {
            return Err(Error::invalid("no train samples to compute statistics from"));
        }
        let mut sum = vec![0.0; channels];
        let mut count = vec![0usize; channels];
        for &i in &train {
            for (f, &v) in ds.sample(i).iter().enumerate() {
                sum[map[f]] += v;
                count[map[f]] += 1;
            }
        }
        let means: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
        let mut sq = vec![0.0; channels];
        for &i in &train {
            for (f, &v) in ds.sample(i).iter().enumerate() {
                let d = v - means[map[f]];
                sq[map[f]] += d * d;
            }
        }
        let stds = sq.iter().zip(&count).map(|(s, &n)| (s / n as f64).sqrt()).collect();
        Ok(Self { means, stds })
    }
}

/// Smallest standard deviation treated as nonzero.
pub const MIN_STD: f64 = 1e-12;

/// `(x - mean) / std` per channel, applied to every split.
pub fn normalize_dataset(ds: &Dataset, stats: &NormStats) -> Result<Dataset> {
    let (channels, map) = channel_map(ds);
    if stats.means.len() != channels || stats.stds.len() != channels {
        return Err(Error::Shape {
            what: "normalization channels",
            expected: channels,
            actual: stats.means.len(),
        });
    }
    if let Some(c) = stats.stds.iter().position(|&s| !(s >= MIN_STD) || !s.is_finite()) {
        return Err(Error::invalid(format!("channel {c} has zero standard deviation")));
    }
    let mut out = ds.clone();
    for (k, v) in out.features.iter_mut().enumerate() {
        let c = map[k % ds.dim];
        *v = (*v - stats.means[c]) / stats.stds[c];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn tri_blob_geometry_is_placed() {
        let spec = SyntheticSpec::tri_blob(0);
        let m = spec.class_means().unwrap();
        assert_abs_diff_eq!(dist(&m[0], &m[1]), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dist(&m[0], &m[2]), 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dist(&m[1], &m[2]), 10.0, epsilon = 1e-12);
        let ds = gen_synthetic(&spec).unwrap();
        assert_eq!(ds.len(), 3 * 700);
        assert_eq!(ds.indices(Split::Train).len(), 1500);
    }

    #[test]
    fn three_class_means_mirror_near_far_structure() {
        let spec = SyntheticSpec {
            classes: 3,
            train_per_class: 4,
            test_per_class: 1,
            dim: 2,
            means: MeanLayout::Explicit(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![10.0, 0.0]]),
            sigma: 0.1,
            label_noise: 0.0,
            seed: 1,
        };
        let m = spec.class_means().unwrap();
        assert!(dist(&m[0], &m[1]) < dist(&m[0], &m[2]));
    }

    #[test]
    fn tree_layout_distances() {
        let spec = SyntheticSpec {
            classes: 5,
            train_per_class: 2,
            test_per_class: 0,
            dim: 8,
            means: MeanLayout::Tree {
                groups: vec![2, 2, 1],
                within: 2.0,
                between: 10.0,
            },
            sigma: 1.0,
            label_noise: 0.0,
            seed: 0,
        };
        let m = spec.class_means().unwrap();
        assert_abs_diff_eq!(dist(&m[0], &m[1]), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dist(&m[2], &m[3]), 2.0, epsilon = 1e-12);
        assert!(dist(&m[0], &m[2]) >= 10.0);
        assert!(dist(&m[1], &m[4]) >= 10.0);
    }

    #[test]
    fn zero_noise_keeps_generating_labels() {
        let mut spec = SyntheticSpec::tri_blob(3);
        spec.label_noise = 0.0;
        let ds = gen_synthetic(&spec).unwrap();
        for (i, &l) in ds.labels().iter().enumerate() {
            let expected = match ds.split(i) {
                Split::Train => i / 500,
                Split::Test => (i - 1500) / 200,
            };
            assert_eq!(l, expected);
        }
    }

    #[test]
    fn noise_only_touches_train() {
        let ds = gen_synthetic(&SyntheticSpec::tri_blob(3)).unwrap();
        let train_changed = (0..1500).filter(|&i| ds.label(i) != i / 500).count();
        // 150 redraws, a third of which land on the original class
        assert!(train_changed > 70 && train_changed <= 150, "{train_changed}");
        assert!((1500..2100).all(|i| ds.label(i) == (i - 1500) / 200));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = gen_synthetic(&SyntheticSpec::tri_blob(9)).unwrap();
        let b = gen_synthetic(&SyntheticSpec::tri_blob(9)).unwrap();
        let bits = |d: &Dataset| d.features().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.labels(), b.labels());
        let c = gen_synthetic(&SyntheticSpec::tri_blob(10)).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn invalid_spec_lists_fields() {
        let mut spec = SyntheticSpec::tri_blob(0);
        spec.label_noise = 1.0;
        spec.sigma = -1.0;
        spec.means = MeanLayout::Explicit(vec![vec![0.0], vec![0.0], vec![1.0]]);
        match gen_synthetic(&spec) {
            Err(Error::Config(errs)) => {
                assert_eq!(errs.len(), 3, "{errs:?}");
                assert!(errs.iter().any(|e| e.starts_with("label_noise")));
                assert!(errs.iter().any(|e| e.starts_with("sigma")));
                assert!(errs.iter().any(|e| e.starts_with("means")));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn idx_images(n: u32, h: u32, w: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [n, h, w] {
            b.extend(v.to_be_bytes());
        }
        b.extend(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    #[test]
    fn idx_fixture() {
        let ds = parse_idx(&idx_images(1, 2, 2, &[0, 255, 128, 64]), &idx_labels(&[0]), "t").unwrap();
        assert_eq!(ds.len(), 1);
        let f = ds.sample(0);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 1.0);
        assert_abs_diff_eq!(f[2], 0.50196, epsilon = 1e-5);
        assert_abs_diff_eq!(f[3], 0.25098, epsilon = 1e-5);
    }

    #[test]
    fn idx_errors() {
        let imgs = idx_images(1, 2, 2, &[0, 1, 2, 3]);
        let labels = idx_labels(&[0]);
        match parse_idx(&labels, &labels, "t") {
            Err(Error::BadMagic { expected, actual }) => {
                assert_eq!(expected, IDX_IMAGES_MAGIC);
                assert_eq!(actual, IDX_LABELS_MAGIC);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_idx(&imgs, &idx_labels(&[0, 1]), "t"),
            Err(Error::Inconsistent(_))
        ));
        assert!(matches!(
            parse_idx(&imgs[..imgs.len() - 1], &labels, "t"),
            Err(Error::Truncated { offset: 19, needed: 1 })
        ));
    }

    #[test]
    fn cifar_records() {
        let mut rec = vec![3u8];
        rec.extend((0..CIFAR_PIXELS).map(|i| (i % 251) as u8));
        let (mut f, mut l) = (Vec::new(), Vec::new());
        parse_cifar_records(&rec, CifarVariant::Cifar10, &mut f, &mut l).unwrap();
        assert_eq!(l, vec![3]);
        // write-then-read: every byte recovered from its scaled value
        let back: Vec<u8> = f.iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(&back[..], &rec[1..]);

        rec[0] = 10;
        assert!(matches!(
            parse_cifar_records(&rec, CifarVariant::Cifar10, &mut f, &mut l),
            Err(Error::LabelRange { label: 10, .. })
        ));
        assert!(matches!(
            parse_cifar_records(&rec[..3000], CifarVariant::Cifar10, &mut f, &mut l),
            Err(Error::Parse { .. })
        ));

        let mut rec100 = vec![7u8, 42u8];
        rec100.extend(vec![0u8; CIFAR_PIXELS]);
        let (mut f, mut l) = (Vec::new(), Vec::new());
        parse_cifar_records(&rec100, CifarVariant::Cifar100Fine, &mut f, &mut l).unwrap();
        parse_cifar_records(&rec100, CifarVariant::Cifar100Coarse, &mut f, &mut l).unwrap();
        assert_eq!(l, vec![42, 7]);
    }

    fn ramp(shape: ImageShape) -> Vec<f64> {
        (0..shape.len()).map(|i| i as f64 + 1.0).collect()
    }

    #[test]
    fn augmentation_identities() {
        let shape = ImageShape {
            channels: 2,
            height: 5,
            width: 6,
        };
        let img = ramp(shape);
        assert_eq!(augment_with(&img, shape, (AUG_PAD, AUG_PAD), false).unwrap(), img);
        let once = augment_with(&img, shape, (AUG_PAD, AUG_PAD), true).unwrap();
        assert_ne!(once, img);
        assert_eq!(augment_with(&once, shape, (AUG_PAD, AUG_PAD), true).unwrap(), img);
        // shift by one row: first row comes from the zero padding
        let shifted = augment_with(&img, shape, (AUG_PAD - 1, AUG_PAD), false).unwrap();
        assert!(shifted[..6].iter().all(|&v| v == 0.0));
        assert_eq!(&shifted[6..12], &img[..6]);
    }

    #[test]
    fn augment_requires_shape_and_is_reproducible() {
        let mut rng = substream(1, "augment", 0);
        assert!(matches!(augment(&[1.0, 2.0], None, &mut rng), Err(Error::Config(_))));
        let img = ramp(CIFAR_SHAPE);
        let a = augment(&img, Some(CIFAR_SHAPE), &mut substream(4, "augment", 7)).unwrap();
        let b = augment(&img, Some(CIFAR_SHAPE), &mut substream(4, "augment", 7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), img.len());
    }

    #[test]
    fn normalization() {
        let ds = gen_synthetic(&SyntheticSpec::tri_blob(2)).unwrap();
        let stats = NormStats::from_train(&ds).unwrap();
        let norm = normalize_dataset(&ds, &stats).unwrap();
        let again = NormStats::from_train(&norm).unwrap();
        for (m, s) in again.means.iter().zip(&again.stds) {
            assert_abs_diff_eq!(*m, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(*s, 1.0, epsilon = 1e-9);
        }
        let twice = normalize_dataset(&ds, &stats).unwrap();
        assert_eq!(norm, twice);

        let constant = Dataset::new(vec![0.5; 6], 2, vec![0, 1, 0], 2, vec![Split::Train; 3], None, "c").unwrap();
        let stats = NormStats::from_train(&constant).unwrap();
        assert!(normalize_dataset(&constant, &stats).is_err());
    }

    #[test]
    fn coverage_is_enforced() {
        let ds = Dataset::new(vec![0.0; 4], 2, vec![0, 0], 2, vec![Split::Train, Split::Test], None, "x").unwrap();
        assert!(matches!(ds.check_coverage(), Err(Error::EmptyClass { class: 1 })));
        assert!(Dataset::new(vec![0.0; 2], 2, vec![5], 2, vec![Split::Train], None, "x").is_err());
    }
}
