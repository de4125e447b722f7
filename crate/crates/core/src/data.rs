//! Datasets: the CIFAR-10 binary format, a synthetic frequency-structured
//! generator, and seeded batching.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_SIDE: usize = 32;
/// One label byte followed by 1024 red, 1024 green and 1024 blue bytes.
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Environment variable that overrides the data root directory.
pub const DATA_DIR_ENV: &str = "FPCM_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Images `N x C x H x W` with values in `[0, 1]` and labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        images.expect_rank(4, "dataset images")?;
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Format(format!("label {y} out of range for {classes} classes")));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// `C x H x W` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Batch> {
        Ok(Batch {
            images: self.images.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            indices: indices.to_vec(),
        })
    }

    /// The first `n` samples as one batch.
    pub fn head(&self, n: usize) -> Result<Batch> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// A contiguous group of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Positions of the samples in the source dataset.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn cifar_files(split: Split) -> Vec<String> {
    match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    }
}

/// Decodes CIFAR-10 binary records.
pub fn decode_cifar_records(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD_LEN}-byte records",
            bytes.len()
        )));
    }
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD_LEN);
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD_LEN * (CIFAR_RECORD_LEN - 1));
    for rec in bytes.chunks(CIFAR_RECORD_LEN) {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format(format!("label byte {label} out of range")));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((labels, pixels))
}

/// Loads a CIFAR-10 split from `dir`. With `limit`, keeps a class-balanced
/// subset of the first samples of each class in file order; any remainder
/// of `limit / 10` goes to the lowest class indices.
pub fn load_cifar10(dir: &Path, split: Split, limit: Option<usize>) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for name in cifar_files(split) {
        let path = dir.join(&name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (l, p) = decode_cifar_records(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        labels.extend(l);
        pixels.extend(p);
    }
    let per_image = 3 * CIFAR_SIDE * CIFAR_SIDE;
    let n = labels.len();
    let images = Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    let ds = Dataset::new(images, labels, CIFAR_CLASSES, split)?;
    match limit {
        None => Ok(ds),
        Some(limit) => {
            let keep = balanced_indices(ds.labels(), CIFAR_CLASSES, limit);
            let b = ds.subset(&keep)?;
            debug_assert_eq!(b.images.numel(), keep.len() * per_image);
            Dataset::new(b.images, b.labels, CIFAR_CLASSES, split)
        }
    }
}

/// Indices of a class-balanced prefix selection, returned in dataset order.
pub fn balanced_indices(labels: &[usize], classes: usize, limit: usize) -> Vec<usize> {
    let mut quota: Vec<usize> = (0..classes)
        .map(|c| limit / classes + usize::from(c < limit % classes))
        .collect();
    labels
        .iter()
        .enumerate()
        .filter_map(|(i, &y)| {
            (quota[y] > 0).then(|| {
                quota[y] -= 1;
                i
            })
        })
        .collect()
}

/// Specification of a synthetic dataset in which each class is a 2D
/// sinusoid at its own wavenumber with random phase, plus uniform noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Row and column wavenumber of each class.
    pub wavenumbers: Vec<(usize, usize)>,
    pub amplitude: f64,
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// A spec with `classes` distinct wavenumbers spread from low to high
    /// frequencies below Nyquist.
    pub fn new(classes: usize, per_class: usize, side: usize, noise: f64, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            channels: 3,
            height: side,
            width: side,
            wavenumbers: default_wavenumbers(classes, side, side),
            amplitude: 0.3,
            noise,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.per_class == 0 || self.channels == 0 {
            return Err(Error::config("synthetic data needs >= 2 classes and >= 1 sample per class"));
        }
        if self.wavenumbers.len() != self.classes {
            return Err(Error::config(format!(
                "{} wavenumbers for {} classes",
                self.wavenumbers.len(),
                self.classes
            )));
        }
        for &(ku, kv) in &self.wavenumbers {
            if 2 * ku >= self.height || 2 * kv >= self.width {
                return Err(Error::config(format!(
                    "wavenumber ({ku}, {kv}) is not below Nyquist for {}x{}",
                    self.height, self.width
                )));
            }
        }
        if !(self.amplitude >= 0.0 && self.noise >= 0.0 && self.amplitude + self.noise <= 0.5) {
            return Err(Error::config("amplitude + noise must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

/// Distinct non-zero wavenumbers below Nyquist ordered by radius, then
/// sampled evenly so classes span low to high frequencies.
pub fn default_wavenumbers(classes: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = (0..h.div_ceil(2))
        .flat_map(|u| (0..w.div_ceil(2)).map(move |v| (u, v)))
        .filter(|&(u, v)| (u, v) != (0, 0) && 2 * u < h && 2 * v < w)
        .collect();
    all.sort_by_key(|&(u, v)| (u * u + v * v, u));
    if all.is_empty() || classes == 0 {
        return Vec::new();
    }
    if classes >= all.len() {
        return all.into_iter().cycle().take(classes).collect();
    }
    (0..classes)
        .map(|c| all[c * (all.len() - 1) / (classes - 1).max(1)])
        .collect()
}

/// Generates the dataset described by `s`. Samples are grouped by class.
pub fn synth_dataset(s: &SynthSpec, split: Split) -> Result<Dataset> {
    s.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    rng.set_stream(match split {
        Split::Train => 0,
        Split::Test => 1,
    });
    let n = s.classes * s.per_class;
    let plane = s.height * s.width;
    let mut data = Vec::with_capacity(n * s.channels * plane);
    let mut labels = Vec::with_capacity(n);
    for (class, &(ku, kv)) in s.wavenumbers.iter().enumerate() {
        for _ in 0..s.per_class {
            let phase = rng.random_range(0.0..2.0 * PI);
            for c in 0..s.channels {
                // Channels share the pattern with decreasing contrast.
                let amp = s.amplitude * (1.0 - 0.25 * c as f64 / s.channels as f64);
                for a in 0..s.height {
                    for b in 0..s.width {
                        let arg = 2.0 * PI * (ku as f64 * a as f64 / s.height as f64 + kv as f64 * b as f64 / s.width as f64);
                        let noise = if s.noise > 0.0 { rng.random_range(-s.noise..s.noise) } else { 0.0 };
                        data.push((0.5 + amp * (arg + phase).cos() + noise).clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(class);
        }
    }
    let images = Tensor::new(vec![n, s.channels, s.height, s.width], data)?;
    Dataset::new(images, labels, s.classes, split)
}

/// Iterator over consecutive batches of a (possibly shuffled) index order.
/// The final batch may be smaller.
pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

/// Splits `d` into batches of `batch_size`. With a seed, the order is a
/// seeded permutation; otherwise dataset order.
pub fn batches(d: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(Batches {
        data: d,
        order,
        batch_size,
        pos: 0,
    })
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(self.data.subset(idx).expect("indices come from the dataset"))
    }
}

/// Random 4-pixel-padded crop and horizontal flip, applied per sample.
/// Padding is zero.
pub fn augment(images: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    images.expect_rank(4, "augment input")?;
    let [n, c, h, w] = [images.shape()[0], images.shape()[1], images.shape()[2], images.shape()[3]];
    const PAD: i64 = 4;
    let mut out = vec![0.0; images.numel()];
    for s in 0..n {
        let dy = rng.random_range(-PAD..=PAD);
        let dx = rng.random_range(-PAD..=PAD);
        let flip = rng.random_bool(0.5);
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            for i in 0..h {
                let si = i as i64 + dy;
                if si < 0 || si >= h as i64 {
                    continue;
                }
                for j in 0..w {
                    let jj = if flip { w - 1 - j } else { j };
                    let sj = jj as i64 + dx;
                    if sj < 0 || sj >= w as i64 {
                        continue;
                    }
                    out[base + i * w + j] = images.data()[base + si as usize * w + sj as usize];
                }
            }
        }
    }
    Tensor::new(images.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fill; CIFAR_RECORD_LEN];
        r[0] = label;
        r
    }

    #[test]
    fn truncated_record_is_format_error() {
        let mut bytes = record(3, 7);
        bytes.pop();
        assert!(matches!(decode_cifar_records(&bytes), Err(Error::Format(_))));
        let mut bytes = record(3, 7);
        bytes.extend(record(4, 1));
        assert_eq!(decode_cifar_records(&bytes).unwrap().0, vec![3, 4]);
    }

    #[test]
    fn bad_label_byte_is_format_error() {
        assert!(matches!(decode_cifar_records(&record(10, 0)), Err(Error::Format(_))));
    }

    #[test]
    fn missing_directory_is_io_error() {
        let err = load_cifar10(Path::new("/nonexistent/cifar"), Split::Test, None).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn balanced_limit() {
        let labels: Vec<usize> = (0..5000).map(|i| (i * 7 + i / 13) % 10).collect();
        let keep = balanced_indices(&labels, 10, 1000);
        assert_eq!(keep.len(), 1000);
        for c in 0..10 {
            assert_eq!(keep.iter().filter(|&&i| labels[i] == c).count(), 100);
        }
        let keep = balanced_indices(&labels, 10, 13);
        assert_eq!(keep.iter().filter(|&&i| labels[i] == 0).count(), 2);
        assert_eq!(keep.iter().filter(|&&i| labels[i] == 9).count(), 1);
    }

    #[test]
    fn batch_sizes_include_partial_tail() {
        let d = synth_dataset(&SynthSpec::new(2, 5, 8, 0.1, 0), Split::Train).unwrap();
        let sizes: Vec<usize> = batches(&d, 3, Some(1)).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        assert!(batches(&d, 0, None).is_err());
    }

    #[test]
    fn synth_rejects_nyquist_band() {
        let mut s = SynthSpec::new(2, 2, 8, 0.0, 0);
        s.wavenumbers[1] = (4, 0);
        assert!(matches!(synth_dataset(&s, Split::Train), Err(Error::Config(_))));
    }

    #[test]
    fn default_wavenumbers_are_distinct_and_sub_nyquist() {
        let k = default_wavenumbers(10, 16, 16);
        assert_eq!(k.len(), 10);
        for (i, a) in k.iter().enumerate() {
            assert!(2 * a.0 < 16 && 2 * a.1 < 16);
            assert!(k[i + 1..].iter().all(|b| b != a));
        }
    }

    #[test]
    fn augmentation_keeps_range_and_shape() {
        let d = synth_dataset(&SynthSpec::new(2, 3, 8, 0.1, 5), Split::Train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = augment(d.images(), &mut rng).unwrap();
        assert_eq!(a.shape(), d.images().shape());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
