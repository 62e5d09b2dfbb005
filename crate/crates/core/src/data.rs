//! Datasets: IDX (MNIST) ingestion and export, synthetic blob images,
//! seeded minibatch sampling and Gaussian input noise.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Rank-4 images (`N, H, W, C`), used when exporting multi-channel data.
pub const IDX_IMAGES4_MAGIC: u32 = 0x0000_0804;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0, 1]` with integer labels in `[0, class_count)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    class_count: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::DimensionMismatch(format!(
                "images must be [N, H, W, C], got {:?}",
                images.shape()
            )));
        }
        if images.rows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if class_count < 2 {
            return Err(Error::InvalidArgument(format!("class_count {class_count} < 2")));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {class_count} classes"
            )));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel {v} outside [0, 1]")));
        }
        Ok(Self {
            images,
            labels,
            class_count,
            split,
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

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// `[H, W, C]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn with_class_count(mut self, class_count: usize) -> Result<Self> {
        if class_count < self.labels.iter().max().map_or(2, |m| m + 1) {
            return Err(Error::InvalidArgument(format!(
                "class_count {class_count} smaller than the label range"
            )));
        }
        self.class_count = class_count;
        Ok(self)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// The examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            split: self.split,
        }
    }

    /// A seeded choice of `n` distinct indices, returned in ascending order.
    /// Returns every index when `n >= len`.
    pub fn sample_indices(&self, n: usize, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if n >= self.len() {
            return idx;
        }
        let mut rng = rng::stream(seed, &[rng::DOMAIN_SUBSET]);
        idx.shuffle(&mut rng);
        idx.truncate(n);
        idx.sort_unstable();
        idx
    }

    /// Materialises the examples at `indices` as a batch; ids are the
    /// dataset indices.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> Batch<S> {
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        Batch {
            images: self.images.select_rows(indices).cast(),
            targets: Tensor::one_hot(&labels, self.class_count),
            labels,
            ids: indices.iter().map(|&i| i as u64).collect(),
        }
    }
}

/// A minibatch with one-hot targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<S> {
    pub images: Tensor<S>,
    /// `[m, K]` target distributions.
    pub targets: Tensor<S>,
    pub labels: Vec<usize>,
    /// Stable example identifiers used to key per-example random streams.
    pub ids: Vec<u64>,
}

impl<S: Scalar> Batch<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Examples `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            images: self.images.slice_rows(start, end),
            targets: self.targets.slice_rows(start, end),
            labels: self.labels[start..end].to_vec(),
            ids: self.ids[start..end].to_vec(),
        }
    }
}

fn read_u32_be(bytes: &[u8], pos: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(pos..pos + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("missing {what} at offset {pos}"),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file into `(dims [N, H, W, C], raw bytes)`.
fn parse_idx_images(path: &Path) -> Result<([usize; 4], Vec<u8>)> {
    let bytes = read_file(path)?;
    let magic = read_u32_be(&bytes, 0, path, "magic")?;
    let rank = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_IMAGES4_MAGIC => 4,
        found => {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: IDX_IMAGES_MAGIC,
                found,
            })
        }
    };
    let mut dims = [0usize, 0, 0, 1];
    for (i, d) in dims.iter_mut().take(rank).enumerate() {
        *d = read_u32_be(&bytes, 4 + 4 * i, path, "dimension")? as usize;
    }
    let header = 4 + 4 * rank;
    let n: usize = dims.iter().product();
    let body = &bytes[header.min(bytes.len())..];
    if body.len() < n {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("expected {n} pixel bytes, found {}", body.len()),
        });
    }
    if body.len() > n {
        return Err(Error::Format {
            what: "IDX images",
            detail: format!("{} trailing bytes in {}", body.len() - n, path.display()),
        });
    }
    Ok((dims, body.to_vec()))
}

fn parse_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let magic = read_u32_be(&bytes, 0, path, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = read_u32_be(&bytes, 4, path, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("expected {n} labels, found {}", body.len()),
        });
    }
    if body.len() > n {
        return Err(Error::Format {
            what: "IDX labels",
            detail: format!("{} trailing bytes in {}", body.len() - n, path.display()),
        });
    }
    Ok(body.to_vec())
}

/// Loads an IDX image/label file pair. Pixels are scaled by 1/255; the class
/// count is `max(label) + 1` (at least 2) and can be widened with
/// [`Dataset::with_class_count`].
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let (dims, pixels) = parse_idx_images(images_path)?;
    let labels = parse_idx_labels(labels_path)?;
    if dims[0] != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} has {} images but {} has {} labels",
            images_path.display(),
            dims[0],
            labels_path.display(),
            labels.len()
        )));
    }
    let images = Tensor::new(
        dims.to_vec(),
        pixels.iter().map(|&b| b as f32 / 255.0).collect(),
    )
    .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(images, labels, classes, split)
}

/// Quantises a `[0, 1]` pixel back to a byte.
pub fn pixel_to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes images as IDX (rank 3 when single-channel, rank 4 otherwise).
pub fn write_idx_images(images: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = images.shape();
    let mut out = Vec::with_capacity(20 + images.len());
    let dims: &[usize] = if s[3] == 1 {
        out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        &s[..3]
    } else {
        out.extend_from_slice(&IDX_IMAGES4_MAGIC.to_be_bytes());
        s
    };
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| pixel_to_byte(v)));
    write_bytes(path, &out)
}

pub fn write_idx_labels(labels: &[usize], path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &y in labels {
        let b = u8::try_from(y).map_err(|_| Error::InvalidArgument(format!("label {y} does not fit in a byte")))?;
        out.push(b);
    }
    write_bytes(path, &out)
}

pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    write_idx_images(&dataset.images, images_path)?;
    write_idx_labels(&dataset.labels, labels_path)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Side length of synthetic images.
pub const SYNTHETIC_SIDE: usize = 8;
const BLOB_RADIUS: f64 = 2.6;
const BLOB_WIDTH: f64 = 1.1;
const BLOB_JITTER: f64 = 0.25;
const PIXEL_NOISE: f64 = 0.05;

/// `class_count` Gaussian blobs placed evenly on a circle, rendered as 8x8
/// single-channel images with positional jitter and pixel noise. Labels cycle
/// through the classes, so every class gets `n / K` examples (rounded).
pub fn make_synthetic(seed: u64, n: usize, class_count: usize, split: Split) -> Result<Dataset> {
    if class_count < 2 {
        return Err(Error::InvalidArgument(format!("class_count {class_count} < 2")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs n >= 1".into()));
    }
    let side = SYNTHETIC_SIDE;
    let centre = (side as f64 - 1.0) / 2.0;
    let jitter = Normal::new(0.0, BLOB_JITTER).unwrap();
    let noise = Normal::new(0.0, PIXEL_NOISE).unwrap();
    let mut pixels = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % class_count;
        let mut rng = rng::stream(seed, &[rng::DOMAIN_SYNTHETIC, i as u64]);
        let angle = std::f64::consts::TAU * y as f64 / class_count as f64;
        let cy = centre + BLOB_RADIUS * angle.sin() + jitter.sample(&mut rng);
        let cx = centre + BLOB_RADIUS * angle.cos() + jitter.sample(&mut rng);
        for r in 0..side {
            for c in 0..side {
                let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                let v = (-d2 / (2.0 * BLOB_WIDTH * BLOB_WIDTH)).exp() + noise.sample(&mut rng);
                pixels.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        labels.push(y);
    }
    let images = Tensor::new(vec![n, side, side, 1], pixels)?;
    Dataset::new(images, labels, class_count, split)
}

/// Raw N(0, sigma^2) draws used by [`add_gaussian_noise`], before clipping.
pub fn noise_field(len: usize, sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vec![0.0; len]);
    }
    let mut rng = rng::stream(seed, &[rng::DOMAIN_NOISE]);
    let dist = Normal::new(0.0, sigma).unwrap();
    Ok((0..len).map(|_| dist.sample(&mut rng)).collect())
}

/// `clip(batch + N(0, sigma^2), 0, 1)` element-wise. Train-time only.
pub fn add_gaussian_noise<S: Scalar>(batch: &Tensor<S>, sigma: f64, seed: u64) -> Result<Tensor<S>> {
    if sigma == 0.0 {
        return Ok(batch.clone());
    }
    let noise = noise_field(batch.len(), sigma, seed)?;
    let data = batch
        .data()
        .iter()
        .zip(noise)
        .map(|(&v, e)| S::from_f64((v.as_f64() + e).clamp(0.0, 1.0)))
        .collect();
    Tensor::new(batch.shape().to_vec(), data)
}

/// Seeded epoch-wise minibatch sampler. Each epoch is a fresh permutation
/// of the dataset, cut into consecutive chunks; the last chunk may be short.
#[derive(Debug)]
pub struct BatchSampler<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchSampler<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, shuffle_seed: u64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("cannot sample from an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        let mut s = Self {
            dataset,
            batch_size,
            shuffle_seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.dataset.len()).collect();
        let mut rng = rng::stream(self.shuffle_seed, &[rng::DOMAIN_SHUFFLE, self.epoch]);
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    /// Index of the epoch the next batch belongs to.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.len().div_ceil(self.batch_size)
    }

    /// Dataset indices of the next batch; rolls over into the next epoch
    /// after the final (possibly partial) chunk.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        idx
    }

    pub fn next_batch<S: Scalar>(&mut self) -> Batch<S> {
        let idx = self.next_indices();
        self.dataset.batch(&idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(body);
        v
    }

    #[test]
    fn two_image_fixture_scales_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, idx_bytes(IDX_IMAGES_MAGIC, &[2, 2, 2], &[0, 255, 255, 0, 0, 0, 255, 255])).unwrap();
        std::fs::write(&lp, idx_bytes(IDX_LABELS_MAGIC, &[2], &[3, 7])).unwrap();
        let ds = load_idx(&ip, &lp, Split::Test).unwrap();
        assert_eq!(ds.images().shape(), &[2, 2, 2, 1]);
        assert_eq!(ds.images().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(ds.labels(), &[3, 7]);
        assert_eq!(ds.class_count(), 8);
    }

    #[test]
    fn labels_with_image_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, idx_bytes(IDX_IMAGES_MAGIC, &[1, 1, 1], &[0])).unwrap();
        std::fs::write(&lp, idx_bytes(IDX_IMAGES_MAGIC, &[1, 1, 1], &[0])).unwrap();
        let err = load_idx(&ip, &lp, Split::Train).unwrap_err();
        assert!(matches!(err, Error::BadMagic { expected: IDX_LABELS_MAGIC, .. }), "{err}");
    }

    #[test]
    fn count_mismatch_and_short_read() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, idx_bytes(IDX_IMAGES_MAGIC, &[2, 1, 1], &[0, 1])).unwrap();
        std::fs::write(&lp, idx_bytes(IDX_LABELS_MAGIC, &[3], &[0, 1, 1])).unwrap();
        assert!(matches!(load_idx(&ip, &lp, Split::Train).unwrap_err(), Error::DimensionMismatch(_)));

        std::fs::write(&ip, idx_bytes(IDX_IMAGES_MAGIC, &[3, 2, 2], &[0; 7])).unwrap();
        assert!(matches!(load_idx(&ip, &lp, Split::Train).unwrap_err(), Error::Truncated { .. }));
    }

    #[test]
    fn idx_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        let body: Vec<u8> = (0..=255u8).cycle().take(3 * 5 * 4).collect();
        let src_i = idx_bytes(IDX_IMAGES_MAGIC, &[3, 5, 4], &body);
        let src_l = idx_bytes(IDX_LABELS_MAGIC, &[3], &[9, 0, 4]);
        std::fs::write(&ip, &src_i).unwrap();
        std::fs::write(&lp, &src_l).unwrap();
        let ds = load_idx(&ip, &lp, Split::Train).unwrap();
        let (ip2, lp2) = (dir.path().join("i2"), dir.path().join("l2"));
        write_idx(&ds, &ip2, &lp2).unwrap();
        assert_eq!(std::fs::read(&ip2).unwrap(), src_i);
        assert_eq!(std::fs::read(&lp2).unwrap(), src_l);
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = make_synthetic(11, 200, 2, Split::Train).unwrap();
        let b = make_synthetic(11, 200, 2, Split::Train).unwrap();
        assert_eq!(a, b);
        let ones = a.labels().iter().filter(|&&y| y == 1).count();
        assert_eq!((200 - ones, ones), (100, 100));
        assert_eq!(a.image_shape(), [8, 8, 1]);
        assert!(make_synthetic(1, 10, 1, Split::Train).is_err());
    }

    #[test]
    fn noise_zero_sigma_is_identity_and_negative_rejected() {
        let t = Tensor::<f32>::full(&[2, 3], 0.25);
        assert_eq!(add_gaussian_noise(&t, 0.0, 1).unwrap(), t);
        assert!(add_gaussian_noise(&t, -0.1, 1).is_err());
    }

    #[test]
    fn noise_std_matches_sigma() {
        let n = 100_000;
        let img = Tensor::<f64>::full(&[n], 0.5);
        let raw = noise_field(n, 0.3, 42).unwrap();
        let mean = raw.iter().sum::<f64>() / n as f64;
        let std = (raw.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((std - 0.3).abs() < 0.05 * 0.3, "std {std}");
        // the clipped output is built from the same draws
        let out = add_gaussian_noise(&img, 0.3, 42).unwrap();
        for (o, e) in out.data().iter().zip(&raw).take(1000) {
            assert_eq!(*o, (0.5 + e).clamp(0.0, 1.0));
        }
    }

    #[test]
    fn full_batch_is_a_permutation() {
        let ds = make_synthetic(3, 37, 3, Split::Train).unwrap();
        let mut s = BatchSampler::new(&ds, 37, 5).unwrap();
        let mut idx = s.next_indices();
        assert_eq!(idx.len(), 37);
        idx.sort_unstable();
        assert_eq!(idx, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn samplers_with_same_seed_agree() {
        let ds = make_synthetic(3, 50, 3, Split::Train).unwrap();
        let mut a = BatchSampler::new(&ds, 8, 9).unwrap();
        let mut b = BatchSampler::new(&ds, 8, 9).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_batch::<f32>(), b.next_batch::<f32>());
        }
    }
}
