//! Dataset ingestion, normalization, augmentation, and batch ordering.
//!
//! Two on-disk formats are supported bit-exactly — the IDX image/label pair
//! and the 3073-byte-record CIFAR-10 binary — plus fully offline synthetic
//! generators that emit the same formats so every pipeline stage can be
//! exercised without downloads. Loaded pixel values always land in [0, 1];
//! per-channel standardization is a separate, explicit step.

mod augment;
mod cifar;
mod idx;
mod synthetic;

pub use augment::augment_batch;
pub use cifar::{load_cifar10, write_cifar10, CIFAR_RECORD_BYTES};
pub use idx::{load_idx, write_idx_images, write_idx_labels};
pub use synthetic::{
    synthetic_blobs, synthetic_blobs_with_noise, synthetic_digits, synthetic_two_marker,
};

use std::sync::mpsc;
use std::sync::OnceLock;

use crate::rng;
use crate::tensor::{el, Element, Tensor};
use crate::{Error, Result};

/// Per-channel first and second moments of a dataset, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// An in-memory labeled image set, stored as `f32` planes in `(N, C, H, W)`
/// order. Element-type conversion happens at batch-gather time so one loaded
/// dataset serves both `f32` and `f64` networks.
#[derive(Debug)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<u32>,
    channels: usize,
    height: usize,
    width: usize,
    class_count: usize,
    /// Provenance tag carried into run metadata (`train`, `test`, ...).
    split: String,
    stats: OnceLock<ChannelStats>,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        let stats = OnceLock::new();
        if let Some(s) = self.stats.get() {
            let _ = stats.set(s.clone());
        }
        Dataset {
            images: self.images.clone(),
            labels: self.labels.clone(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            class_count: self.class_count,
            split: self.split.clone(),
            stats,
        }
    }
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<u32>,
        channels: usize,
        height: usize,
        width: usize,
        class_count: usize,
        split: impl Into<String>,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Data("image dimensions must be non-zero".into()));
        }
        if class_count < 2 {
            return Err(Error::Data("class_count must be >= 2".into()));
        }
        let per_sample = channels * height * width;
        if images.len() != labels.len() * per_sample {
            return Err(Error::Data(format!(
                "{} pixel values do not hold {} samples of {} values each",
                images.len(),
                labels.len(),
                per_sample
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            channels,
            height,
            width,
            class_count,
            split: split.into(),
            stats: OnceLock::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    /// Copy the given samples into a batch tensor plus their labels.
    pub fn gather<E: Element>(&self, indices: &[usize]) -> Result<(Tensor<E>, Vec<u32>)> {
        if indices.is_empty() {
            return Err(Error::Data("cannot gather an empty batch".into()));
        }
        let n = self.sample_len();
        let mut out = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            out.extend(self.sample(i).iter().map(|&v| el::<E>(v as f64)));
            labels.push(self.label(i));
        }
        let x = Tensor::from_vec(
            &[indices.len(), self.channels, self.height, self.width],
            out,
        )?;
        Ok((x, labels))
    }

    /// Per-channel mean and standard deviation, computed on first use and
    /// cached for the dataset's lifetime.
    pub fn channel_stats(&self) -> &ChannelStats {
        self.stats.get_or_init(|| {
            let plane = self.height * self.width;
            let mut mean = vec![0.0f64; self.channels];
            let mut sq = vec![0.0f64; self.channels];
            for i in 0..self.len() {
                let s = self.sample(i);
                for c in 0..self.channels {
                    for &v in &s[c * plane..(c + 1) * plane] {
                        mean[c] += v as f64;
                        sq[c] += (v as f64) * (v as f64);
                    }
                }
            }
            let count = (self.len() * plane) as f64;
            let mut std = vec![0.0f64; self.channels];
            for c in 0..self.channels {
                mean[c] /= count;
                let var = (sq[c] / count - mean[c] * mean[c]).max(0.0);
                // Floor keeps constant channels usable.
                std[c] = var.sqrt().max(1e-6);
            }
            ChannelStats { mean, std }
        })
    }

    /// Standardize every channel in place using this dataset's own cached
    /// statistics; returns the statistics used so a paired evaluation split
    /// can apply the same transform via [`Dataset::standardize_with`].
    pub fn standardize(&mut self) -> ChannelStats {
        let stats = self.channel_stats().clone();
        self.standardize_with(&stats);
        stats
    }

    /// Standardize with externally supplied statistics (e.g. the training
    /// split's, applied to the test split).
    pub fn standardize_with(&mut self, stats: &ChannelStats) {
        let plane = self.height * self.width;
        let per_sample = self.sample_len();
        for i in 0..self.labels.len() {
            let s = &mut self.images[i * per_sample..(i + 1) * per_sample];
            for c in 0..self.channels {
                let (m, d) = (stats.mean[c] as f32, stats.std[c] as f32);
                for v in &mut s[c * plane..(c + 1) * plane] {
                    *v = (*v - m) / d;
                }
            }
        }
        self.stats = OnceLock::new();
    }

    /// Keep only the first `n` samples (handy for quick smoke runs).
    pub fn truncated(mut self, n: usize) -> Self {
        let keep = n.min(self.len());
        self.images.truncate(keep * self.sample_len());
        self.labels.truncate(keep);
        self.stats = OnceLock::new();
        self
    }

    /// Zero-pad every image out to `size` x `size`, centered (extra pixel on
    /// the bottom/right when the difference is odd). The stem stride and the
    /// pooling ladder need side lengths divisible by the network's total
    /// downsampling factor; 28x28 inputs become 32x32 this way. Shrinking is
    /// not supported — asking for a smaller size is an error.
    pub fn padded_to(&self, size: usize) -> Result<Self> {
        if size < self.height || size < self.width {
            return Err(Error::Data(format!(
                "cannot pad {}x{} images down to {size}x{size}",
                self.height, self.width
            )));
        }
        if size == self.height && size == self.width {
            return Ok(self.clone());
        }
        let top = (size - self.height) / 2;
        let left = (size - self.width) / 2;
        let mut images = vec![0.0f32; self.len() * self.channels * size * size];
        let old_plane = self.height * self.width;
        let new_plane = size * size;
        for i in 0..self.len() {
            let src = self.sample(i);
            let dst = &mut images[i * self.channels * new_plane..];
            for c in 0..self.channels {
                for h in 0..self.height {
                    let s = c * old_plane + h * self.width;
                    let d = c * new_plane + (top + h) * size + left;
                    dst[d..d + self.width].copy_from_slice(&src[s..s + self.width]);
                }
            }
        }
        Dataset::new(
            images,
            self.labels.clone(),
            self.channels,
            size,
            size,
            self.class_count,
            &self.split,
        )
    }
}

/// The sample visit order for one epoch. A fixed `(seed, epoch)` pair always
/// produces the same order; `shuffle = false` is file order.
pub fn epoch_order(len: usize, shuffle: bool, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        // Stream 1+epoch keeps the shuffle independent of any other
        // consumer of the base seed.
        let mut rng = rng::seeded_stream(seed, 1 + epoch);
        rng::shuffle(&mut rng, &mut order);
    }
    order
}

/// Feed gathered batches to `consume`, optionally decoding ahead of the
/// consumer on a second thread.
///
/// `prefetch = 0` gathers inline. Otherwise a producer thread pushes batches
/// into a channel holding at most `prefetch` of them, blocking when the
/// consumer falls behind (bounded memory, backpressure). The batch content
/// and order are identical either way — the thread only overlaps decode
/// time with compute time.
pub fn for_each_batch<E: Element>(
    data: &Dataset,
    order: &[usize],
    batch_size: usize,
    prefetch: usize,
    mut consume: impl FnMut(Tensor<E>, Vec<u32>) -> Result<()>,
) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    if prefetch == 0 {
        for chunk in order.chunks(batch_size) {
            let (x, y) = data.gather::<E>(chunk)?;
            consume(x, y)?;
        }
        return Ok(());
    }
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<(Tensor<E>, Vec<u32>)>>(prefetch);
        scope.spawn(move || {
            for chunk in order.chunks(batch_size) {
                // A send failure means the consumer bailed; stop producing.
                if tx.send(data.gather::<E>(chunk)).is_err() {
                    return;
                }
            }
        });
        for item in rx {
            let (x, y) = item?;
            consume(x, y)?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        // 3 samples, 2 channels, 2x2: pixel value = sample index / 10 in
        // channel 0, constant 0.5 in channel 1.
        let mut images = Vec::new();
        for i in 0..3 {
            images.extend(std::iter::repeat(i as f32 / 10.0).take(4));
            images.extend(std::iter::repeat(0.5f32).take(4));
        }
        Dataset::new(images, vec![0, 1, 0], 2, 2, 2, 2, "train").unwrap()
    }

    #[test]
    fn validation_rejects_bad_shapes_and_labels() {
        assert!(Dataset::new(vec![0.0; 8], vec![0, 0], 1, 2, 2, 2, "t").is_ok());
        assert!(Dataset::new(vec![0.0; 7], vec![0, 0], 1, 2, 2, 2, "t").is_err());
        assert!(Dataset::new(vec![0.0; 8], vec![0, 2], 1, 2, 2, 2, "t").is_err());
        assert!(Dataset::new(vec![0.0; 8], vec![0, 0], 1, 2, 2, 1, "t").is_err());
    }

    #[test]
    fn gather_layout_and_types() {
        let d = tiny();
        let (x, y) = d.gather::<f64>(&[2, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 2, 2, 2]);
        assert_eq!(y, vec![0, 0]);
        assert!((x.data()[0] - 0.2).abs() < 1e-7);
        assert_eq!(x.data()[4], 0.5);
        assert!((x.data()[8] - 0.0).abs() < 1e-7);
        assert!(d.gather::<f64>(&[3]).is_err());
        assert!(d.gather::<f64>(&[]).is_err());
    }

    #[test]
    fn channel_stats_match_direct_computation() {
        let d = tiny();
        let s = d.channel_stats();
        // Channel 0 holds values {0.0, 0.1, 0.2} x4 each.
        assert!((s.mean[0] - 0.1).abs() < 1e-7);
        assert!((s.mean[1] - 0.5).abs() < 1e-12);
        let var0 = (0.01 + 0.0 + 0.01) / 3.0;
        assert!((s.std[0] - f64::sqrt(var0)).abs() < 1e-7);
        // Constant channel hits the floor instead of zero.
        assert_eq!(s.std[1], 1e-6);
        // Cached: same reference on second call.
        assert!(std::ptr::eq(s, d.channel_stats()));
    }

    #[test]
    fn standardize_zeroes_mean_and_scales() {
        let mut d = tiny();
        d.standardize();
        let s = d.channel_stats();
        assert!(s.mean[0].abs() < 1e-6);
        assert!((s.std[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn padding_centers_content_and_preserves_values() {
        let d = tiny();
        let p = d.padded_to(5).unwrap();
        assert_eq!((p.height(), p.width()), (5, 5));
        assert_eq!(p.labels(), d.labels());
        // 2x2 content lands at rows/cols 1..3 (floor-centered), channel 1
        // carries the constant 0.5 there and zero elsewhere.
        let s = p.sample(1);
        let plane = 25;
        let mut sum = 0.0;
        for h in 0..5 {
            for w in 0..5 {
                let v = s[plane + h * 5 + w];
                let inside = (1..3).contains(&h) && (1..3).contains(&w);
                assert_eq!(v, if inside { 0.5 } else { 0.0 });
                sum += v;
            }
        }
        assert_eq!(sum, 2.0);
        // Same size is a plain copy; shrinking is refused.
        assert_eq!(d.padded_to(2).unwrap().sample(0), d.sample(0));
        assert!(d.padded_to(1).is_err());
    }

    #[test]
    fn epoch_order_is_deterministic_and_complete() {
        let a = epoch_order(100, true, 7, 3);
        let b = epoch_order(100, true, 7, 3);
        assert_eq!(a, b);
        assert_ne!(a, epoch_order(100, true, 7, 4));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_eq!(epoch_order(5, false, 7, 3), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn prefetch_matches_inline_batching() {
        let d = synthetic_blobs(3, 30, 8, 5).unwrap();
        let order = epoch_order(d.len(), true, 1, 0);
        let collect = |prefetch: usize| {
            let mut seen: Vec<(Vec<f64>, Vec<u32>)> = Vec::new();
            for_each_batch::<f64>(&d, &order, 7, prefetch, |x, y| {
                seen.push((x.data().to_vec(), y));
                Ok(())
            })
            .unwrap();
            seen
        };
        assert_eq!(collect(0), collect(2));
    }

    #[test]
    fn batch_size_zero_rejected() {
        let d = tiny();
        let err = for_each_batch::<f32>(&d, &[0], 0, 0, |_, _| Ok(()));
        assert!(err.is_err());
    }
}
