//! Deterministic synthetic dataset generators.
//!
//! Three families cover the test and demo needs without any downloads:
//! class-conditional Gaussian blobs (linearly separable sanity data), glyph
//! digits emitted as IDX-format bytes, and a two-marker relative-position
//! task emitted as CIFAR-format bytes. The byte-level generators are meant
//! to be written to disk and read back through the real loaders so the full
//! ingestion path is exercised.

use super::Dataset;
use crate::rng;
use crate::Result;

/// Class-conditional Gaussian blobs with the default noise level.
///
/// Each class owns a blob center (on a circle) and a channel emphasis;
/// samples jitter the center and add pixel noise. Same seed, same bytes.
pub fn synthetic_blobs(
    num_classes: usize,
    samples: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset> {
    synthetic_blobs_with_noise(num_classes, samples, size, seed, 0.08)
}

/// [`synthetic_blobs`] with an explicit pixel-noise standard deviation;
/// zero noise makes the task exactly solvable by a nearest-centroid rule.
pub fn synthetic_blobs_with_noise(
    num_classes: usize,
    samples: usize,
    size: usize,
    seed: u64,
    noise_std: f64,
) -> Result<Dataset> {
    let mut rng = rng::seeded(seed);
    let channels = 3usize;
    let mut images = Vec::with_capacity(samples * channels * size * size);
    let mut labels = Vec::with_capacity(samples);
    let mid = (size as f64 - 1.0) / 2.0;
    let ring = size as f64 / 3.5;
    let sigma = size as f64 / 6.0;
    let jitter = size as f64 / 16.0;

    for i in 0..samples {
        // Round-robin assignment keeps the class histogram balanced.
        let class = i % num_classes;
        labels.push(class as u32);
        let phi = std::f64::consts::TAU * class as f64 / num_classes as f64;
        let cy = mid + ring * phi.sin() + rng::uniform(&mut rng, -jitter, jitter);
        let cx = mid + ring * phi.cos() + rng::uniform(&mut rng, -jitter, jitter);
        for c in 0..channels {
            // Each class emphasizes one channel so color alone is also
            // informative.
            let weight = if class % channels == c { 1.0 } else { 0.35 };
            for y in 0..size {
                for x in 0..size {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let mut v = weight * (-d2 / (2.0 * sigma * sigma)).exp();
                    if noise_std > 0.0 {
                        v += noise_std * rng::normal(&mut rng);
                    }
                    images.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    Dataset::new(images, labels, channels, size, size, num_classes, "blobs")
}

/// 5x7 bitmaps for the digits 0-9; each byte holds one row in its low 5
/// bits, most significant bit leftmost.
const GLYPHS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

const DIGIT_SIZE: usize = 28;
const GLYPH_SCALE: usize = 3; // 5x7 glyph -> 15x21 block

/// Render digit images in the classic 28x28 single-channel layout, returned
/// as raw pixel bytes plus label bytes, ready for the IDX writer.
///
/// Each sample scales a 5x7 glyph by 3, jitters its position and contrast,
/// and sits on a noisy background — crisp enough to learn quickly, varied
/// enough that memorizing single pixels does not suffice.
pub fn synthetic_digits(samples: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = rng::seeded(seed);
    let mut pixels = Vec::with_capacity(samples * DIGIT_SIZE * DIGIT_SIZE);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let class = i % 10;
        labels.push(class as u8);
        let x0 = rng::uniform(&mut rng, 3.0, 10.0) as usize;
        let y0 = rng::uniform(&mut rng, 0.0, 7.0) as usize;
        let fg = rng::uniform(&mut rng, 180.0, 255.0);
        let mut img = [0u8; DIGIT_SIZE * DIGIT_SIZE];
        for v in img.iter_mut() {
            *v = rng::uniform(&mut rng, 0.0, 40.0) as u8;
        }
        for (gy, row) in GLYPHS[class].iter().enumerate() {
            for gx in 0..5 {
                if row & (0b10000 >> gx) == 0 {
                    continue;
                }
                for dy in 0..GLYPH_SCALE {
                    for dx in 0..GLYPH_SCALE {
                        let y = y0 + gy * GLYPH_SCALE + dy;
                        let x = x0 + gx * GLYPH_SCALE + dx;
                        img[y * DIGIT_SIZE + x] = fg as u8;
                    }
                }
            }
        }
        pixels.extend_from_slice(&img);
    }
    (pixels, labels)
}

const MARKER_SIZE: usize = 32;

/// Render the two-marker relative-position task as CIFAR-format bytes
/// (3072 pixel bytes per sample, R/G/B planes) plus label bytes.
///
/// Every image holds a red 3x3 marker and a green 3x3 marker on a noisy
/// background; the class (0-9) is the direction sector of the green marker
/// relative to the red one. Solving it requires relating two positions
/// several pixels apart, which rewards activations that aggregate spatial
/// context.
pub fn synthetic_two_marker(samples: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = rng::seeded(seed);
    let plane = MARKER_SIZE * MARKER_SIZE;
    let mut pixels = Vec::with_capacity(samples * 3 * plane);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let class = i % 10;
        labels.push(class as u8);
        let mut img = vec![0u8; 3 * plane];
        for v in img.iter_mut() {
            *v = rng::uniform(&mut rng, 0.0, 60.0) as u8;
        }

        // Direction sector with a margin so rounding never crosses the
        // sector boundary; distance far enough that the pair spans feature
        // cells.
        let sector = std::f64::consts::TAU / 10.0;
        let theta = sector * class as f64 + rng::uniform(&mut rng, 0.12 * sector, 0.88 * sector);
        let dist = rng::uniform(&mut rng, 8.0, 12.0);
        let (dy, dx) = (
            (dist * theta.sin()).round() as isize,
            (dist * theta.cos()).round() as isize,
        );

        // Red marker position so both markers sit fully inside the frame.
        let lim = (MARKER_SIZE - 2) as isize;
        let ry_lo = (1 - dy.min(0)).max(1);
        let ry_hi = (lim - dy.max(0)).min(lim);
        let rx_lo = (1 - dx.min(0)).max(1);
        let rx_hi = (lim - dx.max(0)).min(lim);
        let ry = rng::uniform(&mut rng, ry_lo as f64, ry_hi as f64).round() as isize;
        let rx = rng::uniform(&mut rng, rx_lo as f64, rx_hi as f64).round() as isize;
        let amp = rng::uniform(&mut rng, 200.0, 255.0) as u8;

        let mut stamp = |plane_idx: usize, cy: isize, cx: isize| {
            for y in cy - 1..=cy + 1 {
                for x in cx - 1..=cx + 1 {
                    img[plane_idx * plane + y as usize * MARKER_SIZE + x as usize] = amp;
                }
            }
        };
        stamp(0, ry, rx); // red
        stamp(1, ry + dy, rx + dx); // green
        pixels.extend_from_slice(&img);
    }
    (pixels, labels)
}
