//! Dataset acquisition and the desk-scale input profile.
//!
//! Training takes its input geometry from the data rather than the other
//! way around: images are zero-padded up to the nearest edge the pooling
//! stack accepts, and inputs at desk scale default to the reduced-pool
//! profile so the final feature map keeps spatial extent for the series
//! activations to aggregate. Both adjustments land in the run manifest.

use std::path::Path;

use vanillanet::data::{
    load_cifar10, load_idx, synthetic_blobs, synthetic_digits, synthetic_two_marker, Dataset,
};
use vanillanet::{Error, Result};

use crate::args::SourceKind;
use crate::config::{ArchChoice, DataChoice};
use crate::manifest::DataDescription;

/// Largest input edge treated as desk scale: at or below it, training
/// defaults to the reduced-pool profile.
pub const DESK_EDGE: usize = 64;

/// Sample count for generated sources when none is given.
const DEFAULT_SAMPLES: usize = 512;

/// A dataset sized for a network, plus the geometry decisions made on the
/// way there.
pub struct Prepared {
    pub data: Dataset,
    /// Final square input edge (after any padding).
    pub input_size: usize,
    /// Whether the reduced-pool profile applies.
    pub reduced_pool: bool,
    pub desc: DataDescription,
}

/// The generated sources share the run's base seed with weight
/// initialization; rotate it so the two consumers do not walk the same
/// random stream.
fn data_seed(seed: u64) -> u64 {
    seed.rotate_left(17) ^ 0x9e37_79b9_7f4a_7c15
}

/// One line describing the source for manifests and reports.
fn describe(choice: &DataChoice, source: SourceKind) -> String {
    match source {
        SourceKind::Idx => format!(
            "idx:{},{}",
            path_str(choice.images.as_deref()),
            path_str(choice.labels.as_deref())
        ),
        SourceKind::Cifar => format!("cifar:{} files", choice.files.len()),
        other => other.name().to_string(),
    }
}

fn path_str(p: Option<&Path>) -> String {
    p.map_or_else(|| "?".into(), |p| p.display().to_string())
}

/// Turn raw pixel/label bytes from a generator into a dataset, scaling
/// pixels the same way the file loaders do.
fn from_u8(
    pixels: Vec<u8>,
    labels: Vec<u8>,
    channels: usize,
    h: usize,
    w: usize,
    classes: usize,
) -> Result<Dataset> {
    Dataset::new(
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        labels.iter().map(|&l| l as u32).collect(),
        channels,
        h,
        w,
        classes,
        "train",
    )
}

/// Load the source as-is. `classes` and `size` steer the blob generator
/// only; file sources and the fixed-layout generators bring their own.
fn load_raw(choice: &DataChoice, classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    let samples = choice.samples.unwrap_or(DEFAULT_SAMPLES);
    match choice.source.unwrap_or(SourceKind::Synthetic) {
        SourceKind::Synthetic => synthetic_blobs(classes, samples, size, data_seed(seed)),
        SourceKind::Digits => {
            let (pixels, labels) = synthetic_digits(samples, data_seed(seed));
            from_u8(pixels, labels, 1, 28, 28, 10)
        }
        SourceKind::Markers => {
            let (pixels, labels) = synthetic_two_marker(samples, data_seed(seed));
            from_u8(pixels, labels, 3, 32, 32, 10)
        }
        SourceKind::Idx => match (&choice.images, &choice.labels) {
            (Some(images), Some(labels)) => load_idx(images, labels),
            _ => Err(Error::invalid(
                "--data idx needs both --images and --labels",
            )),
        },
        SourceKind::Cifar => {
            if choice.files.is_empty() {
                return Err(Error::invalid("--data cifar needs at least one --files entry"));
            }
            load_cifar10(&choice.files)
        }
    }
}

/// Load for training: decide the pooling profile, pad to a legal edge,
/// optionally standardize.
pub fn prepare(choice: &DataChoice, arch: &ArchChoice, seed: u64) -> Result<Prepared> {
    let source = choice.source.unwrap_or(SourceKind::Synthetic);
    let gen_classes = arch.classes.unwrap_or(10);
    let gen_size = arch.input_size.unwrap_or(32);
    let raw = load_raw(choice, gen_classes, gen_size, seed)?;

    let edge = raw.height().max(raw.width());
    let reduced_pool = arch.reduced_pool.unwrap_or(edge <= DESK_EDGE);
    let divisor: usize = if reduced_pool { 16 } else { 32 };
    let target = match arch.input_size {
        Some(t) if t % divisor == 0 && t >= edge => t,
        Some(t) => {
            return Err(Error::invalid(format!(
                "--input-size {t} must be a multiple of {divisor} and at least the data edge {edge}"
            )))
        }
        None => edge.next_multiple_of(divisor),
    };

    let needs_pad = target != raw.height() || target != raw.width();
    let (height, width) = (raw.height(), raw.width());
    let mut data = if needs_pad { raw.padded_to(target)? } else { raw };

    let standardized = choice.standardize.unwrap_or(false);
    if standardized {
        data.standardize();
    }

    let desc = DataDescription {
        source: describe(choice, source),
        samples: data.len(),
        classes: data.class_count(),
        channels: data.channels(),
        height,
        width,
        padded_to: needs_pad.then_some(target),
        standardized,
    };
    Ok(Prepared {
        data,
        input_size: target,
        reduced_pool,
        desc,
    })
}

/// Load for evaluation against an existing network: the geometry is fixed
/// by the checkpoint, so the data must fit it (padding up is fine, any
/// other mismatch is an error).
pub fn prepare_for_spec(
    choice: &DataChoice,
    spec: &vanillanet::arch::ArchSpec,
    seed: u64,
) -> Result<(Dataset, DataDescription)> {
    let source = choice.source.unwrap_or(SourceKind::Synthetic);
    let raw = load_raw(choice, spec.num_classes, spec.input_size, seed)?;
    if raw.channels() != spec.in_channels {
        return Err(Error::Data(format!(
            "dataset has {} channels but the network expects {}",
            raw.channels(),
            spec.in_channels
        )));
    }
    if raw.class_count() > spec.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes but the network only scores {}",
            raw.class_count(),
            spec.num_classes
        )));
    }
    let (height, width) = (raw.height(), raw.width());
    let needs_pad = spec.input_size != height || spec.input_size != width;
    let mut data = if needs_pad {
        raw.padded_to(spec.input_size)?
    } else {
        raw
    };
    let standardized = choice.standardize.unwrap_or(false);
    if standardized {
        data.standardize();
    }
    let desc = DataDescription {
        source: describe(choice, source),
        samples: data.len(),
        classes: data.class_count(),
        channels: data.channels(),
        height,
        width,
        padded_to: needs_pad.then_some(spec.input_size),
        standardized,
    };
    Ok((data, desc))
}
