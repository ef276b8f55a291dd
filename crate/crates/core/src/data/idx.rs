//! IDX image/label file pair parsing and writing.
//!
//! The format is the classic big-endian one: a `u32` magic (0x00000803 for
//! rank-3 `u8` image files, 0x00000801 for rank-1 `u8` label files), the
//! dimension sizes as big-endian `u32`s, then raw bytes. Parsing is
//! all-or-nothing: any structural problem rejects the file without
//! constructing a partial dataset.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Dataset;
use crate::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Data(format!("truncated while reading {what}: {e}")))?;
    Ok(u32::from_be_bytes(buf))
}

fn read_bytes(r: &mut impl Read, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Data(format!("truncated while reading {what}: {e}")))?;
    // Trailing garbage means the file is not what it claims to be.
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(buf),
        Ok(_) => Err(Error::Data(format!("{what} has trailing bytes"))),
        Err(e) => Err(Error::Data(format!("error after reading {what}: {e}"))),
    }
}

/// Load an images-file / labels-file pair into a single-channel dataset
/// scaled to [0, 1]. The image shape comes from the file header (28x28 for
/// the classic digit sets, but any size parses).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut ir = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut ir, "image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Data(format!(
            "bad image magic {magic:#010x} (expected {IMAGE_MAGIC:#010x}) in {}",
            images_path.display()
        )));
    }
    let n = read_u32_be(&mut ir, "image count")? as usize;
    let h = read_u32_be(&mut ir, "image rows")? as usize;
    let w = read_u32_be(&mut ir, "image cols")? as usize;
    let pixels = read_bytes(&mut ir, n * h * w, "image data")?;

    let mut lr = BufReader::new(File::open(labels_path)?);
    let magic = read_u32_be(&mut lr, "label magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Data(format!(
            "bad label magic {magic:#010x} (expected {LABEL_MAGIC:#010x}) in {}",
            labels_path.display()
        )));
    }
    let ln = read_u32_be(&mut lr, "label count")? as usize;
    if ln != n {
        return Err(Error::Data(format!(
            "image file holds {n} samples but label file holds {ln}"
        )));
    }
    let labels = read_bytes(&mut lr, ln, "label data")?;

    let class_count = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(2);
    Dataset::new(
        pixels.iter().map(|&b| b as f32 / 255.0).collect(),
        labels.iter().map(|&l| l as u32).collect(),
        1,
        h,
        w,
        class_count.max(2),
        "idx",
    )
}

/// Write an IDX image file from raw `u8` pixel planes.
pub fn write_idx_images(path: &Path, n: usize, h: usize, w: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != n * h * w {
        return Err(Error::invalid(format!(
            "{} pixel bytes do not form {n} images of {h}x{w}",
            pixels.len()
        )));
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&IMAGE_MAGIC.to_be_bytes())?;
    out.write_all(&(n as u32).to_be_bytes())?;
    out.write_all(&(h as u32).to_be_bytes())?;
    out.write_all(&(w as u32).to_be_bytes())?;
    out.write_all(pixels)?;
    out.flush()?;
    Ok(())
}

/// Write an IDX label file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&LABEL_MAGIC.to_be_bytes())?;
    out.write_all(&(labels.len() as u32).to_be_bytes())?;
    out.write_all(labels)?;
    out.flush()?;
    Ok(())
}
