//! CIFAR-10 binary-batch parsing and writing.
//!
//! Each record is 3073 bytes: one label byte followed by 3072 pixel bytes
//! laid out as three 1024-byte planes (red, green, blue), each a 32x32
//! row-major image. A batch file is a plain concatenation of records.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::Dataset;
use crate::{Error, Result};

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

/// Load one or more binary batch files into a 10-class `(N,3,32,32)`
/// dataset scaled to [0, 1].
pub fn load_cifar10(batch_files: &[impl AsRef<Path>]) -> Result<Dataset> {
    if batch_files.is_empty() {
        return Err(Error::Data("no batch files given".into()));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in batch_files {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::Data(format!(
                "{} holds {} bytes, not a multiple of the {CIFAR_RECORD_BYTES}-byte record",
                path.display(),
                bytes.len()
            )));
        }
        for record in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
            let label = record[0];
            if label > 9 {
                return Err(Error::Data(format!(
                    "label byte {label} out of range in {}",
                    path.display()
                )));
            }
            labels.push(label as u32);
            images.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    Dataset::new(images, labels, 3, 32, 32, 10, "cifar10")
}

/// Write records in the binary batch layout. `pixels` holds 3072 bytes per
/// sample in the same plane order the loader expects.
pub fn write_cifar10(path: &Path, labels: &[u8], pixels: &[u8]) -> Result<()> {
    if pixels.len() != labels.len() * 3072 {
        return Err(Error::invalid(format!(
            "{} pixel bytes do not form {} records",
            pixels.len(),
            labels.len()
        )));
    }
    let mut out = BufWriter::new(File::create(path)?);
    for (i, &label) in labels.iter().enumerate() {
        if label > 9 {
            return Err(Error::invalid(format!("label {label} out of range")));
        }
        out.write_all(&[label])?;
        out.write_all(&pixels[i * 3072..(i + 1) * 3072])?;
    }
    out.flush()?;
    Ok(())
}
