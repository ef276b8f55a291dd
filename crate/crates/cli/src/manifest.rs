//! The run manifest: a structured record of one training run, complete
//! enough that replaying its config and seed reproduces the numbers.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vanillanet::arch::ArchSpec;
use vanillanet::train::{EpochMetrics, TrainConfig};
use vanillanet::Result;

/// What was trained on, as recorded — raw geometry plus the adjustments
/// the driver made before handing the data to the network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataDescription {
    pub source: String,
    pub samples: usize,
    pub classes: usize,
    pub channels: usize,
    /// Raw image height/width before any padding.
    pub height: usize,
    pub width: usize,
    /// Edge the images were zero-padded to, when padding was needed.
    pub padded_to: Option<usize>,
    pub standardized: bool,
}

/// One epoch's metrics plus how long it took.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRow {
    #[serde(flatten)]
    pub metrics: EpochMetrics,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    /// Short content id over everything that determines the run's numbers:
    /// architecture, training config, data description, seed, and dtype.
    /// Wall-clock fields are deliberately excluded.
    pub run_id: String,
    pub created_unix: u64,
    pub dtype: String,
    pub deterministic: bool,
    pub seed: u64,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub data: DataDescription,
    pub epochs: Vec<EpochRow>,
    pub total_secs: f64,
    pub checkpoint: String,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Twelve hex digits of the SHA-256 over the run-defining fields, in the
/// spirit of a short commit id.
pub fn run_id(
    arch: &ArchSpec,
    train: &TrainConfig,
    data: &DataDescription,
    seed: u64,
    dtype: &str,
) -> Result<String> {
    #[derive(Serialize)]
    struct Key<'a> {
        arch: &'a ArchSpec,
        train: &'a TrainConfig,
        data: &'a DataDescription,
        seed: u64,
        dtype: &'a str,
    }
    let bytes = serde_json::to_vec(&Key {
        arch,
        train,
        data,
        seed,
        dtype,
    })?;
    let digest = Sha256::digest(&bytes);
    Ok(digest[..6].iter().map(|b| format!("{b:02x}")).collect())
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc() -> DataDescription {
        DataDescription {
            source: "synthetic".into(),
            samples: 512,
            classes: 10,
            channels: 3,
            height: 32,
            width: 32,
            padded_to: None,
            standardized: false,
        }
    }

    #[test]
    fn run_id_is_stable_and_sensitive() {
        let arch = ArchSpec::new(6);
        let train = TrainConfig::default();
        let a = run_id(&arch, &train, &desc(), 0, "f32").unwrap();
        let b = run_id(&arch, &train, &desc(), 0, "f32").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        assert!(a.chars().all(|c| c.is_ascii_hexdigit()));

        assert_ne!(a, run_id(&arch, &train, &desc(), 1, "f32").unwrap());
        assert_ne!(a, run_id(&arch, &train, &desc(), 0, "f64").unwrap());
        let mut other = ArchSpec::new(6);
        other.act_radius = 0;
        assert_ne!(a, run_id(&other, &train, &desc(), 0, "f32").unwrap());
    }

    #[test]
    fn epoch_rows_flatten_metrics() {
        let row = EpochRow {
            metrics: EpochMetrics {
                epoch: 2,
                lambda: 1.0,
                lr: 1e-3,
                loss: 0.5,
                accuracy: 0.9,
                samples: 512,
                batches: 4,
            },
            wall_secs: 1.5,
        };
        let v: serde_json::Value = serde_json::to_value(&row).unwrap();
        assert_eq!(v["epoch"], 2);
        assert_eq!(v["wall_secs"], 1.5);
        let back: EpochRow = serde_json::from_value(v).unwrap();
        assert_eq!(back.metrics.batches, 4);
    }
}
