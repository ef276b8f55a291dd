//! Configuration layering.
//!
//! Every run is described by three layers merged field by field, later
//! layers winning: built-in defaults, an optional TOML config file, and
//! explicit flags. The merge product is a set of `*Choice` structs whose
//! fields are still optional, so each command can tell "the user chose
//! this" apart from "fill in my default" — training, for instance, takes
//! input geometry from the data unless a flag or file key pins it.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use vanillanet::arch::{ArchSpec, ShortcutMode};
use vanillanet::ops::LossKind;
use vanillanet::train::{OptimizerKind, TrainConfig};
use vanillanet::{Error, Result};

use crate::args::{ArchArgs, DataArgs, Dtype, GlobalArgs, SourceKind, TrainFlags};

/// The config file: top-level keys plus one section per flag group. Key
/// names match the long flag names with underscores.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub dtype: Option<String>,
    pub deterministic: Option<bool>,
    #[serde(default)]
    pub arch: ArchFile,
    #[serde(default)]
    pub train: TrainFile,
    #[serde(default)]
    pub data: DataFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchFile {
    pub variant: Option<u8>,
    pub width_scale: Option<f64>,
    pub series_n: Option<usize>,
    pub input_size: Option<usize>,
    pub in_channels: Option<usize>,
    pub classes: Option<usize>,
    pub shortcut: Option<String>,
    pub reduced_pool: Option<bool>,
    pub deep_train: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub epochs: Option<usize>,
    pub deep_epochs: Option<usize>,
    pub warmup_epochs: Option<usize>,
    pub base_lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<String>,
    pub momentum: Option<f64>,
    pub loss: Option<String>,
    pub label_smoothing: Option<f64>,
    pub flip_prob: Option<f64>,
    pub crop_padding: Option<usize>,
    pub shuffle: Option<bool>,
    pub prefetch: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFile {
    pub source: Option<String>,
    pub samples: Option<usize>,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub files: Option<Vec<PathBuf>>,
    pub standardize: Option<bool>,
}

/// Read and parse the config file; no file means an empty layer. Problems
/// here are usage errors — the file is part of the command line.
pub fn load_file(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))
}

/// Fully resolved global options.
#[derive(Debug, Clone, Copy)]
pub struct Global {
    pub seed: u64,
    pub dtype: Dtype,
    pub deterministic: bool,
}

pub fn resolve_global(args: &GlobalArgs, file: &FileConfig) -> Result<Global> {
    let dtype = match args.dtype {
        Some(d) => d,
        None => match &file.dtype {
            Some(s) => s.parse()?,
            None => Dtype::F32,
        },
    };
    Ok(Global {
        seed: args.seed.or(file.seed).unwrap_or(0),
        dtype,
        deterministic: args.deterministic || file.deterministic.unwrap_or(false),
    })
}

/// Architecture choices after merging flags over the file, defaults not
/// yet applied.
#[derive(Debug, Clone, Default)]
pub struct ArchChoice {
    pub variant: Option<u8>,
    pub width_scale: Option<f64>,
    pub series_n: Option<usize>,
    pub input_size: Option<usize>,
    pub in_channels: Option<usize>,
    pub classes: Option<usize>,
    pub shortcut: Option<ShortcutMode>,
    pub reduced_pool: Option<bool>,
    pub deep_train: Option<bool>,
}

impl ArchChoice {
    pub fn merged(flags: &ArchArgs, file: &ArchFile) -> Result<Self> {
        let shortcut = match (flags.shortcut, &file.shortcut) {
            (Some(s), _) => Some(s),
            (None, Some(text)) => Some(text.parse()?),
            (None, None) => None,
        };
        Ok(ArchChoice {
            variant: flags.variant.or(file.variant),
            width_scale: flags.width_scale.or(file.width_scale),
            series_n: flags.series_n.or(file.series_n),
            input_size: flags.input_size.or(file.input_size),
            in_channels: flags.in_channels.or(file.in_channels),
            classes: flags.classes.or(file.classes),
            shortcut,
            reduced_pool: flags.reduced_pool.or(file.reduced_pool),
            deep_train: flags.deep_train.or(file.deep_train),
        })
    }

    /// Overwrite exactly the fields the user chose.
    pub fn apply(&self, spec: &mut ArchSpec) {
        if let Some(v) = self.width_scale {
            spec.width_scale = v;
        }
        if let Some(v) = self.series_n {
            spec.act_radius = v;
        }
        if let Some(v) = self.input_size {
            spec.input_size = v;
        }
        if let Some(v) = self.in_channels {
            spec.in_channels = v;
        }
        if let Some(v) = self.classes {
            spec.num_classes = v;
        }
        if let Some(v) = self.shortcut {
            spec.shortcut = v;
        }
        if let Some(v) = self.reduced_pool {
            spec.reduced_pool = v;
        }
        if let Some(v) = self.deep_train {
            spec.deep_train = v;
        }
    }

    /// Finalize against the reference defaults (variant 6, full width,
    /// radius 3, RGB 224, 1000 classes) — what `count` and a flag-built
    /// `bench` use, so their numbers line up with the published tables.
    pub fn finalize_reference(&self) -> Result<ArchSpec> {
        let mut spec = ArchSpec::new(self.variant.unwrap_or(6));
        self.apply(&mut spec);
        spec.validate()?;
        Ok(spec)
    }
}

/// Training-loop choices after merging flags over the file.
#[derive(Debug, Clone, Default)]
pub struct TrainChoice {
    pub epochs: Option<usize>,
    pub deep_epochs: Option<usize>,
    pub warmup_epochs: Option<usize>,
    pub base_lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<OptimizerKind>,
    pub momentum: Option<f64>,
    pub loss: Option<LossKind>,
    pub label_smoothing: Option<f64>,
    pub flip_prob: Option<f64>,
    pub crop_padding: Option<usize>,
    pub shuffle: Option<bool>,
    pub prefetch: Option<usize>,
}

impl TrainChoice {
    pub fn merged(flags: &TrainFlags, file: &TrainFile) -> Result<Self> {
        let optimizer = match (flags.optimizer, &file.optimizer) {
            (Some(k), _) => Some(k),
            (None, Some(text)) => Some(text.parse()?),
            (None, None) => None,
        };
        let loss = match (flags.loss, &file.loss) {
            (Some(k), _) => Some(k),
            (None, Some(text)) => Some(text.parse()?),
            (None, None) => None,
        };
        Ok(TrainChoice {
            epochs: flags.epochs.or(file.epochs),
            deep_epochs: flags.deep_epochs.or(file.deep_epochs),
            warmup_epochs: flags.warmup_epochs.or(file.warmup_epochs),
            base_lr: flags.base_lr.or(file.base_lr),
            weight_decay: flags.weight_decay.or(file.weight_decay),
            batch_size: flags.batch_size.or(file.batch_size),
            optimizer,
            momentum: flags.momentum.or(file.momentum),
            loss,
            label_smoothing: flags.label_smoothing.or(file.label_smoothing),
            flip_prob: flags.flip_prob.or(file.flip_prob),
            crop_padding: flags.crop_padding.or(file.crop_padding),
            shuffle: flags.shuffle.or(file.shuffle),
            prefetch: flags.prefetch.or(file.prefetch),
        })
    }

    /// Produce the concrete training config, validated.
    pub fn finalize(&self, seed: u64, deterministic: bool) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if self.deep_epochs.is_some() {
            cfg.deep_epochs = self.deep_epochs;
        }
        match self.warmup_epochs {
            Some(v) => cfg.warmup_epochs = v,
            // The default warmup must not make a short run invalid: cap it
            // at half the run and let an explicit choice say otherwise.
            None => cfg.warmup_epochs = cfg.warmup_epochs.min(cfg.epochs / 2),
        }
        if let Some(v) = self.base_lr {
            cfg.base_lr = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        cfg.optimizer = match (self.optimizer, self.momentum) {
            (None, None) => cfg.optimizer,
            (None, Some(_)) => {
                return Err(Error::invalid(
                    "--momentum needs --optimizer sgd (the default is adamw)",
                ))
            }
            (Some(OptimizerKind::SgdMomentum { .. }), Some(momentum)) => {
                OptimizerKind::SgdMomentum { momentum }
            }
            (Some(OptimizerKind::AdamW { .. }), Some(_)) => {
                return Err(Error::invalid("--momentum does not apply to adamw"))
            }
            (Some(kind), None) => kind,
        };
        if let Some(v) = self.loss {
            cfg.loss = v;
        }
        if let Some(v) = self.label_smoothing {
            cfg.label_smoothing = v;
        }
        if let Some(v) = self.flip_prob {
            cfg.flip_prob = v;
        }
        if let Some(v) = self.crop_padding {
            cfg.crop_padding = v;
        }
        if let Some(v) = self.shuffle {
            cfg.shuffle = v;
        }
        if let Some(v) = self.prefetch {
            cfg.prefetch = v;
        }
        cfg.seed = seed;
        if deterministic {
            // Prefetch does not change batch content, but inline decode
            // removes the one thread a strict run has no use for.
            cfg.prefetch = 0;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Dataset choices after merging flags over the file.
#[derive(Debug, Clone, Default)]
pub struct DataChoice {
    pub source: Option<SourceKind>,
    pub samples: Option<usize>,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub files: Vec<PathBuf>,
    pub standardize: Option<bool>,
}

impl DataChoice {
    pub fn merged(flags: &DataArgs, file: &DataFile) -> Result<Self> {
        let source = match (flags.data, &file.source) {
            (Some(s), _) => Some(s),
            (None, Some(text)) => Some(text.parse()?),
            (None, None) => None,
        };
        let files = if flags.files.is_empty() {
            file.files.clone().unwrap_or_default()
        } else {
            flags.files.clone()
        };
        Ok(DataChoice {
            source,
            samples: flags.samples.or(file.samples),
            images: flags.images.clone().or_else(|| file.images.clone()),
            labels: flags.labels.clone().or_else(|| file.labels.clone()),
            files,
            standardize: flags.standardize.or(file.standardize),
        })
    }
}
