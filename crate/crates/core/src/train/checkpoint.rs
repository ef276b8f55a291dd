//! Checkpoint persistence with a bit-exact binary format.
//!
//! Layout:
//!
//! ```text
//! b"VNCK"                      magic
//! u32 LE                       format version (currently 1)
//! u64 LE + bytes               metadata document (JSON, see CheckpointMeta)
//! repeated until end of file:  tensor record
//!   u64 LE + bytes             tensor name (UTF-8)
//!   u8                         element tag (1 = f32, 2 = f64)
//!   u32 LE                     rank
//!   rank x u64 LE              dimensions
//!   raw little-endian values   product-of-dims elements
//! ```
//!
//! Round-trips are bitwise-lossless: saving a loaded checkpoint reproduces
//! the file byte for byte. Loading rejects malformed files outright — there
//! is no partial state to clean up.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptState, OptimizerKind};
use crate::arch::{self, ArchSpec};
use crate::graph::{GraphMode, LayerGraph};
use crate::tensor::{DType, Element, Tensor};
use crate::{Error, Result, SCHEMA_VERSION};

const MAGIC: [u8; 4] = *b"VNCK";
const FORMAT_VERSION: u32 = 1;

/// Optimizer identity stored alongside its tensors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptMeta {
    pub kind: OptimizerKind,
    pub step: u64,
}

/// The metadata document embedded in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub arch: ArchSpec,
    pub mode: GraphMode,
    /// Epochs completed when the checkpoint was written.
    pub epoch: usize,
    pub lambda: f64,
    pub seed: u64,
    pub dtype: String,
    #[serde(default)]
    pub optimizer: Option<OptMeta>,
}

fn write_tensor<E: Element>(out: &mut impl Write, name: &str, t: &Tensor<E>) -> Result<()> {
    out.write_all(&(name.len() as u64).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&[E::DTYPE.tag()])?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut bytes = Vec::with_capacity(t.len() * E::DTYPE.size_bytes());
    for &v in t.data() {
        v.write_le(&mut bytes);
    }
    out.write_all(&bytes)?;
    Ok(())
}

/// Write the graph's full state (and optionally the optimizer's) plus
/// metadata; returns the metadata it embedded.
pub fn save_checkpoint<E: Element>(
    path: &Path,
    graph: &LayerGraph<E>,
    epoch: usize,
    seed: u64,
    opt: Option<&OptState<E>>,
) -> Result<CheckpointMeta> {
    let meta = CheckpointMeta {
        schema_version: SCHEMA_VERSION,
        arch: graph.spec.clone(),
        mode: graph.mode,
        epoch,
        lambda: graph.lambda,
        seed,
        dtype: E::DTYPE.name().to_string(),
        optimizer: opt.map(|o| OptMeta {
            kind: o.kind(),
            step: o.step_count(),
        }),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&meta_bytes)?;
    for (name, tensor) in graph.state_tensors() {
        write_tensor(&mut out, &name, tensor)?;
    }
    if let Some(opt) = opt {
        for (name, tensor) in opt.export_tensors() {
            write_tensor(&mut out, &name, tensor)?;
        }
    }
    out.flush()?;
    Ok(meta)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| bad(format!("truncated while reading {what}: {e}")))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

struct RawCheckpoint<E: Element> {
    meta: CheckpointMeta,
    tensors: BTreeMap<String, Tensor<E>>,
}

fn read_checkpoint<E: Element>(path: &Path) -> Result<RawCheckpoint<E>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(bad(format!(
            "not a checkpoint: bad magic {magic:02x?} in {}",
            path.display()
        )));
    }
    let mut ver = [0u8; 4];
    read_exact(&mut r, &mut ver, "format version")?;
    let ver = u32::from_le_bytes(ver);
    if ver != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported checkpoint format version {ver} (this build reads {FORMAT_VERSION})"
        )));
    }
    let meta_len = read_u64(&mut r, "metadata length")? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact(&mut r, &mut meta_bytes, "metadata")?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| bad(format!("metadata does not parse: {e}")))?;
    if meta.dtype != E::DTYPE.name() {
        return Err(bad(format!(
            "checkpoint holds {} tensors but {} was requested",
            meta.dtype,
            E::DTYPE.name()
        )));
    }

    let mut tensors = BTreeMap::new();
    loop {
        // A clean end of file between records ends the tensor section.
        let mut len_buf = [0u8; 8];
        match r.read(&mut len_buf)? {
            0 => break,
            n if n < 8 => {
                read_exact(&mut r, &mut len_buf[n..], "tensor name length")?;
            }
            _ => {}
        }
        let name_len = u64::from_le_bytes(len_buf) as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let mut tag = [0u8; 1];
        read_exact(&mut r, &mut tag, "element tag")?;
        let dtype =
            DType::from_tag(tag[0]).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
        if dtype != E::DTYPE {
            return Err(bad(format!(
                "tensor `{name}` is {} but {} was requested",
                dtype.name(),
                E::DTYPE.name()
            )));
        }
        let mut rank = [0u8; 4];
        read_exact(&mut r, &mut rank, "rank")?;
        let rank = u32::from_le_bytes(rank) as usize;
        if rank > 8 {
            return Err(bad(format!("implausible rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, "dimension")? as usize);
        }
        let len: usize = shape.iter().product();
        let mut payload = vec![0u8; len * E::DTYPE.size_bytes()];
        read_exact(&mut r, &mut payload, &format!("values of `{name}`"))?;
        let data: Vec<E> = payload
            .chunks_exact(E::DTYPE.size_bytes())
            .map(E::read_le)
            .collect();
        if tensors.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
            return Err(bad(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(RawCheckpoint { meta, tensors })
}

/// Load a checkpoint into a freshly built graph of its stored architecture.
///
/// Every graph tensor must be present with its exact shape, and nothing
/// but graph and optimizer tensors may appear — this is the strict loader
/// for resuming or deploying. Returns the optimizer state when the
/// checkpoint carries one.
pub fn load_checkpoint<E: Element>(
    path: &Path,
) -> Result<(LayerGraph<E>, CheckpointMeta, Option<OptState<E>>)> {
    let RawCheckpoint { meta, mut tensors } = read_checkpoint::<E>(path)?;
    let mut graph = arch::build::<E>(&meta.arch, meta.mode, 0)?;
    graph.lambda = meta.lambda;
    for (name, slot) in graph.state_tensors_mut() {
        let stored = tensors
            .remove(&name)
            .ok_or_else(|| bad(format!("checkpoint is missing tensor `{name}`")))?;
        if stored.shape() != slot.shape() {
            return Err(bad(format!(
                "tensor `{name}` has shape {:?} but the graph needs {:?}",
                stored.shape(),
                slot.shape()
            )));
        }
        *slot = stored;
    }
    let opt = match &meta.optimizer {
        Some(om) => {
            let opt_tensors: BTreeMap<String, Tensor<E>> = std::mem::take(&mut tensors);
            Some(OptState::from_parts(om.kind, om.step, opt_tensors)?)
        }
        None => None,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor `{extra}` in checkpoint")));
    }
    Ok((graph, meta, opt))
}

/// Copy every stored tensor whose name and shape match into `graph`,
/// returning the sorted names of graph tensors the checkpoint did not
/// cover (still carrying their fresh initialization).
///
/// This is the deeper-variant warm start: a shallower network's layers
/// seed the matching prefix of a deeper one.
pub fn load_compatible<E: Element>(path: &Path, graph: &mut LayerGraph<E>) -> Result<Vec<String>> {
    let RawCheckpoint { tensors, .. } = read_checkpoint::<E>(path)?;
    let mut fresh = Vec::new();
    for (name, slot) in graph.state_tensors_mut() {
        match tensors.get(&name) {
            Some(stored) if stored.shape() == slot.shape() => *slot = stored.clone(),
            _ => fresh.push(name),
        }
    }
    fresh.sort();
    Ok(fresh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::build;
    use crate::data::synthetic_blobs;
    use crate::rng;
    use crate::train::{fit, TrainConfig};

    fn tiny_spec(variant: u8) -> ArchSpec {
        let mut spec = ArchSpec::new(variant);
        spec.width_scale = 1.0 / 32.0;
        spec.input_size = 16;
        spec.reduced_pool = true;
        spec.num_classes = 4;
        spec
    }

    /// A graph with non-trivial running statistics and optimizer state.
    fn trained(variant: u8) -> (LayerGraph<f32>, OptState<f32>) {
        let data = synthetic_blobs(4, 24, 16, 3).unwrap();
        let mut g = build::<f32>(&tiny_spec(variant), GraphMode::Train, 7).unwrap();
        let mut opt = OptState::new(OptimizerKind::adamw());
        let cfg = TrainConfig {
            epochs: 2,
            warmup_epochs: 0,
            batch_size: 8,
            ..TrainConfig::default()
        };
        fit(&mut g, &mut opt, &data, &cfg, |_| Ok(())).unwrap();
        (g, opt)
    }

    #[test]
    fn round_trip_is_bitwise_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.vnck");
        let p2 = dir.path().join("b.vnck");
        let (g, opt) = trained(5);
        save_checkpoint(&p1, &g, 2, 7, Some(&opt)).unwrap();

        let (loaded, meta, loaded_opt) = load_checkpoint::<f32>(&p1).unwrap();
        assert_eq!(meta.epoch, 2);
        assert_eq!(meta.lambda, g.lambda);
        assert_eq!(meta.optimizer.unwrap().step, opt.step_count());

        // Logits agree bitwise on a fixed input.
        let x = rng::normal_tensor::<f32>(&mut rng::seeded(9), &[2, 3, 16, 16], 1.0);
        let a = g.forward_infer(&x).unwrap();
        let b = loaded.forward_infer(&x).unwrap();
        assert_eq!(a.data(), b.data());

        // Saving the loaded state reproduces the file exactly.
        save_checkpoint(&p2, &loaded, meta.epoch, meta.seed, loaded_opt.as_ref()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn optimizer_state_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bare.vnck");
        let (g, _) = trained(5);
        save_checkpoint(&p, &g, 1, 0, None).unwrap();
        let (_, meta, opt) = load_checkpoint::<f32>(&p).unwrap();
        assert!(meta.optimizer.is_none());
        assert!(opt.is_none());
    }

    #[test]
    fn deeper_variant_warm_start_reports_fresh_layers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v5.vnck");
        let (g5, _) = trained(5);
        save_checkpoint(&p, &g5, 2, 7, None).unwrap();

        let mut g6 = build::<f32>(&tiny_spec(6), GraphMode::Train, 0).unwrap();
        let fresh = load_compatible(&p, &mut g6).unwrap();

        // Name-set difference oracle: exactly the tensors the shallower
        // variant lacks stay fresh.
        let names = |g: &LayerGraph<f32>| {
            g.state_tensors()
                .into_iter()
                .map(|(n, _)| n)
                .collect::<std::collections::BTreeSet<_>>()
        };
        let expected: Vec<String> = names(&g6).difference(&names(&g5)).cloned().collect();
        assert_eq!(fresh, expected);
        assert!(fresh.iter().all(|n| n.starts_with("stage4.")), "{fresh:?}");

        // Matched layers carry the trained values.
        let stem_after = g6
            .state_tensors()
            .into_iter()
            .find(|(n, _)| n == "stem.conv1.weight")
            .unwrap()
            .1
            .clone();
        let stem_before = g5
            .state_tensors()
            .into_iter()
            .find(|(n, _)| n == "stem.conv1.weight")
            .unwrap()
            .1
            .clone();
        assert_eq!(stem_after.data(), stem_before.data());
    }

    #[test]
    fn corrupt_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.vnck");
        let (g, _) = trained(5);
        save_checkpoint(&p, &g, 0, 0, None).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        let err = load_checkpoint::<f32>(&p).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncation_and_dtype_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.vnck");
        let (g, _) = trained(5);
        save_checkpoint(&p, &g, 0, 0, None).unwrap();

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(load_checkpoint::<f32>(&p).is_err());

        std::fs::write(&p, &bytes).unwrap();
        let err = load_checkpoint::<f64>(&p).unwrap_err();
        assert!(err.to_string().contains("f32"), "{err}");
    }

    #[test]
    fn missing_tensor_rejected() {
        // Save a shallower variant, strict-load as a deeper one by editing
        // the metadata's variant field: the loader must notice the missing
        // stage rather than partially fill the graph.
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.vnck");
        let (g, _) = trained(5);
        save_checkpoint(&p, &g, 0, 0, None).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let needle = b"\"variant\":5";
        let pos = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        bytes[pos + needle.len() - 1] = b'6';
        std::fs::write(&p, &bytes).unwrap();
        let err = load_checkpoint::<f32>(&p).unwrap_err();
        assert!(err.to_string().contains("missing tensor"), "{err}");
    }
}
