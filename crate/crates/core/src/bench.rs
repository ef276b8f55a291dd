//! Wall-clock latency measurement for forward passes.
//!
//! Reports order statistics over repeated single-input inference, with a
//! warmup phase discarded so allocator and cache effects settle before
//! timing starts. Absolute numbers are hardware-local; the intended use is
//! paired comparison (same machine, same process) such as fused vs unfused.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::graph::LayerGraph;
use crate::rng;
use crate::tensor::Element;
use crate::{Error, Result, SCHEMA_VERSION};

/// Latency summary in milliseconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub batch: usize,
    pub warmup: usize,
    pub iters: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

/// Linear-interpolated percentile of an ascending-sorted sample.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Time `iters` inference passes on one fixed random batch after `warmup`
/// untimed passes.
pub fn bench_forward<E: Element>(
    graph: &LayerGraph<E>,
    batch: usize,
    iters: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchReport> {
    if iters == 0 {
        return Err(Error::invalid("bench needs at least one timed iteration"));
    }
    if batch == 0 {
        return Err(Error::invalid("batch must be >= 1"));
    }
    let spec = &graph.spec;
    let x = rng::normal_tensor::<E>(
        &mut rng::seeded(seed),
        &[batch, spec.in_channels, spec.input_size, spec.input_size],
        1.0,
    );
    for _ in 0..warmup {
        graph.forward_infer(&x)?;
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        graph.forward_infer(&x)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(BenchReport {
        schema_version: SCHEMA_VERSION,
        batch,
        warmup,
        iters,
        median_ms: percentile(&times, 0.5),
        mean_ms: times.iter().sum::<f64>() / iters as f64,
        p10_ms: percentile(&times, 0.1),
        p90_ms: percentile(&times, 0.9),
        min_ms: times[0],
        max_ms: times[iters - 1],
    })
}
