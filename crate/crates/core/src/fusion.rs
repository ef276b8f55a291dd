//! Rewrite passes that collapse a trained graph into its deployed form.
//!
//! Three passes run in a fixed order: batch-norm layers fold into the conv
//! that feeds them, blend activations (identity once the blend reaches 1)
//! are dropped, and each conv pair merges into a single conv. Every pass is
//! an exact linear-algebra identity, so the deployed network computes the
//! same function as the training network up to floating-point rounding;
//! [`verify_equivalence`] measures that rounding on seeded random inputs.

use serde::{Deserialize, Serialize};

use crate::graph::{ConvUnit, GraphMode, LayerGraph, Unit};
use crate::ops::{batchnorm_infer, conv2d, BatchNormParams, ConvParams};
use crate::rng;
use crate::tensor::{el, Element, Tensor};
use crate::{Error, Result, SCHEMA_VERSION};

/// One structural rewrite applied during [`fuse_network`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PassRecord {
    /// Which pass ran: `fold_bn`, `drop_blend_act`, or `merge_conv_pair`.
    pub pass: String,
    /// The layer the rewrite produced (merges name the resulting layer).
    pub layer: String,
    /// Max-abs output difference between the original and rewritten layer
    /// on a small seeded probe input. Exactly zero for activation drops.
    pub probe_deviation: f64,
}

/// Outcome of fusing and/or numerically verifying a graph pair.
///
/// [`fuse_network`] fills the structural half (`passes`, probe deviations);
/// [`verify_equivalence`] fills the numeric half (per-sample deviations,
/// `max_deviation`, `argmax_agreement`, `passed`). [`FusionReport::combine`]
/// joins the two for a single report file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionReport {
    pub schema_version: u32,
    /// Element type the graphs ran in (`f32` or `f64`).
    pub dtype: String,
    /// Every structural rewrite, in application order; empty when the input
    /// was already deployed or when the report only covers verification.
    pub passes: Vec<PassRecord>,
    /// Whether the numeric fields below were measured (a fuse without a
    /// verify leaves them at their vacuous defaults).
    pub verified: bool,
    pub num_samples: usize,
    pub tolerance: f64,
    /// Max-abs logit deviation per verification sample.
    pub per_sample_deviation: Vec<f64>,
    pub max_deviation: f64,
    /// Fraction of samples whose predicted class matched.
    pub argmax_agreement: f64,
    pub passed: bool,
}

impl FusionReport {
    fn structural<E: Element>(passes: Vec<PassRecord>) -> Self {
        FusionReport {
            schema_version: SCHEMA_VERSION,
            dtype: E::DTYPE.name().to_string(),
            passes,
            verified: false,
            num_samples: 0,
            tolerance: 0.0,
            per_sample_deviation: Vec::new(),
            max_deviation: 0.0,
            argmax_agreement: 1.0,
            passed: true,
        }
    }

    /// Join a fuse report (structural) with a verify report (numeric).
    pub fn combine(structural: &FusionReport, numeric: &FusionReport) -> FusionReport {
        let mut out = numeric.clone();
        out.passes = structural.passes.clone();
        out
    }
}

/// Fold a batch-norm layer into the conv feeding it.
///
/// With per-channel scale `s = gamma / sqrt(running_var + eps)`, the folded
/// conv has `W' = s * W` and `B' = (B - running_mean) * s + beta`, which
/// computes `bn(conv(x))` exactly in real arithmetic. The scale and bias are
/// formed in f64 and cast once, so the f32 path loses no more precision
/// than the two-op original.
pub fn fold_bn<E: Element>(conv: &ConvParams<E>, bn: &BatchNormParams<E>) -> Result<ConvParams<E>> {
    let c_out = conv.c_out();
    if bn.gamma.len() != c_out {
        return Err(Error::shape(format!(
            "bn channels {} do not match conv output channels {c_out}",
            bn.gamma.len()
        )));
    }
    let per_channel = conv.weight.len() / c_out;
    let mut weight = conv.weight.clone();
    let mut bias = conv.bias.clone();
    for c in 0..c_out {
        let scale = bn.gamma.data()[c].as_f64() / (bn.running_var.data()[c].as_f64() + bn.eps).sqrt();
        for w in &mut weight.data_mut()[c * per_channel..(c + 1) * per_channel] {
            *w = el((*w).as_f64() * scale);
        }
        let b = (conv.bias.data()[c].as_f64() - bn.running_mean.data()[c].as_f64()) * scale
            + bn.beta.data()[c].as_f64();
        bias.data_mut()[c] = el(b);
    }
    ConvParams::new(weight, bias, conv.stride, conv.padding)
}

/// Shared core of the two merge operations: compose `outer` (pointwise,
/// stride 1, no padding) after `inner`, accumulating in f64.
fn merge_into_inner<E: Element>(
    inner: &ConvParams<E>,
    outer: &ConvParams<E>,
) -> Result<ConvParams<E>> {
    if !outer.is_pointwise() || outer.stride != 1 || outer.padding != 0 {
        return Err(Error::invalid(
            "outer conv must be 1x1 with stride 1 and no padding to merge",
        ));
    }
    if outer.c_in() != inner.c_out() {
        return Err(Error::shape(format!(
            "outer conv expects {} channels but inner conv produces {}",
            outer.c_in(),
            inner.c_out()
        )));
    }
    let (c_out, c_mid) = (outer.c_out(), outer.c_in());
    let (c_in, k) = (inner.c_in(), inner.kernel());
    let tap = c_in * k * k;

    // W'[o, c, u, v] = sum_m outer[o, m] * inner[m, c, u, v]: a matrix
    // product over the mid channel, with the inner kernel taps flattened.
    let mut weight = vec![0.0f64; c_out * tap];
    let mut bias = vec![0.0f64; c_out];
    for o in 0..c_out {
        for m in 0..c_mid {
            let s = outer.weight.data()[o * c_mid + m].as_f64();
            let row = &inner.weight.data()[m * tap..(m + 1) * tap];
            let acc = &mut weight[o * tap..(o + 1) * tap];
            for (a, w) in acc.iter_mut().zip(row) {
                *a += s * w.as_f64();
            }
            bias[o] += s * inner.bias.data()[m].as_f64();
        }
        bias[o] += outer.bias.data()[o].as_f64();
    }
    ConvParams::new(
        Tensor::from_f64_vec(&[c_out, c_in, k, k], &weight)?,
        Tensor::from_f64_vec(&[c_out], &bias)?,
        inner.stride,
        inner.padding,
    )
}

/// Merge two stacked pointwise convs into one.
///
/// The merged weight is the matrix product of the outer and inner weight
/// matrices; the merged bias is `outer.W * inner.B + outer.B`. Requires both
/// convs to be 1x1 / stride 1 with no nonlinearity between them.
pub fn merge_conv_1x1<E: Element>(
    inner: &ConvParams<E>,
    outer: &ConvParams<E>,
) -> Result<ConvParams<E>> {
    if !inner.is_pointwise() || inner.stride != 1 || inner.padding != 0 {
        return Err(Error::invalid(
            "inner conv must be 1x1 with stride 1 and no padding for the pointwise merge",
        ));
    }
    merge_into_inner(inner, outer)
}

/// Merge a k x k conv followed by a pointwise conv into a single k x k conv.
///
/// Generalizes the pointwise merge so the strided patchify conv collapses
/// with its pointwise partner: the outer 1x1 mixes output channels, which
/// commutes with the spatial taps. Stride and padding come from `inner`.
pub fn merge_conv_kxk_1x1<E: Element>(
    inner: &ConvParams<E>,
    outer: &ConvParams<E>,
) -> Result<ConvParams<E>> {
    merge_into_inner(inner, outer)
}

/// Max-abs deviation between `bn(conv(x))` and `folded(x)` on a small
/// seeded probe, recorded per fold so the report carries a per-layer error.
fn fold_probe<E: Element>(
    rng: &mut rng::Prng,
    conv: &ConvParams<E>,
    bn: &BatchNormParams<E>,
    folded: &ConvParams<E>,
) -> Result<f64> {
    let k = conv.kernel().max(conv.stride);
    let x = rng::normal_tensor::<E>(rng, &[1, conv.c_in(), k, k], 1.0);
    let two_op = batchnorm_infer(&conv2d(&x, conv)?, bn)?;
    let one_op = conv2d(&x, folded)?;
    Ok(two_op.max_abs_diff(&one_op)?)
}

/// Max-abs deviation between the sequential pair and the merged conv on a
/// small seeded probe.
fn merge_probe<E: Element>(
    rng: &mut rng::Prng,
    inner: &ConvParams<E>,
    outer: &ConvParams<E>,
    merged: &ConvParams<E>,
) -> Result<f64> {
    let k = inner.kernel().max(inner.stride);
    let x = rng::normal_tensor::<E>(rng, &[1, inner.c_in(), k, k], 1.0);
    let two_op = conv2d(&conv2d(&x, inner)?, outer)?;
    let one_op = conv2d(&x, merged)?;
    Ok(two_op.max_abs_diff(&one_op)?)
}

fn fold_unit<E: Element>(
    unit: &ConvUnit<E>,
    rng: &mut rng::Prng,
    passes: &mut Vec<PassRecord>,
) -> Result<ConvParams<E>> {
    match &unit.bn {
        Some(bn) => {
            let folded = fold_bn(&unit.conv, bn)?;
            passes.push(PassRecord {
                pass: "fold_bn".to_string(),
                layer: unit.name.clone(),
                probe_deviation: fold_probe(rng, &unit.conv, bn, &folded)?,
            });
            Ok(folded)
        }
        None => Ok(unit.conv.clone()),
    }
}

/// The deployed layer name for a training-mode conv pair: `<block>.conv1` /
/// `<block>.conv2` collapse to `<block>.conv`.
fn merged_name(conv1_name: &str) -> String {
    match conv1_name.strip_suffix(".conv1") {
        Some(base) => format!("{base}.conv"),
        None => conv1_name.to_string(),
    }
}

/// Collapse a training graph into its deployed form.
///
/// Pass order is fixed: fold every batch norm into its conv, drop the blend
/// activations (identity at blend 1), then merge each conv pair. The blend
/// value the network was trained to must be exactly 1 when any blend
/// activation is present — fusing earlier would change the function, so the
/// call refuses rather than approximates. A graph already in deploy mode
/// passes through unchanged with an empty pass list.
pub fn fuse_network<E: Element>(
    graph: &LayerGraph<E>,
    lambda_current: f64,
) -> Result<(LayerGraph<E>, FusionReport)> {
    if graph.mode == GraphMode::Deploy {
        return Ok((graph.clone(), FusionReport::structural::<E>(Vec::new())));
    }
    if !(0.0..=1.0).contains(&lambda_current) {
        return Err(Error::invalid(format!(
            "blend value {lambda_current} outside [0, 1]"
        )));
    }
    let has_blend = graph.units.iter().any(|u| matches!(u, Unit::LambdaAct));
    if has_blend && lambda_current < 1.0 {
        return Err(Error::Fusion(format!(
            "cannot fuse: blend activation not identity (current value {lambda_current}, needs 1)"
        )));
    }

    let mut probe_rng = rng::seeded(0xF0_5E);
    let mut passes = Vec::new();
    let mut units: Vec<Unit<E>> = Vec::new();
    let mut i = 0;
    while i < graph.units.len() {
        match &graph.units[i] {
            Unit::Conv(first) => {
                let folded_first = fold_unit(first, &mut probe_rng, &mut passes)?;
                // A conv directly followed by blend-act + conv is a training
                // pair; anything else stays a single conv.
                let pair = match (graph.units.get(i + 1), graph.units.get(i + 2)) {
                    (Some(Unit::LambdaAct), Some(Unit::Conv(second))) => Some(second),
                    _ => None,
                };
                match pair {
                    Some(second) => {
                        let name = merged_name(&first.name);
                        passes.push(PassRecord {
                            pass: "drop_blend_act".to_string(),
                            layer: name.clone(),
                            probe_deviation: 0.0,
                        });
                        let folded_second = fold_unit(second, &mut probe_rng, &mut passes)?;
                        let merged = merge_conv_kxk_1x1(&folded_first, &folded_second)?;
                        passes.push(PassRecord {
                            pass: "merge_conv_pair".to_string(),
                            layer: name.clone(),
                            probe_deviation: merge_probe(
                                &mut probe_rng,
                                &folded_first,
                                &folded_second,
                                &merged,
                            )?,
                        });
                        units.push(Unit::Conv(ConvUnit {
                            name,
                            conv: merged,
                            bn: None,
                        }));
                        i += 3;
                    }
                    None => {
                        units.push(Unit::Conv(ConvUnit {
                            name: first.name.clone(),
                            conv: folded_first,
                            bn: None,
                        }));
                        i += 1;
                    }
                }
            }
            Unit::LambdaAct => {
                return Err(Error::Fusion(format!(
                    "structural mismatch: blend activation at unit {i} has no surrounding conv pair"
                )));
            }
            other => {
                units.push(other.clone());
                i += 1;
            }
        }
    }

    let fused = LayerGraph {
        spec: graph.spec.clone(),
        mode: GraphMode::Deploy,
        lambda: 1.0,
        units,
    };
    // The deployed graph must be free of normalization and blend units; a
    // violation means the walk above mis-parsed the structure.
    for unit in &fused.units {
        let clean = match unit {
            Unit::Conv(c) => c.bn.is_none(),
            Unit::LambdaAct => false,
            _ => true,
        };
        if !clean {
            return Err(Error::Fusion(format!(
                "structural mismatch: fused graph still contains normalization or blend state in `{}`",
                unit.name()
            )));
        }
    }
    Ok((fused, FusionReport::structural::<E>(passes)))
}

/// Run two graphs on seeded random inputs and compare their logits.
///
/// Each sample is a fresh standard-normal image at the spec's input size;
/// both graphs evaluate it in inference mode (running statistics). The
/// report carries per-sample and overall max-abs logit deviation, the
/// fraction of samples whose predicted class agreed, and a pass flag
/// against `tol`.
pub fn verify_equivalence<E: Element>(
    a: &LayerGraph<E>,
    b: &LayerGraph<E>,
    num_samples: usize,
    tol: f64,
    seed: u64,
) -> Result<FusionReport> {
    if num_samples == 0 {
        return Err(Error::invalid("verification needs at least one sample"));
    }
    if !(tol.is_finite() && tol >= 0.0) {
        return Err(Error::invalid(format!("tolerance {tol} must be finite and >= 0")));
    }
    let (sa, sb) = (&a.spec, &b.spec);
    if (sa.in_channels, sa.input_size, sa.num_classes)
        != (sb.in_channels, sb.input_size, sb.num_classes)
    {
        return Err(Error::shape(
            "graphs disagree on input channels, input size, or class count",
        ));
    }

    let mut rng = rng::seeded(seed);
    let mut per_sample = Vec::with_capacity(num_samples);
    let mut agreed = 0usize;
    for _ in 0..num_samples {
        let x = rng::normal_tensor::<E>(
            &mut rng,
            &[1, sa.in_channels, sa.input_size, sa.input_size],
            1.0,
        );
        let la = a.forward_infer(&x)?;
        let lb = b.forward_infer(&x)?;
        per_sample.push(la.max_abs_diff(&lb)?);
        if argmax(la.data()) == argmax(lb.data()) {
            agreed += 1;
        }
    }
    let max_deviation = per_sample.iter().cloned().fold(0.0f64, f64::max);
    Ok(FusionReport {
        schema_version: SCHEMA_VERSION,
        dtype: E::DTYPE.name().to_string(),
        passes: Vec::new(),
        verified: true,
        num_samples,
        tolerance: tol,
        per_sample_deviation: per_sample,
        max_deviation,
        argmax_agreement: agreed as f64 / num_samples as f64,
        passed: max_deviation <= tol,
    })
}

fn argmax<E: Element>(row: &[E]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fuse a graph and verify the result against the original in one step.
pub fn fuse_and_verify<E: Element>(
    graph: &LayerGraph<E>,
    lambda_current: f64,
    num_samples: usize,
    tol: f64,
    seed: u64,
) -> Result<(LayerGraph<E>, FusionReport)> {
    let (fused, structural) = fuse_network(graph, lambda_current)?;
    let numeric = verify_equivalence(graph, &fused, num_samples, tol, seed)?;
    Ok((fused, FusionReport::combine(&structural, &numeric)))
}
