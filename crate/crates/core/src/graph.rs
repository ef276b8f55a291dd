//! The runtime network: a flat list of units executed in order, with enough
//! cached state to run an exact backward pass.
//!
//! Two structural modes exist. `Train` graphs carry each conv as a pair of
//! convolutions with batch norm and a lambda-blended ReLU between them;
//! `Deploy` graphs carry the collapsed single-conv form with no
//! normalization. Both execute through the same unit walk.

use crate::act::{
    lambda_relu, lambda_relu_backward, series_backward, series_forward, SeriesActParams,
    SeriesCache,
};
use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::ops::{
    avgpool2, avgpool2_backward, batchnorm_backward, batchnorm_forward_stats, batchnorm_infer,
    batchnorm_train, conv2d, conv2d_backward, global_avgpool, global_avgpool_backward, maxpool2,
    maxpool2_backward, BatchNormParams, BnCache, ConvParams, MaxPoolCache,
};
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

/// Structural form of the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphMode {
    /// Dual convs + batch norm + lambda activation per block.
    Train,
    /// Collapsed single convs, no batch norm, plain series activations.
    Deploy,
}

/// A convolution with optional batch norm (present in train-mode blocks,
/// absent after fusion and on the classifier).
#[derive(Debug, Clone)]
pub struct ConvUnit<E: Element> {
    pub name: String,
    pub conv: ConvParams<E>,
    pub bn: Option<BatchNormParams<E>>,
}

/// A series-informed activation with its per-channel parameters.
#[derive(Debug, Clone)]
pub struct SeriesUnit<E: Element> {
    pub name: String,
    pub params: SeriesActParams<E>,
}

/// One step of the network walk.
#[derive(Debug, Clone)]
pub enum Unit<E: Element> {
    Conv(ConvUnit<E>),
    /// Lambda-blended ReLU between the two convs of a train-mode block.
    LambdaAct,
    SeriesAct(SeriesUnit<E>),
    /// 2x2 stride-2 max pool.
    MaxPool,
    /// Global average pool down to 1x1.
    GlobalPool,
    /// Remember the current activation in `slot` for a later skip add.
    SkipSave(usize),
    /// Add the remembered activation (2x2-average-pooled first when
    /// `pooled`), zero-padding channels if the width grew.
    SkipAdd { slot: usize, pooled: bool },
}

impl<E: Element> Unit<E> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Unit::Conv(_) => "conv",
            Unit::LambdaAct => "lambda_act",
            Unit::SeriesAct(_) => "series_act",
            Unit::MaxPool => "maxpool",
            Unit::GlobalPool => "global_avgpool",
            Unit::SkipSave(_) => "skip_save",
            Unit::SkipAdd { .. } => "skip_add",
        }
    }

    pub fn name(&self) -> String {
        match self {
            Unit::Conv(c) => c.name.clone(),
            Unit::SeriesAct(s) => s.name.clone(),
            other => other.kind_name().to_string(),
        }
    }
}

/// Which statistics batch norm uses during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnUse {
    /// Batch statistics; also folds them into the running averages.
    BatchUpdate,
    /// Batch statistics without touching the running averages.
    BatchFrozen,
    /// Running averages (inference).
    Running,
}

/// Parameter classes, used for weight decay and gradient bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    SeriesA,
    SeriesB,
}

impl ParamKind {
    /// Weight decay applies only to multiplicative conv/series weights,
    /// never to biases, shifts, or normalization affines.
    pub fn decayed(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::SeriesA)
    }

    pub fn label(self) -> &'static str {
        match self {
            ParamKind::ConvWeight => "conv.weight",
            ParamKind::ConvBias => "conv.bias",
            ParamKind::BnGamma => "bn.gamma",
            ParamKind::BnBeta => "bn.beta",
            ParamKind::SeriesA => "series.a",
            ParamKind::SeriesB => "series.b",
        }
    }
}

/// Per-unit cache from a training forward pass.
#[derive(Debug, Clone)]
pub enum UnitCache<E: Element> {
    None,
    Conv {
        /// Conv output before normalization (input to the BN backward).
        pre_bn: Option<Tensor<E>>,
        bn: Option<BnCache>,
    },
    Pool(MaxPoolCache),
    Series(SeriesCache<E>),
}

/// Everything the backward pass needs from a forward pass: the activation
/// flowing into each unit (`flows[i]`), per-unit caches, and the logits.
#[derive(Debug)]
pub struct ForwardTrace<E: Element> {
    pub flows: Vec<Tensor<E>>,
    pub caches: Vec<UnitCache<E>>,
    pub logits: Tensor<E>,
}

/// Gradients for one unit, parallel to the unit list.
#[derive(Debug, Clone)]
pub enum UnitGrads<E: Element> {
    None,
    Conv {
        dw: Tensor<E>,
        db: Tensor<E>,
        dgamma: Option<Tensor<E>>,
        dbeta: Option<Tensor<E>>,
    },
    Series {
        da: Tensor<E>,
        db: Tensor<E>,
    },
}

/// Gradients for the whole graph, in unit order.
#[derive(Debug)]
pub struct GradStore<E: Element> {
    pub units: Vec<UnitGrads<E>>,
}

impl<E: Element> GradStore<E> {
    /// Flatten to `(kind, tensor)` pairs in the same order as
    /// [`LayerGraph::params`].
    pub fn flat(&self) -> Vec<(ParamKind, &Tensor<E>)> {
        let mut out = Vec::new();
        for g in &self.units {
            match g {
                UnitGrads::None => {}
                UnitGrads::Conv {
                    dw,
                    db,
                    dgamma,
                    dbeta,
                } => {
                    out.push((ParamKind::ConvWeight, dw));
                    out.push((ParamKind::ConvBias, db));
                    if let Some(g) = dgamma {
                        out.push((ParamKind::BnGamma, g));
                    }
                    if let Some(b) = dbeta {
                        out.push((ParamKind::BnBeta, b));
                    }
                }
                UnitGrads::Series { da, db } => {
                    out.push((ParamKind::SeriesA, da));
                    out.push((ParamKind::SeriesB, db));
                }
            }
        }
        out
    }
}

/// The network: spec, structural mode, current lambda, and the unit walk.
#[derive(Debug, Clone)]
pub struct LayerGraph<E: Element> {
    pub spec: ArchSpec,
    pub mode: GraphMode,
    pub lambda: f64,
    pub units: Vec<Unit<E>>,
}

impl<E: Element> LayerGraph<E> {
    /// Number of skip slots the forward pass must provision.
    pub fn skip_slots(&self) -> usize {
        count_slots(&self.units)
    }

    /// Inference forward pass: running BN statistics, no trace.
    pub fn forward_infer(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        walk_units_ro(&self.units, self.lambda, x, BnUse::Running, false).map(|(y, _)| y)
    }

    /// Training forward pass: batch BN statistics (running averages updated),
    /// full trace for the backward pass.
    pub fn forward_train(&mut self, x: &Tensor<E>) -> Result<ForwardTrace<E>> {
        let (logits, trace) = walk_units_mut(&mut self.units, self.lambda, x, true)?;
        let mut trace = trace.expect("trace requested");
        trace.logits = logits;
        Ok(trace)
    }

    /// Batch-statistics forward without trace or running-average updates.
    pub fn forward_frozen(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        walk_units_ro(&self.units, self.lambda, x, BnUse::BatchFrozen, false).map(|(y, _)| y)
    }

    /// Like [`forward_train`] but side-effect free (running averages are not
    /// updated); returns the trace. The gradient checker differentiates this
    /// pass, so it must be a pure function of inputs and parameters.
    pub fn forward_frozen_traced(&self, x: &Tensor<E>) -> Result<ForwardTrace<E>> {
        let (logits, trace) = walk_units_ro(&self.units, self.lambda, x, BnUse::BatchFrozen, true)?;
        let mut trace = trace.expect("trace requested");
        trace.logits = logits;
        Ok(trace)
    }

    /// Run a forward pass in batch-stats mode purely to populate the BN
    /// running averages (e.g. before fusing a freshly initialized network).
    pub fn calibrate(&mut self, x: &Tensor<E>) -> Result<()> {
        walk_units_mut(&mut self.units, self.lambda, x, false)?;
        Ok(())
    }

    /// Walk the forward pass reporting the first unit whose output contains
    /// a non-finite value. `Ok(())` when everything is finite.
    pub fn locate_non_finite(&self, x: &Tensor<E>) -> Result<()> {
        let mut cur = x.clone();
        let mut slots: Vec<Option<Tensor<E>>> = vec![None; self.skip_slots()];
        for (i, unit) in self.units.iter().enumerate() {
            cur = apply_unit_infer_frozen(unit, &cur, self.lambda, &mut slots)?;
            if let Some((index, value)) = cur.first_non_finite() {
                return Err(Error::Numeric(format!(
                    "first non-finite output at unit {} ({} `{}`), flat index {}, value {}",
                    i,
                    unit.kind_name(),
                    unit.name(),
                    index,
                    value
                )));
            }
        }
        Ok(())
    }

    /// Backward pass from `dlogits` `(N, K)`; returns per-unit gradients.
    pub fn backward(&self, trace: &ForwardTrace<E>, dlogits: &Tensor<E>) -> Result<GradStore<E>> {
        if trace.flows.len() != self.units.len() + 1 {
            return Err(Error::invalid(
                "backward: trace does not match this graph (unit count changed?)",
            ));
        }
        let last_shape = trace.flows[self.units.len()].shape().to_vec();
        let mut dcur = dlogits.clone().reshaped(&last_shape)?;

        let mut grads: Vec<UnitGrads<E>> = Vec::with_capacity(self.units.len());
        grads.resize(self.units.len(), UnitGrads::None);

        // slot -> gradient accumulated at the matching SkipSave.
        let mut slot_grads: Vec<Option<Tensor<E>>> = vec![None; self.skip_slots()];

        for i in (0..self.units.len()).rev() {
            let x_in = &trace.flows[i];
            match &self.units[i] {
                Unit::Conv(cu) => {
                    let (dpre, dgamma, dbeta) = match (&cu.bn, &trace.caches[i]) {
                        (Some(bn), UnitCache::Conv { pre_bn: Some(pre), bn: Some(cache) }) => {
                            let (dx, dg, dbta) = batchnorm_backward(pre, bn, cache, &dcur)?;
                            (dx, Some(dg), Some(dbta))
                        }
                        (None, _) => (dcur, None, None),
                        _ => {
                            return Err(Error::invalid(format!(
                                "backward: missing BN cache for `{}`",
                                cu.name
                            )))
                        }
                    };
                    let (dx, dw, db) = conv2d_backward(x_in, &cu.conv, &dpre)?;
                    grads[i] = UnitGrads::Conv {
                        dw,
                        db,
                        dgamma,
                        dbeta,
                    };
                    dcur = dx;
                }
                Unit::LambdaAct => {
                    dcur = lambda_relu_backward(x_in, self.lambda, &dcur)?;
                }
                Unit::SeriesAct(su) => {
                    let cache = match &trace.caches[i] {
                        UnitCache::Series(c) => c,
                        _ => {
                            return Err(Error::invalid(format!(
                                "backward: missing series cache for `{}`",
                                su.name
                            )))
                        }
                    };
                    let (dx, da, db) = series_backward(x_in, &su.params, cache, &dcur)?;
                    grads[i] = UnitGrads::Series { da, db };
                    dcur = dx;
                }
                Unit::MaxPool => {
                    let cache = match &trace.caches[i] {
                        UnitCache::Pool(c) => c,
                        _ => return Err(Error::invalid("backward: missing pool cache")),
                    };
                    dcur = maxpool2_backward(cache, &dcur)?;
                }
                Unit::GlobalPool => {
                    dcur = global_avgpool_backward(x_in.shape(), &dcur)?;
                }
                Unit::SkipAdd { slot, pooled } => {
                    // Forward: y = main + pad(maybe_pool(saved)). The main
                    // branch gradient is dcur unchanged; the skip branch takes
                    // the first C_saved channels, un-pooled if needed.
                    let save_idx = self.find_skip_save(*slot)?;
                    let saved_shape = trace.flows[save_idx].shape().to_vec();
                    let c_saved = saved_shape[1];
                    let mut dskip = slice_channels(&dcur, c_saved)?;
                    if *pooled {
                        dskip = avgpool2_backward(&saved_shape, &dskip)?;
                    }
                    slot_grads[*slot] = Some(dskip);
                }
                Unit::SkipSave(slot) => {
                    if let Some(extra) = slot_grads[*slot].take() {
                        if extra.shape() != dcur.shape() {
                            return Err(Error::shape(format!(
                                "skip gradient {:?} vs main {:?}",
                                extra.shape(),
                                dcur.shape()
                            )));
                        }
                        for (d, &e) in dcur.data_mut().iter_mut().zip(extra.data()) {
                            *d += e;
                        }
                    }
                }
            }
        }
        Ok(GradStore { units: grads })
    }

    fn find_skip_save(&self, slot: usize) -> Result<usize> {
        self.units
            .iter()
            .position(|u| matches!(u, Unit::SkipSave(s) if *s == slot))
            .ok_or_else(|| Error::invalid(format!("skip slot {slot} has no save point")))
    }

    /// Learnable parameters in a fixed walk order (units first to last;
    /// within a conv: weight, bias, gamma, beta; within a series act: a, b).
    pub fn params(&self) -> Vec<(String, ParamKind, &Tensor<E>)> {
        let mut out = Vec::new();
        for u in &self.units {
            match u {
                Unit::Conv(c) => {
                    out.push((format!("{}.weight", c.name), ParamKind::ConvWeight, &c.conv.weight));
                    out.push((format!("{}.bias", c.name), ParamKind::ConvBias, &c.conv.bias));
                    if let Some(bn) = &c.bn {
                        out.push((format!("{}.bn.gamma", c.name), ParamKind::BnGamma, &bn.gamma));
                        out.push((format!("{}.bn.beta", c.name), ParamKind::BnBeta, &bn.beta));
                    }
                }
                Unit::SeriesAct(s) => {
                    out.push((format!("{}.a", s.name), ParamKind::SeriesA, &s.params.a));
                    out.push((format!("{}.b", s.name), ParamKind::SeriesB, &s.params.b));
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable variant of [`params`](Self::params), same order.
    pub fn params_mut(&mut self) -> Vec<(String, ParamKind, &mut Tensor<E>)> {
        let mut out = Vec::new();
        for u in &mut self.units {
            match u {
                Unit::Conv(c) => {
                    out.push((format!("{}.weight", c.name), ParamKind::ConvWeight, &mut c.conv.weight));
                    out.push((format!("{}.bias", c.name), ParamKind::ConvBias, &mut c.conv.bias));
                    if let Some(bn) = &mut c.bn {
                        out.push((format!("{}.bn.gamma", c.name), ParamKind::BnGamma, &mut bn.gamma));
                        out.push((format!("{}.bn.beta", c.name), ParamKind::BnBeta, &mut bn.beta));
                    }
                }
                Unit::SeriesAct(s) => {
                    out.push((format!("{}.a", s.name), ParamKind::SeriesA, &mut s.params.a));
                    out.push((format!("{}.b", s.name), ParamKind::SeriesB, &mut s.params.b));
                }
                _ => {}
            }
        }
        out
    }

    /// All persisted tensors: the learnable parameters plus BN running
    /// statistics, in walk order. This is the checkpoint tensor list.
    pub fn state_tensors(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = Vec::new();
        for u in &self.units {
            match u {
                Unit::Conv(c) => {
                    out.push((format!("{}.weight", c.name), &c.conv.weight));
                    out.push((format!("{}.bias", c.name), &c.conv.bias));
                    if let Some(bn) = &c.bn {
                        out.push((format!("{}.bn.gamma", c.name), &bn.gamma));
                        out.push((format!("{}.bn.beta", c.name), &bn.beta));
                        out.push((format!("{}.bn.running_mean", c.name), &bn.running_mean));
                        out.push((format!("{}.bn.running_var", c.name), &bn.running_var));
                    }
                }
                Unit::SeriesAct(s) => {
                    out.push((format!("{}.a", s.name), &s.params.a));
                    out.push((format!("{}.b", s.name), &s.params.b));
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable access to the persisted tensors, same order and names as
    /// [`state_tensors`](Self::state_tensors).
    pub fn state_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out: Vec<(String, &mut Tensor<E>)> = Vec::new();
        for u in &mut self.units {
            match u {
                Unit::Conv(c) => {
                    out.push((format!("{}.weight", c.name), &mut c.conv.weight));
                    out.push((format!("{}.bias", c.name), &mut c.conv.bias));
                    if let Some(bn) = &mut c.bn {
                        out.push((format!("{}.bn.gamma", c.name), &mut bn.gamma));
                        out.push((format!("{}.bn.beta", c.name), &mut bn.beta));
                        out.push((format!("{}.bn.running_mean", c.name), &mut bn.running_mean));
                        out.push((format!("{}.bn.running_var", c.name), &mut bn.running_var));
                    }
                }
                Unit::SeriesAct(s) => {
                    out.push((format!("{}.a", s.name), &mut s.params.a));
                    out.push((format!("{}.b", s.name), &mut s.params.b));
                }
                _ => {}
            }
        }
        out
    }

    /// Total learnable parameter count.
    pub fn param_count(&self) -> u64 {
        self.params().iter().map(|(_, _, t)| t.len() as u64).sum()
    }
}

/// Apply one unit without any mutation (running stats untouched; BN uses
/// batch statistics). Used by the non-finite locator.
fn apply_unit_infer_frozen<E: Element>(
    unit: &Unit<E>,
    x: &Tensor<E>,
    lambda: f64,
    slots: &mut [Option<Tensor<E>>],
) -> Result<Tensor<E>> {
    Ok(match unit {
        Unit::Conv(cu) => {
            let pre = conv2d(x, &cu.conv)?;
            match &cu.bn {
                Some(bn) => batchnorm_forward_stats(&pre, bn)?.0,
                None => pre,
            }
        }
        Unit::LambdaAct => lambda_relu(x, lambda),
        Unit::SeriesAct(su) => series_forward(x, &su.params)?.0,
        Unit::MaxPool => maxpool2(x)?.0,
        Unit::GlobalPool => global_avgpool(x)?,
        Unit::SkipSave(slot) => {
            slots[*slot] = Some(x.clone());
            x.clone()
        }
        Unit::SkipAdd { slot, pooled } => {
            let saved = slots[*slot]
                .take()
                .ok_or_else(|| Error::invalid("skip add before its save point"))?;
            add_skip(x, &saved, *pooled)?
        }
    })
}

/// Add `saved` (optionally average-pooled) onto `x`, zero-padding channels.
fn add_skip<E: Element>(x: &Tensor<E>, saved: &Tensor<E>, pooled: bool) -> Result<Tensor<E>> {
    let skip = if pooled {
        avgpool2(saved)?
    } else {
        saved.clone()
    };
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if skip.dim(0) != n || skip.dim(2) != h || skip.dim(3) != w {
        return Err(Error::shape(format!(
            "skip add: saved {:?} vs current {:?}",
            skip.shape(),
            x.shape()
        )));
    }
    let c_s = skip.dim(1);
    if c_s > c {
        return Err(Error::shape(format!(
            "skip add: saved has more channels ({c_s}) than current ({c})"
        )));
    }
    let mut y = x.clone();
    let spatial = h * w;
    for ni in 0..n {
        for ci in 0..c_s {
            let dst_base = (ni * c + ci) * spatial;
            let src_base = (ni * c_s + ci) * spatial;
            let src = &skip.data()[src_base..src_base + spatial];
            let dst = &mut y.data_mut()[dst_base..dst_base + spatial];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Ok(y)
}

/// Keep the first `c_keep` channels of an NCHW tensor.
fn slice_channels<E: Element>(x: &Tensor<E>, c_keep: usize) -> Result<Tensor<E>> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if c_keep > c {
        return Err(Error::shape(format!("slice_channels: {c_keep} > {c}")));
    }
    let spatial = h * w;
    let mut y = Tensor::zeros(&[n, c_keep, h, w]);
    for ni in 0..n {
        for ci in 0..c_keep {
            let src_base = (ni * c + ci) * spatial;
            let dst_base = (ni * c_keep + ci) * spatial;
            y.data_mut()[dst_base..dst_base + spatial]
                .copy_from_slice(&x.data()[src_base..src_base + spatial]);
        }
    }
    Ok(y)
}

/// Apply a unit that carries no batch-norm state. Returns `None` for conv
/// units, which the walk handles itself. On `Some`, the pair is the output
/// and the cache entry.
fn apply_stateless<E: Element>(
    unit: &Unit<E>,
    x: &Tensor<E>,
    lambda: f64,
    slots: &mut [Option<Tensor<E>>],
) -> Result<Option<(Tensor<E>, UnitCache<E>)>> {
    Ok(match unit {
        Unit::Conv(_) => None,
        Unit::LambdaAct => Some((lambda_relu(x, lambda), UnitCache::None)),
        Unit::SeriesAct(su) => {
            let (y, cache) = series_forward(x, &su.params)?;
            Some((y, UnitCache::Series(cache)))
        }
        Unit::MaxPool => {
            let (y, cache) = maxpool2(x)?;
            Some((y, UnitCache::Pool(cache)))
        }
        Unit::GlobalPool => Some((global_avgpool(x)?, UnitCache::None)),
        Unit::SkipSave(slot) => {
            slots[*slot] = Some(x.clone());
            Some((x.clone(), UnitCache::None))
        }
        Unit::SkipAdd { slot, pooled } => {
            let saved = slots[*slot]
                .take()
                .ok_or_else(|| Error::invalid("skip add before its save point"))?;
            Some((add_skip(x, &saved, *pooled)?, UnitCache::None))
        }
    })
}

/// Read-only forward walk (`Running` or `BatchFrozen` batch norm).
fn walk_units_ro<E: Element>(
    units: &[Unit<E>],
    lambda: f64,
    x: &Tensor<E>,
    bn_use: BnUse,
    want_trace: bool,
) -> Result<(Tensor<E>, Option<ForwardTrace<E>>)> {
    debug_assert!(bn_use != BnUse::BatchUpdate);
    check_net_input(x)?;
    let mut slots: Vec<Option<Tensor<E>>> = vec![None; count_slots(units)];
    let mut flows = Vec::new();
    let mut caches = Vec::new();
    let mut cur = x.clone();
    for unit in units {
        if want_trace {
            flows.push(cur.clone());
        }
        let (next, cache) = match apply_stateless(unit, &cur, lambda, &mut slots)? {
            Some(pair) => pair,
            None => {
                let cu = match unit {
                    Unit::Conv(c) => c,
                    _ => unreachable!(),
                };
                let pre = conv2d(&cur, &cu.conv)?;
                match &cu.bn {
                    Some(bn) => match bn_use {
                        BnUse::Running => (batchnorm_infer(&pre, bn)?, UnitCache::None),
                        _ => {
                            let (y, bn_cache) = batchnorm_forward_stats(&pre, bn)?;
                            (
                                y,
                                UnitCache::Conv {
                                    pre_bn: Some(pre),
                                    bn: Some(bn_cache),
                                },
                            )
                        }
                    },
                    None => (pre, UnitCache::None),
                }
            }
        };
        if want_trace {
            caches.push(cache);
        }
        cur = next;
    }
    finish_walk(cur, flows, caches, want_trace)
}

/// Mutable forward walk: batch statistics with running-average updates.
fn walk_units_mut<E: Element>(
    units: &mut [Unit<E>],
    lambda: f64,
    x: &Tensor<E>,
    want_trace: bool,
) -> Result<(Tensor<E>, Option<ForwardTrace<E>>)> {
    check_net_input(x)?;
    let mut slots: Vec<Option<Tensor<E>>> = vec![None; count_slots(units)];
    let mut flows = Vec::new();
    let mut caches = Vec::new();
    let mut cur = x.clone();
    for unit in units.iter_mut() {
        if want_trace {
            flows.push(cur.clone());
        }
        let (next, cache) = match unit {
            Unit::Conv(cu) => {
                let pre = conv2d(&cur, &cu.conv)?;
                match &mut cu.bn {
                    Some(bn) => {
                        let (y, bn_cache) = batchnorm_train(&pre, bn)?;
                        (
                            y,
                            UnitCache::Conv {
                                pre_bn: Some(pre),
                                bn: Some(bn_cache),
                            },
                        )
                    }
                    None => (pre, UnitCache::None),
                }
            }
            other => apply_stateless(other, &cur, lambda, &mut slots)?
                .expect("non-conv unit handled by apply_stateless"),
        };
        if want_trace {
            caches.push(cache);
        }
        cur = next;
    }
    finish_walk(cur, flows, caches, want_trace)
}

fn check_net_input<E: Element>(x: &Tensor<E>) -> Result<()> {
    if x.rank() != 4 {
        return Err(Error::shape(format!(
            "network input must be NCHW, got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

fn count_slots<E: Element>(units: &[Unit<E>]) -> usize {
    units
        .iter()
        .filter_map(|u| match u {
            Unit::SkipSave(s) => Some(*s + 1),
            _ => None,
        })
        .max()
        .unwrap_or(0)
}

fn finish_walk<E: Element>(
    cur: Tensor<E>,
    mut flows: Vec<Tensor<E>>,
    caches: Vec<UnitCache<E>>,
    want_trace: bool,
) -> Result<(Tensor<E>, Option<ForwardTrace<E>>)> {
    if cur.rank() != 4 || cur.dim(2) != 1 || cur.dim(3) != 1 {
        return Err(Error::shape(format!(
            "network did not reduce to 1x1 maps: final shape {:?}",
            cur.shape()
        )));
    }
    let (n, k) = (cur.dim(0), cur.dim(1));
    let trace = if want_trace {
        flows.push(cur.clone());
        Some(ForwardTrace {
            flows,
            caches,
            logits: Tensor::zeros(&[1]),
        })
    } else {
        None
    };
    let logits = cur.reshaped(&[n, k])?;
    Ok((logits, trace))
}
