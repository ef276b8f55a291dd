//! The optimization loop: blend schedule, cosine learning rate, decoupled
//! or momentum optimizers, epoch driving, and evaluation.
//!
//! Determinism contract: with a fixed config seed, every run derives its
//! shuffle order from stream `1 + epoch` of the seed, its augmentation
//! draws from stream `2^32 + epoch`, and all reductions run in a fixed
//! order — so two runs of the same config produce bitwise-identical
//! parameters, with or without batch prefetching.

pub mod checkpoint;
pub mod gradcheck;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::act::LambdaSchedule;
use crate::data::{augment_batch, epoch_order, for_each_batch, Dataset};
use crate::graph::{GradStore, GraphMode, LayerGraph};
use crate::ops::{classification_loss, correct_count, LossKind};
use crate::rng;
use crate::tensor::{el, Element, Tensor};
use crate::{Error, Result};

/// Optimizer family plus its fixed hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay (decay scales the parameter
    /// directly instead of entering the moment estimates).
    AdamW { beta1: f64, beta2: f64, eps: f64 },
    /// Momentum SGD with coupled decay (decay added to the gradient).
    SgdMomentum { momentum: f64 },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd() -> Self {
        OptimizerKind::SgdMomentum { momentum: 0.9 }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::AdamW { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::invalid("adamw betas must lie in [0, 1)"));
                }
                if !(eps > 0.0 && eps.is_finite()) {
                    return Err(Error::invalid("adamw eps must be positive"));
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::invalid("momentum must lie in [0, 1)"));
                }
            }
        }
        Ok(())
    }

    pub fn label(&self) -> &'static str {
        match self {
            OptimizerKind::AdamW { .. } => "adamw",
            OptimizerKind::SgdMomentum { .. } => "sgd",
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adamw()
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(Self::adamw()),
            "sgd" | "sgd_momentum" => Ok(Self::sgd()),
            other => Err(Error::invalid(format!(
                "unknown optimizer `{other}` (expected adamw or sgd)"
            ))),
        }
    }
}

/// Everything the training loop needs beyond the architecture itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Length of the blend ramp (epochs until the extra depth becomes
    /// removable); `None` means a third of the run, minimum 1.
    pub deep_epochs: Option<usize>,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub loss: LossKind,
    pub label_smoothing: f64,
    pub flip_prob: f64,
    pub crop_padding: usize,
    pub shuffle: bool,
    /// Batches decoded ahead of the compute thread; 0 decodes inline.
    pub prefetch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            deep_epochs: None,
            warmup_epochs: 2,
            base_lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 128,
            optimizer: OptimizerKind::default(),
            loss: LossKind::Ce,
            label_smoothing: 0.1,
            flip_prob: 0.0,
            crop_padding: 0,
            shuffle: true,
            prefetch: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The blend ramp length actually in effect.
    pub fn deep_epochs(&self) -> usize {
        self.deep_epochs.unwrap_or((self.epochs / 3).max(1))
    }

    pub fn schedule(&self) -> Result<LambdaSchedule> {
        LambdaSchedule::new(self.deep_epochs())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        let deep = self.deep_epochs();
        if deep == 0 || deep > self.epochs {
            return Err(Error::invalid(format!(
                "deep_epochs {deep} must lie in 1..=epochs ({})",
                self.epochs
            )));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::invalid("warmup_epochs cannot exceed epochs"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("base_lr must be positive and finite"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be >= 0 and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid("label_smoothing must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid("flip_prob must lie in [0, 1]"));
        }
        self.optimizer.validate()
    }
}

/// Linear warmup to `base_lr`, then a cosine arc ending at zero on the
/// final epoch.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_epochs;
    if epoch < w {
        return cfg.base_lr * (epoch + 1) as f64 / w as f64;
    }
    let span = cfg.epochs.saturating_sub(1).saturating_sub(w).max(1) as f64;
    let t = ((epoch - w) as f64 / span).min(1.0);
    0.5 * cfg.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone)]
enum Slot<E: Element> {
    Adam { m: Tensor<E>, v: Tensor<E> },
    Sgd { vel: Tensor<E> },
}

/// Per-parameter optimizer state, keyed by canonical parameter name so it
/// survives checkpointing.
#[derive(Debug, Clone)]
pub struct OptState<E: Element> {
    kind: OptimizerKind,
    step: u64,
    slots: BTreeMap<String, Slot<E>>,
}

impl<E: Element> OptState<E> {
    pub fn new(kind: OptimizerKind) -> Self {
        OptState {
            kind,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment tensors under stable names (`opt.m.*` / `opt.v.*` for the
    /// decoupled optimizer, `opt.vel.*` for momentum), for checkpointing.
    pub fn export_tensors(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = Vec::new();
        for (name, slot) in &self.slots {
            match slot {
                Slot::Adam { m, v } => {
                    out.push((format!("opt.m.{name}"), m));
                    out.push((format!("opt.v.{name}"), v));
                }
                Slot::Sgd { vel } => out.push((format!("opt.vel.{name}"), vel)),
            }
        }
        out
    }

    /// Rebuild state from checkpointed tensors (the inverse of
    /// [`OptState::export_tensors`]).
    pub fn from_parts(
        kind: OptimizerKind,
        step: u64,
        tensors: BTreeMap<String, Tensor<E>>,
    ) -> Result<Self> {
        let mut slots: BTreeMap<String, Slot<E>> = BTreeMap::new();
        for (name, tensor) in tensors {
            if let Some(param) = name.strip_prefix("opt.m.") {
                match slots
                    .entry(param.to_string())
                    .or_insert_with(|| Slot::Adam {
                        m: Tensor::zeros(tensor.shape()),
                        v: Tensor::zeros(tensor.shape()),
                    }) {
                    Slot::Adam { m, .. } => *m = tensor,
                    Slot::Sgd { .. } => {
                        return Err(Error::Checkpoint(format!(
                            "mixed optimizer state for `{param}`"
                        )))
                    }
                }
            } else if let Some(param) = name.strip_prefix("opt.v.") {
                match slots
                    .entry(param.to_string())
                    .or_insert_with(|| Slot::Adam {
                        m: Tensor::zeros(tensor.shape()),
                        v: Tensor::zeros(tensor.shape()),
                    }) {
                    Slot::Adam { v, .. } => *v = tensor,
                    Slot::Sgd { .. } => {
                        return Err(Error::Checkpoint(format!(
                            "mixed optimizer state for `{param}`"
                        )))
                    }
                }
            } else if let Some(param) = name.strip_prefix("opt.vel.") {
                slots.insert(param.to_string(), Slot::Sgd { vel: tensor });
            } else {
                return Err(Error::Checkpoint(format!(
                    "unrecognized optimizer tensor `{name}`"
                )));
            }
        }
        let expects_adam = matches!(kind, OptimizerKind::AdamW { .. });
        for (param, slot) in &slots {
            if matches!(slot, Slot::Adam { .. }) != expects_adam {
                return Err(Error::Checkpoint(format!(
                    "optimizer state for `{param}` does not match {}",
                    kind.label()
                )));
            }
        }
        Ok(OptState { kind, step, slots })
    }

    /// One optimizer step. Gradients must come from the same graph's
    /// `backward`; alignment is checked positionally by parameter kind and
    /// length. Weight decay applies only to kinds that opt in.
    pub fn apply(
        &mut self,
        graph: &mut LayerGraph<E>,
        grads: &GradStore<E>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        let params = graph.params_mut();
        let flat = grads.flat();
        if params.len() != flat.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                flat.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        for ((name, kind, theta), (gkind, grad)) in params.into_iter().zip(flat) {
            if kind != gkind || theta.len() != grad.len() {
                return Err(Error::invalid(format!(
                    "gradient misaligned with parameter `{name}`"
                )));
            }
            let wd = if kind.decayed() { weight_decay } else { 0.0 };
            match self.kind {
                OptimizerKind::AdamW { beta1, beta2, eps } => {
                    let slot = self.slots.entry(name).or_insert_with(|| Slot::Adam {
                        m: Tensor::zeros(theta.shape()),
                        v: Tensor::zeros(theta.shape()),
                    });
                    let Slot::Adam { m, v } = slot else {
                        return Err(Error::invalid("optimizer state kind changed mid-run"));
                    };
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for i in 0..theta.len() {
                        let g = grad.data()[i].as_f64();
                        let mi = beta1 * m.data()[i].as_f64() + (1.0 - beta1) * g;
                        let vi = beta2 * v.data()[i].as_f64() + (1.0 - beta2) * g * g;
                        m.data_mut()[i] = el(mi);
                        v.data_mut()[i] = el(vi);
                        let step = (mi / bc1) / ((vi / bc2).sqrt() + eps);
                        let th = theta.data()[i].as_f64();
                        theta.data_mut()[i] = el(th - lr * wd * th - lr * step);
                    }
                }
                OptimizerKind::SgdMomentum { momentum } => {
                    let slot = self.slots.entry(name).or_insert_with(|| Slot::Sgd {
                        vel: Tensor::zeros(theta.shape()),
                    });
                    let Slot::Sgd { vel } = slot else {
                        return Err(Error::invalid("optimizer state kind changed mid-run"));
                    };
                    for i in 0..theta.len() {
                        let th = theta.data()[i].as_f64();
                        let g = grad.data()[i].as_f64() + wd * th;
                        let vi = momentum * vel.data()[i].as_f64() + g;
                        vel.data_mut()[i] = el(vi);
                        theta.data_mut()[i] = el(th - lr * vi);
                    }
                }
            }
        }
        Ok(())
    }
}

/// What one epoch produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lambda: f64,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
    pub batches: usize,
}

/// One full pass over the dataset.
///
/// Sets the blend value from the schedule at epoch start, then per batch:
/// augment, forward with batch statistics, loss, backward, optimizer step.
/// Metrics are the sample-weighted mean loss and the running-prediction
/// accuracy. A non-finite loss aborts with a diagnostic naming the first
/// offending layer.
pub fn train_epoch<E: Element>(
    graph: &mut LayerGraph<E>,
    data: &Dataset,
    opt: &mut OptState<E>,
    epoch: usize,
    cfg: &TrainConfig,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    if graph.mode != GraphMode::Train {
        return Err(Error::invalid("train_epoch needs a training-mode graph"));
    }
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }

    let lambda = cfg.schedule()?.value(epoch);
    graph.lambda = lambda;
    let lr = cosine_lr(epoch, cfg);
    let order = epoch_order(data.len(), cfg.shuffle, cfg.seed, epoch as u64);
    let mut aug_rng = rng::seeded_stream(cfg.seed, (1u64 << 32) + epoch as u64);

    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let mut batches = 0usize;
    for_each_batch::<E>(data, &order, cfg.batch_size, cfg.prefetch, |mut x, y| {
        augment_batch(&mut x, cfg.flip_prob, cfg.crop_padding, &mut aug_rng)?;
        let trace = graph.forward_train(&x)?;
        let (loss, dlogits) =
            match classification_loss(cfg.loss, &trace.logits, &y, cfg.label_smoothing) {
                Ok(v) => v,
                Err(Error::Numeric(msg)) => {
                    // Logits went non-finite; walk the graph to name the
                    // layer where values first exploded.
                    graph.locate_non_finite(&x)?;
                    return Err(Error::Numeric(msg));
                }
                Err(e) => return Err(e),
            };
        if !loss.is_finite() {
            graph.locate_non_finite(&x)?;
            return Err(Error::Numeric(format!(
                "loss became non-finite ({loss}) with finite logits"
            )));
        }
        correct += correct_count(&trace.logits, &y)?;
        loss_sum += loss * y.len() as f64;
        batches += 1;
        let grads = graph.backward(&trace, &dlogits)?;
        opt.apply(graph, &grads, lr, cfg.weight_decay)
    })?;

    Ok(EpochMetrics {
        epoch,
        lambda,
        lr,
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        samples: data.len(),
        batches,
    })
}

/// Aggregate loss and top-1 accuracy of a fixed graph on a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

fn evaluate_impl<E: Element>(
    graph: &LayerGraph<E>,
    data: &Dataset,
    batch_size: usize,
    loss_kind: LossKind,
    smoothing: f64,
    batch_stats: bool,
) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for_each_batch::<E>(data, &order, batch_size, 0, |x, y| {
        let logits = if batch_stats {
            graph.forward_frozen(&x)?
        } else {
            graph.forward_infer(&x)?
        };
        let (loss, _) = classification_loss(loss_kind, &logits, &y, smoothing)?;
        loss_sum += loss * y.len() as f64;
        correct += correct_count(&logits, &y)?;
        Ok(())
    })?;
    Ok(EvalMetrics {
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        samples: data.len(),
    })
}

/// Evaluate with running statistics (deployment semantics).
pub fn evaluate<E: Element>(
    graph: &LayerGraph<E>,
    data: &Dataset,
    batch_size: usize,
    loss_kind: LossKind,
    smoothing: f64,
) -> Result<EvalMetrics> {
    evaluate_impl(graph, data, batch_size, loss_kind, smoothing, false)
}

/// Evaluate with per-batch statistics and no side effects — the statistics
/// mode the training loss is computed under, so a zero-step training epoch
/// reproduces exactly this loss.
pub fn evaluate_frozen<E: Element>(
    graph: &LayerGraph<E>,
    data: &Dataset,
    batch_size: usize,
    loss_kind: LossKind,
    smoothing: f64,
) -> Result<EvalMetrics> {
    evaluate_impl(graph, data, batch_size, loss_kind, smoothing, true)
}

/// Drive `train_epoch` over the whole schedule, invoking `on_epoch` after
/// each epoch (for logging or checkpointing).
pub fn fit<E: Element>(
    graph: &mut LayerGraph<E>,
    opt: &mut OptState<E>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let m = train_epoch(graph, data, opt, epoch, cfg)?;
        on_epoch(&m)?;
        out.push(m);
    }
    Ok(out)
}
