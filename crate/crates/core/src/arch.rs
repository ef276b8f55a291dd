//! Network family specification and construction.
//!
//! The family is a plain stack: a 4x4 stride-4 stem, four stages of
//! pointwise convolutions with 2x2 max-pool downsampling and channel
//! doubling, a global average pool, and a pointwise classifier. The variant
//! number (5 through 13) is the deployed conv depth: extra depth beyond the
//! six-conv skeleton goes into stage 1 first (one block) and then stage 3
//! (all remaining blocks, at the stage's incoming width).

use crate::act::SeriesActParams;
use crate::error::{Error, Result};
use crate::graph::{ConvUnit, GraphMode, LayerGraph, SeriesUnit, Unit};
use crate::ops::{BatchNormParams, ConvParams};
use crate::rng;
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

/// Base widths at `width_scale = 1`: stem output then the four stage outputs.
pub const BASE_WIDTHS: [usize; 5] = [512, 1024, 2048, 4096, 4096];

/// Where (and whether) identity shortcuts are inserted, for the ablation
/// that shows they do not help this architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShortcutMode {
    #[default]
    None,
    /// Add the block input to the conv output before the activation.
    BeforeAct,
    /// Add the (pooled) block input after activation and pooling.
    AfterAct,
}

impl std::str::FromStr for ShortcutMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ShortcutMode::None),
            "before_act" | "before-act" => Ok(ShortcutMode::BeforeAct),
            "after_act" | "after-act" => Ok(ShortcutMode::AfterAct),
            other => Err(Error::invalid(format!(
                "unknown shortcut mode `{other}` (expected none, before_act, after_act)"
            ))),
        }
    }
}

/// Everything needed to rebuild a network's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Deployed conv depth, 5..=13.
    pub variant: u8,
    /// Multiplier on [`BASE_WIDTHS`]; results round to a multiple of 8
    /// (minimum 8).
    pub width_scale: f64,
    /// Radius of the series activation window (`n`); 0 disables the spatial
    /// aggregation and leaves a per-channel shifted ReLU.
    pub act_radius: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Square input edge used for counting, verification, and benchmarks.
    pub input_size: usize,
    #[serde(default)]
    pub shortcut: ShortcutMode,
    /// Skip the last max pool so 32-pixel inputs survive the stage stack
    /// (divisibility requirement drops from 32 to 16). Flagged in run
    /// metadata because it changes the FLOP distribution.
    #[serde(default)]
    pub reduced_pool: bool,
    /// Train each conv as an over-parameterized pair that later collapses
    /// into one layer. Off means the training graph keeps the deployed
    /// layer count (single conv + batch norm per block), used as the
    /// ablation baseline.
    #[serde(default = "default_true")]
    pub deep_train: bool,
}

fn default_true() -> bool {
    true
}

impl ArchSpec {
    /// Spec with the reference defaults: full width, radius-3 activations,
    /// RGB 224x224 inputs, 1000 classes, no shortcuts.
    pub fn new(variant: u8) -> Self {
        ArchSpec {
            variant,
            width_scale: 1.0,
            act_radius: 3,
            in_channels: 3,
            num_classes: 1000,
            input_size: 224,
            shortcut: ShortcutMode::None,
            reduced_pool: false,
            deep_train: true,
        }
    }

    /// Input edge divisor the pooling stack demands.
    pub fn required_divisor(&self) -> usize {
        if self.reduced_pool {
            16
        } else {
            32
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(5..=13).contains(&self.variant) {
            return Err(Error::invalid(format!(
                "variant {} out of range (5..=13)",
                self.variant
            )));
        }
        if !self.width_scale.is_finite() || self.width_scale <= 0.0 {
            return Err(Error::invalid(format!(
                "width_scale {} must be positive and finite",
                self.width_scale
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::invalid("in_channels must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be >= 2"));
        }
        let div = self.required_divisor();
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::invalid(format!(
                "input_size {} must be a positive multiple of {div}{}",
                self.input_size,
                if self.reduced_pool { " (reduced pooling)" } else { "" }
            )));
        }
        Ok(())
    }

    /// Scale a base width: multiply, round to the nearest multiple of 8,
    /// floor at 8.
    pub fn width(&self, base: usize) -> usize {
        let scaled = (base as f64 * self.width_scale / 8.0).round() as usize * 8;
        scaled.max(8)
    }

    /// The five scaled widths (stem output + four stage outputs).
    pub fn widths(&self) -> [usize; 5] {
        [
            self.width(BASE_WIDTHS[0]),
            self.width(BASE_WIDTHS[1]),
            self.width(BASE_WIDTHS[2]),
            self.width(BASE_WIDTHS[3]),
            self.width(BASE_WIDTHS[4]),
        ]
    }

    /// Deployed conv depth implied by the variant (the stem and body blocks
    /// plus the classifier); equals the variant number by construction.
    pub fn conv_depth(&self) -> usize {
        1 + self.block_plans().len()
    }

    /// Ordered block descriptions (stem and stages; the classifier is
    /// emitted separately).
    pub(crate) fn block_plans(&self) -> Vec<BlockPlan> {
        let w = self.widths();
        let mut blocks = Vec::new();
        blocks.push(BlockPlan {
            name: "stem".to_string(),
            c_in: self.in_channels,
            c_out: w[0],
            kernel: 4,
            stride: 4,
            pool: false,
            is_stem: true,
        });

        // Stage 1: variants 7+ get one extra constant-width block before the
        // widening block.
        let push_stage = |blocks: &mut Vec<BlockPlan>,
                              stage: usize,
                              extra: usize,
                              c_in: usize,
                              c_out: usize,
                              pool: bool| {
            let mut idx = 0;
            for _ in 0..extra {
                blocks.push(BlockPlan {
                    name: format!("stage{stage}.block{idx}"),
                    c_in,
                    c_out: c_in,
                    kernel: 1,
                    stride: 1,
                    pool: false,
                    is_stem: false,
                });
                idx += 1;
            }
            blocks.push(BlockPlan {
                name: format!("stage{stage}.block{idx}"),
                c_in,
                c_out,
                kernel: 1,
                stride: 1,
                pool,
                is_stem: false,
            });
        };

        let extra1 = if self.variant >= 7 { 1 } else { 0 };
        let extra3 = self.variant.saturating_sub(7) as usize;
        push_stage(&mut blocks, 1, extra1, w[0], w[1], true);
        push_stage(&mut blocks, 2, 0, w[1], w[2], true);
        push_stage(&mut blocks, 3, extra3, w[2], w[3], !self.reduced_pool);
        if self.variant >= 6 {
            push_stage(&mut blocks, 4, 0, w[3], w[4], false);
        }
        blocks
    }

    /// Channel count entering the classifier.
    pub fn feature_width(&self) -> usize {
        if self.variant >= 6 {
            self.widths()[4]
        } else {
            self.widths()[3]
        }
    }
}

/// One conv block of the body: a conv (dual in train mode), its activation,
/// and optionally a trailing max pool.
#[derive(Debug, Clone)]
pub(crate) struct BlockPlan {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: bool,
    pub is_stem: bool,
}

fn init_conv<E: Element>(
    rng: &mut rng::Prng,
    c_out: usize,
    c_in: usize,
    k: usize,
    stride: usize,
) -> Result<ConvParams<E>> {
    ConvParams::new(
        rng::trunc_normal_tensor(rng, &[c_out, c_in, k, k], crate::act::INIT_STD),
        Tensor::zeros(&[c_out]),
        stride,
        0,
    )
}

/// Build a freshly initialized network.
///
/// `Train` mode expands every block into conv + BN + lambda activation +
/// pointwise conv + BN (the deep form that later collapses); `Deploy` mode
/// emits the collapsed single-conv blocks directly. The classifier is a
/// plain pointwise conv in both modes and never carries normalization.
pub fn build<E: Element>(spec: &ArchSpec, mode: GraphMode, seed: u64) -> Result<LayerGraph<E>> {
    spec.validate()?;
    let mut rng = rng::seeded(seed);
    let mut units: Vec<Unit<E>> = Vec::new();
    let mut slot = 0usize;

    for plan in spec.block_plans() {
        let eligible = !plan.is_stem && spec.shortcut != ShortcutMode::None;
        if eligible {
            units.push(Unit::SkipSave(slot));
        }
        match mode {
            GraphMode::Train if spec.deep_train => {
                // The first conv keeps the block's kernel/stride; its width
                // is the block input width except in the stem, which expands
                // immediately. The second conv is always pointwise.
                let c_mid = if plan.is_stem { plan.c_out } else { plan.c_in };
                units.push(Unit::Conv(ConvUnit {
                    name: format!("{}.conv1", plan.name),
                    conv: init_conv(&mut rng, c_mid, plan.c_in, plan.kernel, plan.stride)?,
                    bn: Some(BatchNormParams::new(c_mid)),
                }));
                units.push(Unit::LambdaAct);
                units.push(Unit::Conv(ConvUnit {
                    name: format!("{}.conv2", plan.name),
                    conv: init_conv(&mut rng, plan.c_out, c_mid, 1, 1)?,
                    bn: Some(BatchNormParams::new(plan.c_out)),
                }));
            }
            GraphMode::Train => {
                // Ablation baseline: deployed layer count, but still
                // normalized while training.
                units.push(Unit::Conv(ConvUnit {
                    name: format!("{}.conv", plan.name),
                    conv: init_conv(&mut rng, plan.c_out, plan.c_in, plan.kernel, plan.stride)?,
                    bn: Some(BatchNormParams::new(plan.c_out)),
                }));
            }
            GraphMode::Deploy => {
                units.push(Unit::Conv(ConvUnit {
                    name: format!("{}.conv", plan.name),
                    conv: init_conv(&mut rng, plan.c_out, plan.c_in, plan.kernel, plan.stride)?,
                    bn: None,
                }));
            }
        }
        if eligible && spec.shortcut == ShortcutMode::BeforeAct {
            units.push(Unit::SkipAdd {
                slot,
                pooled: false,
            });
        }
        units.push(Unit::SeriesAct(SeriesUnit {
            name: format!("{}.act", plan.name),
            params: SeriesActParams::init(plan.c_out, spec.act_radius, &mut rng),
        }));
        if plan.pool {
            units.push(Unit::MaxPool);
        }
        if eligible && spec.shortcut == ShortcutMode::AfterAct {
            units.push(Unit::SkipAdd {
                slot,
                pooled: plan.pool,
            });
        }
        if eligible {
            slot += 1;
        }
    }

    units.push(Unit::GlobalPool);
    units.push(Unit::Conv(ConvUnit {
        name: "classifier".to_string(),
        conv: init_conv(&mut rng, spec.num_classes, spec.feature_width(), 1, 1)?,
        bn: None,
    }));

    Ok(LayerGraph {
        spec: spec.clone(),
        mode,
        lambda: match mode {
            GraphMode::Train => 0.0,
            GraphMode::Deploy => 1.0,
        },
        units,
    })
}

/// Rebuild the same network with shortcut units inserted (or removed),
/// keeping every learned tensor. `mode == None` returns an unchanged clone.
pub fn add_shortcut<E: Element>(
    graph: &LayerGraph<E>,
    mode: ShortcutMode,
) -> Result<LayerGraph<E>> {
    if graph.spec.shortcut == mode {
        return Ok(graph.clone());
    }
    let mut spec = graph.spec.clone();
    spec.shortcut = mode;
    let mut rebuilt = build::<E>(&spec, graph.mode, 0)?;
    rebuilt.lambda = graph.lambda;

    // Copy all state across by name; the unit insertion cannot change the
    // set of named tensors.
    let source: std::collections::BTreeMap<String, Tensor<E>> = graph
        .state_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    for (name, tensor) in rebuilt.state_tensors_mut() {
        let src = source
            .get(&name)
            .ok_or_else(|| Error::invalid(format!("shortcut rebuild lost tensor `{name}`")))?;
        *tensor = src.clone();
    }
    Ok(rebuilt)
}

/// Parameter totals grouped by role.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ParamReport {
    pub conv_weight: u64,
    pub conv_bias: u64,
    pub bn: u64,
    pub series: u64,
    pub total: u64,
}

impl ParamReport {
    pub fn of<E: Element>(graph: &LayerGraph<E>) -> Self {
        use crate::graph::ParamKind;
        let mut r = ParamReport {
            conv_weight: 0,
            conv_bias: 0,
            bn: 0,
            series: 0,
            total: 0,
        };
        for (_, kind, t) in graph.params() {
            let n = t.len() as u64;
            match kind {
                ParamKind::ConvWeight => r.conv_weight += n,
                ParamKind::ConvBias => r.conv_bias += n,
                ParamKind::BnGamma | ParamKind::BnBeta => r.bn += n,
                ParamKind::SeriesA | ParamKind::SeriesB => r.series += n,
            }
            r.total += n;
        }
        r
    }
}

/// Multiply-accumulate totals for one forward pass of a single image
/// (batch 1), grouped by op class. `conv` counts `H'*W'*C_in*C_out*k^2`
/// per conv; the two series fields carry the window-area and literal
/// conventions of the activation cost; normalization and pooling are
/// tallied separately and excluded from [`total`](Self::total).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq, Default)]
pub struct FlopReport {
    pub conv: u64,
    pub series_radius: u64,
    pub series_literal: u64,
    pub bn: u64,
    pub pool: u64,
}

impl FlopReport {
    /// Conv plus series cost under the window-area convention.
    pub fn total(&self) -> u64 {
        self.conv + self.series_radius
    }

    /// Conv plus series cost under the literal convention.
    pub fn total_literal(&self) -> u64 {
        self.conv + self.series_literal
    }
}

/// Per-unit row for layer tables (`count` command, reports).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRow {
    pub name: String,
    pub kind: String,
    pub output_shape: [usize; 4],
    pub params: u64,
    pub flops: u64,
}

/// Walk the graph symbolically at batch 1 and tally cost per unit.
/// Returns the flop report and the per-layer table.
pub fn flop_report<E: Element>(graph: &LayerGraph<E>) -> Result<(FlopReport, Vec<LayerRow>)> {
    let spec = &graph.spec;
    let mut h = spec.input_size;
    let mut w = spec.input_size;
    let mut c = spec.in_channels;
    let mut report = FlopReport::default();
    let mut rows = Vec::new();
    let radius = spec.act_radius;

    // Skip slots only carry shapes; channel padding and pooling on the skip
    // path are parameter free and not counted.
    let mut slot_dims: Vec<Option<(usize, usize, usize)>> = vec![None; graph.skip_slots()];

    for unit in &graph.units {
        let (params, flops): (u64, u64) = match unit {
            Unit::Conv(cu) => {
                let k = cu.conv.kernel();
                if c != cu.conv.c_in() {
                    return Err(Error::shape(format!(
                        "count: `{}` expects {} channels, stack carries {c}",
                        cu.name,
                        cu.conv.c_in()
                    )));
                }
                let (ho, wo) = crate::ops::conv_out_dims(h, w, k, cu.conv.stride, cu.conv.padding)?;
                let f = (ho * wo) as u64
                    * (cu.conv.c_in() * cu.conv.c_out() * k * k) as u64;
                report.conv += f;
                let mut p = (cu.conv.weight.len() + cu.conv.bias.len()) as u64;
                if let Some(bn) = &cu.bn {
                    p += (bn.gamma.len() + bn.beta.len()) as u64;
                    report.bn += 2 * (ho * wo * cu.conv.c_out()) as u64;
                }
                h = ho;
                w = wo;
                c = cu.conv.c_out();
                (p, f)
            }
            Unit::LambdaAct => (0, 0),
            Unit::SeriesAct(su) => {
                let f = crate::act::series_flops_radius(h, w, c, radius);
                report.series_radius += f;
                report.series_literal += crate::act::series_flops_literal(h, w, c, radius);
                (su.params.param_count() as u64, f)
            }
            Unit::MaxPool => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape(format!(
                        "count: max pool on odd map {h}x{w}"
                    )));
                }
                h /= 2;
                w /= 2;
                let f = (h * w * c * 4) as u64;
                report.pool += f;
                (0, f)
            }
            Unit::GlobalPool => {
                let f = (h * w * c) as u64;
                report.pool += f;
                h = 1;
                w = 1;
                (0, f)
            }
            Unit::SkipSave(slot) => {
                slot_dims[*slot] = Some((c, h, w));
                (0, 0)
            }
            Unit::SkipAdd { slot, pooled } => {
                let (cs, hs, ws) = slot_dims[*slot]
                    .take()
                    .ok_or_else(|| Error::invalid("count: skip add before save"))?;
                let (hs, ws) = if *pooled { (hs / 2, ws / 2) } else { (hs, ws) };
                if hs != h || ws != w || cs > c {
                    return Err(Error::shape(format!(
                        "count: skip add mismatch ({cs},{hs},{ws}) onto ({c},{h},{w})"
                    )));
                }
                (0, 0)
            }
        };
        rows.push(LayerRow {
            name: unit.name(),
            kind: unit.kind_name().to_string(),
            output_shape: [1, c, h, w],
            params,
            flops,
        });
    }
    if h != 1 || w != 1 {
        return Err(Error::shape(format!("count: network ends at {h}x{w}, expected 1x1")));
    }
    Ok((report, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphMode;

    #[test]
    fn validation_rejects_bad_specs() {
        assert!(ArchSpec::new(4).validate().is_err());
        assert!(ArchSpec::new(14).validate().is_err());
        assert!(ArchSpec::new(6).validate().is_ok());

        let mut s = ArchSpec::new(6);
        s.width_scale = 0.0;
        assert!(s.validate().is_err());

        let mut s = ArchSpec::new(6);
        s.input_size = 100; // not a multiple of 32
        assert!(s.validate().is_err());
        s.reduced_pool = true;
        assert!(s.validate().is_err()); // still not a multiple of 16
        s.input_size = 48;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn width_rounding_to_multiples_of_eight() {
        let mut s = ArchSpec::new(6);
        s.width_scale = 1.0;
        assert_eq!(s.widths(), [512, 1024, 2048, 4096, 4096]);
        s.width_scale = 0.5;
        assert_eq!(s.widths(), [256, 512, 1024, 2048, 2048]);
        s.width_scale = 1.0 / 16.0;
        assert_eq!(s.widths(), [32, 64, 128, 256, 256]);
        // Tiny scales floor at 8.
        s.width_scale = 1.0 / 512.0;
        assert_eq!(s.widths(), [8, 8, 8, 8, 8]);
        // Rounding, not truncation: 512 * 0.3 = 153.6 -> 152 (19 * 8).
        s.width_scale = 0.3;
        assert_eq!(s.width(512), 152);
    }

    #[test]
    fn depth_counts_match_variant_number() {
        for v in 5..=13u8 {
            let s = ArchSpec::new(v);
            assert_eq!(s.conv_depth(), v as usize, "variant {v}");
        }
    }

    #[test]
    fn extra_depth_lands_in_stage1_then_stage3() {
        let plans = |v: u8| ArchSpec::new(v).block_plans();

        // Variant 5: stem + one block per stage 1..3, no stage 4.
        let p5 = plans(5);
        assert_eq!(p5.len(), 4);
        assert_eq!(p5.last().unwrap().name, "stage3.block0");

        // Variant 6 adds stage 4.
        let p6 = plans(6);
        assert_eq!(p6.len(), 5);
        assert_eq!(p6.last().unwrap().name, "stage4.block0");

        // Variant 7 adds a constant-width block in stage 1.
        let p7 = plans(7);
        assert_eq!(p7.len(), 6);
        let s1: Vec<_> = p7.iter().filter(|b| b.name.starts_with("stage1")).collect();
        assert_eq!(s1.len(), 2);
        assert_eq!((s1[0].c_in, s1[0].c_out), (512, 512));
        assert_eq!((s1[1].c_in, s1[1].c_out), (512, 1024));
        assert!(s1[1].pool && !s1[0].pool);

        // Variants 8..13 stack constant-width stage-3 blocks before the
        // widening block.
        for v in 8..=13u8 {
            let p = plans(v);
            let s3: Vec<_> = p.iter().filter(|b| b.name.starts_with("stage3")).collect();
            assert_eq!(s3.len(), (v - 7) as usize + 1, "variant {v}");
            for b in &s3[..s3.len() - 1] {
                assert_eq!((b.c_in, b.c_out), (2048, 2048));
            }
            let last = s3.last().unwrap();
            assert_eq!((last.c_in, last.c_out), (2048, 4096));
        }
    }

    #[test]
    fn train_and_deploy_unit_layouts() {
        let mut spec = ArchSpec::new(6);
        spec.width_scale = 1.0 / 32.0;
        spec.input_size = 32;
        spec.reduced_pool = true;
        spec.num_classes = 10;
        spec.in_channels = 1;

        let train = build::<f32>(&spec, GraphMode::Train, 1).unwrap();
        let deploy = build::<f32>(&spec, GraphMode::Deploy, 1).unwrap();

        // 5 blocks: train has 2 convs each, deploy 1; plus the classifier.
        let convs = |g: &LayerGraph<f32>| {
            g.units
                .iter()
                .filter(|u| matches!(u, Unit::Conv(_)))
                .count()
        };
        assert_eq!(convs(&train), 11);
        assert_eq!(convs(&deploy), 6);

        // Every train conv except the classifier carries BN; deploy has none.
        for u in &train.units {
            if let Unit::Conv(c) = u {
                assert_eq!(c.bn.is_some(), c.name != "classifier", "{}", c.name);
            }
        }
        for u in &deploy.units {
            if let Unit::Conv(c) = u {
                assert!(c.bn.is_none(), "{}", c.name);
            }
        }

        // Both modes share the series-act layout: one per block, none after
        // the classifier.
        let acts = |g: &LayerGraph<f32>| {
            g.units
                .iter()
                .filter(|u| matches!(u, Unit::SeriesAct(_)))
                .count()
        };
        assert_eq!(acts(&train), 5);
        assert_eq!(acts(&deploy), 5);

        assert_eq!(train.lambda, 0.0);
        assert_eq!(deploy.lambda, 1.0);
    }

    #[test]
    fn shallow_train_layout_keeps_deploy_depth() {
        let mut spec = ArchSpec::new(6);
        spec.width_scale = 1.0 / 32.0;
        spec.input_size = 32;
        spec.reduced_pool = true;
        spec.num_classes = 10;
        spec.in_channels = 1;
        spec.deep_train = false;

        let g = build::<f32>(&spec, GraphMode::Train, 1).unwrap();
        let convs: Vec<_> = g
            .units
            .iter()
            .filter_map(|u| match u {
                Unit::Conv(c) => Some(c),
                _ => None,
            })
            .collect();
        // Deployed layer count, but every non-classifier conv still
        // normalized; no blend activations anywhere.
        assert_eq!(convs.len(), 6);
        for c in &convs {
            assert_eq!(c.bn.is_some(), c.name != "classifier", "{}", c.name);
            assert!(!c.name.ends_with(".conv1"), "{}", c.name);
        }
        assert!(!g.units.iter().any(|u| matches!(u, Unit::LambdaAct)));

        // The graph runs in both stat modes.
        let x = rng::normal_tensor::<f32>(&mut rng::seeded(3), &[2, 1, 32, 32], 1.0);
        let mut gm = g.clone();
        gm.forward_train(&x).unwrap();
        g.forward_infer(&x).unwrap();
    }

    #[test]
    fn dual_block_mid_width_rule() {
        // Stem expands at conv1; body blocks keep the input width until conv2.
        let mut spec = ArchSpec::new(6);
        spec.width_scale = 1.0 / 32.0;
        spec.input_size = 64;
        spec.num_classes = 10;
        let g = build::<f32>(&spec, GraphMode::Train, 0).unwrap();
        let find = |name: &str| {
            g.units
                .iter()
                .find_map(|u| match u {
                    Unit::Conv(c) if c.name == name => Some(c.conv.weight.shape().to_vec()),
                    _ => None,
                })
                .unwrap()
        };
        assert_eq!(find("stem.conv1"), vec![16, 3, 4, 4]);
        assert_eq!(find("stem.conv2"), vec![16, 16, 1, 1]);
        assert_eq!(find("stage1.block0.conv1"), vec![16, 16, 1, 1]);
        assert_eq!(find("stage1.block0.conv2"), vec![32, 16, 1, 1]);
    }

    #[test]
    fn shortcut_insertion_preserves_tensors() {
        let mut spec = ArchSpec::new(5);
        spec.width_scale = 1.0 / 32.0;
        spec.input_size = 32;
        spec.reduced_pool = true;
        spec.num_classes = 10;
        spec.in_channels = 1;
        let plain = build::<f32>(&spec, GraphMode::Train, 3).unwrap();

        for mode in [ShortcutMode::BeforeAct, ShortcutMode::AfterAct] {
            let with = add_shortcut(&plain, mode).unwrap();
            assert_eq!(with.spec.shortcut, mode);
            // Stem is never eligible: saves appear only for stage blocks.
            let saves = with
                .units
                .iter()
                .filter(|u| matches!(u, Unit::SkipSave(_)))
                .count();
            assert_eq!(saves, 3); // stages 1..3 of variant 5
            // Tensors carried over untouched.
            let a = plain.state_tensors();
            let b = with.state_tensors();
            assert_eq!(a.len(), b.len());
            for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
                assert_eq!(na, nb);
                assert_eq!(ta, tb);
            }
        }

        // none -> none is a no-op clone.
        let same = add_shortcut(&plain, ShortcutMode::None).unwrap();
        assert_eq!(same.units.len(), plain.units.len());
    }
}
