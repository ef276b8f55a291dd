//! Finite-difference verification of the analytic backward pass.
//!
//! The checker differentiates the frozen-batch forward pass (a pure
//! function of inputs and parameters — running averages never move), so
//! central differences and the backward pass are estimating the same
//! derivative. Coordinates are sampled per parameter class to guarantee
//! every gradient path (conv weights and biases, both batch-norm affines,
//! activation scales and shifts) gets exercised, not just the bulky ones.

use std::collections::BTreeSet;

use rand::Rng;
use serde::Serialize;

use crate::graph::{LayerGraph, ParamKind};
use crate::ops::loss::{classification_loss, LossKind};
use crate::rng;
use crate::tensor::{el, Element, Tensor};
use crate::{Error, Result, SCHEMA_VERSION};

/// Every parameter class, in report order.
pub const ALL_KINDS: [ParamKind; 6] = [
    ParamKind::ConvWeight,
    ParamKind::ConvBias,
    ParamKind::BnGamma,
    ParamKind::BnBeta,
    ParamKind::SeriesA,
    ParamKind::SeriesB,
];

/// The single worst coordinate seen for one parameter class.
#[derive(Debug, Clone, Serialize)]
pub struct WorstCoord {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Check results for one parameter class.
#[derive(Debug, Clone, Serialize)]
pub struct KindReport {
    pub kind: ParamKind,
    /// Coordinates actually probed (0 when the graph has no parameters of
    /// this class, e.g. batch-norm affines in a deployed graph).
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<WorstCoord>,
}

/// Full gradient check result.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub schema_version: u32,
    pub loss: LossKind,
    pub checked: usize,
    pub max_rel_err: f64,
    pub kinds: Vec<KindReport>,
}

/// Loss of the frozen-batch forward pass; the function being differentiated.
fn loss_of<E: Element>(
    graph: &LayerGraph<E>,
    x: &Tensor<E>,
    targets: &[u32],
    loss: LossKind,
    smoothing: f64,
) -> Result<f64> {
    let logits = graph.forward_frozen(x)?;
    Ok(classification_loss(loss, &logits, targets, smoothing)?.0)
}

/// Relative error with a denominator floor: below the floor the measure
/// degrades to absolute error over 1e-4, so agreeing near-zero gradients do
/// not divide finite-difference roundoff (~1e-11) into apparent error,
/// while any genuine disagreement above 1e-8 still exceeds a 1e-4 bound.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-4)
}

/// Compare analytic gradients against central differences on `per_kind`
/// sampled coordinates of every parameter class present in the graph.
///
/// Parameters are restored bitwise after probing, so the graph comes back
/// exactly as it went in.
pub fn grad_check<E: Element>(
    graph: &mut LayerGraph<E>,
    x: &Tensor<E>,
    targets: &[u32],
    loss: LossKind,
    smoothing: f64,
    per_kind: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    grad_check_impl(graph, x, targets, loss, smoothing, per_kind, seed, None)
}

/// Internal variant that can flip the sign of one class's analytic
/// gradients before comparing. Only tests use the corruption arm: it
/// proves the harness actually fails when the backward pass is wrong.
#[allow(clippy::too_many_arguments)]
fn grad_check_impl<E: Element>(
    graph: &mut LayerGraph<E>,
    x: &Tensor<E>,
    targets: &[u32],
    loss: LossKind,
    smoothing: f64,
    per_kind: usize,
    seed: u64,
    corrupt: Option<ParamKind>,
) -> Result<GradCheckReport> {
    if per_kind == 0 {
        return Err(Error::invalid("grad_check: per_kind must be at least 1"));
    }

    // Analytic gradients, cloned out so the graph is free to move during
    // the finite-difference probes.
    let trace = graph.forward_frozen_traced(x)?;
    let (_, dlogits) = classification_loss(loss, &trace.logits, targets, smoothing)?;
    let grads = graph.backward(&trace, &dlogits)?;
    let analytic: Vec<(ParamKind, Tensor<E>)> = grads
        .flat()
        .into_iter()
        .map(|(k, t)| (k, t.clone()))
        .collect();
    drop(trace);

    // The two listings must describe the same parameters in the same order.
    let layout: Vec<(String, ParamKind, usize)> = graph
        .params()
        .iter()
        .map(|(n, k, t)| (n.clone(), *k, t.len()))
        .collect();
    if layout.len() != analytic.len()
        || layout
            .iter()
            .zip(&analytic)
            .any(|((_, k, len), (gk, gt))| k != gk || *len != gt.len())
    {
        return Err(Error::invalid(
            "grad_check: gradient layout does not match the parameter list",
        ));
    }

    let mut rng = rng::seeded(seed);
    let mut kinds = Vec::new();
    let mut checked_total = 0usize;
    let mut worst_overall = 0.0f64;

    for kind in ALL_KINDS {
        let members: Vec<(usize, usize)> = layout
            .iter()
            .enumerate()
            .filter(|(_, (_, k, _))| *k == kind)
            .map(|(pi, (_, _, len))| (pi, *len))
            .collect();
        let total: usize = members.iter().map(|&(_, len)| len).sum();
        if total == 0 {
            kinds.push(KindReport {
                kind,
                checked: 0,
                max_rel_err: 0.0,
                worst: None,
            });
            continue;
        }

        // Sample distinct flat coordinates across all parameters of this
        // class.
        let want = per_kind.min(total);
        let mut picked = BTreeSet::new();
        while picked.len() < want {
            picked.insert(rng.gen_range(0..total));
        }

        let mut report = KindReport {
            kind,
            checked: 0,
            max_rel_err: 0.0,
            worst: None,
        };
        for flat in picked {
            // Locate the owning parameter.
            let mut rest = flat;
            let (pi, coord) = members
                .iter()
                .find_map(|&(pi, len)| {
                    if rest < len {
                        Some((pi, rest))
                    } else {
                        rest -= len;
                        None
                    }
                })
                .expect("flat coordinate in range");

            let orig = graph.params()[pi].2.data()[coord];
            let theta = orig.as_f64();
            let h = 1e-5 * theta.abs().max(1.0);

            graph.params_mut()[pi].2.data_mut()[coord] = el(theta + h);
            let plus = loss_of(graph, x, targets, loss, smoothing)?;
            graph.params_mut()[pi].2.data_mut()[coord] = el(theta - h);
            let minus = loss_of(graph, x, targets, loss, smoothing)?;
            graph.params_mut()[pi].2.data_mut()[coord] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let mut a = analytic[pi].1.data()[coord].as_f64();
            if corrupt == Some(kind) {
                a = -a;
            }
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(WorstCoord {
                    param: layout[pi].0.clone(),
                    index: coord,
                    analytic: a,
                    numeric,
                });
            }
        }
        checked_total += report.checked;
        worst_overall = worst_overall.max(report.max_rel_err);
        kinds.push(report);
    }

    Ok(GradCheckReport {
        schema_version: SCHEMA_VERSION,
        loss,
        checked: checked_total,
        max_rel_err: worst_overall,
        kinds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build, ArchSpec};
    use crate::graph::GraphMode;

    fn tiny_spec() -> ArchSpec {
        let mut spec = ArchSpec::new(5);
        spec.width_scale = 1.0 / 32.0;
        spec.input_size = 16;
        spec.reduced_pool = true;
        spec.num_classes = 4;
        spec
    }

    fn batch(classes: usize, n: usize, seed: u64) -> (Tensor<f64>, Vec<u32>) {
        let mut r = rng::seeded(seed);
        let x = rng::normal_tensor::<f64>(&mut r, &[n, 3, 16, 16], 1.0);
        let y = (0..n).map(|i| (i % classes) as u32).collect();
        (x, y)
    }

    #[test]
    fn smooth_region_hits_the_harness_floor() {
        // Push every activation shift to +3 (standardized pre-activations
        // rarely reach -3, and never within finite-difference range of it)
        // and disable the blend nonlinearity: the network is smooth along
        // every probed direction, so the residual error is pure harness
        // noise (h^2 truncation), an order of magnitude under the working
        // tolerance.
        let mut g = build::<f64>(&tiny_spec(), GraphMode::Train, 5).unwrap();
        g.lambda = 0.0;
        for (_, kind, t) in g.params_mut() {
            if kind == ParamKind::SeriesB {
                for v in t.data_mut() {
                    *v = 3.0;
                }
            }
        }
        let (x, y) = batch(4, 2, 1);
        let report = grad_check(&mut g, &x, &y, LossKind::Ce, 0.1, 6, 42).unwrap();
        assert!(report.max_rel_err <= 1e-5, "{report:?}");
    }

    #[test]
    fn train_mode_gradients_match_finite_differences() {
        let mut g = build::<f64>(&tiny_spec(), GraphMode::Train, 3).unwrap();
        g.lambda = 0.5;
        let (x, y) = batch(4, 3, 2);
        let report = grad_check(&mut g, &x, &y, LossKind::Ce, 0.1, 8, 7).unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
        // Every parameter class exists in a train-mode graph and was probed.
        for k in &report.kinds {
            assert!(k.checked > 0, "{:?} unprobed", k.kind);
        }
    }

    #[test]
    fn deploy_mode_and_bce_loss_also_match() {
        let mut g = build::<f64>(&tiny_spec(), GraphMode::Deploy, 9).unwrap();
        let (x, y) = batch(4, 2, 4);
        let report = grad_check(&mut g, &x, &y, LossKind::Bce, 0.0, 6, 11).unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
        // No batch norm survives in deploy form.
        for k in &report.kinds {
            let bn = matches!(k.kind, ParamKind::BnGamma | ParamKind::BnBeta);
            assert_eq!(k.checked == 0, bn, "{:?}", k.kind);
        }
    }

    #[test]
    fn parameters_are_restored_bitwise() {
        let mut g = build::<f64>(&tiny_spec(), GraphMode::Train, 3).unwrap();
        let before: Vec<Vec<f64>> = g.params().iter().map(|(_, _, t)| t.data().to_vec()).collect();
        let (x, y) = batch(4, 2, 5);
        grad_check(&mut g, &x, &y, LossKind::Ce, 0.1, 4, 13).unwrap();
        let after: Vec<Vec<f64>> = g.params().iter().map(|(_, _, t)| t.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn sign_flipped_gradients_are_caught() {
        let mut g = build::<f64>(&tiny_spec(), GraphMode::Train, 3).unwrap();
        g.lambda = 0.5;
        let (x, y) = batch(4, 3, 6);
        let report = grad_check_impl(
            &mut g,
            &x,
            &y,
            LossKind::Ce,
            0.1,
            8,
            7,
            Some(ParamKind::ConvWeight),
        )
        .unwrap();
        assert!(report.max_rel_err > 1e-1, "{report:?}");
    }

    #[test]
    fn rejects_zero_samples() {
        let mut g = build::<f64>(&tiny_spec(), GraphMode::Train, 3).unwrap();
        let (x, y) = batch(4, 2, 7);
        assert!(grad_check(&mut g, &x, &y, LossKind::Ce, 0.1, 0, 0).is_err());
    }
}
