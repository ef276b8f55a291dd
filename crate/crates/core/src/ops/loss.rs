//! Classification losses. Each returns the scalar loss together with the
//! gradient with respect to the logits, computed in f64 internally for
//! stability and cast back to the working precision.

use crate::error::{Error, Result};
use crate::tensor::{el, Element, Tensor};
use serde::{Deserialize, Serialize};

/// Which loss the training loop drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Softmax cross-entropy with label smoothing (the default).
    #[default]
    Ce,
    /// Independent per-class sigmoid binary cross-entropy against the same
    /// smoothed one-hot target distribution, averaged over N*K elements.
    Bce,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "bce" => Ok(LossKind::Bce),
            other => Err(Error::invalid(format!("unknown loss `{other}` (expected ce or bce)"))),
        }
    }
}

fn check<E: Element>(logits: &Tensor<E>, targets: &[u32], smoothing: f64) -> Result<(usize, usize)> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!("loss wants (N, K) logits, got {:?}", logits.shape())));
    }
    let (n, k) = (logits.dim(0), logits.dim(1));
    if n == 0 || k == 0 {
        return Err(Error::invalid("loss: empty batch or zero classes"));
    }
    if targets.len() != n {
        return Err(Error::shape(format!(
            "loss: {} targets for batch of {n}",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= k) {
        return Err(Error::invalid(format!("loss: target {t} out of range for {k} classes")));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::invalid(format!("loss: smoothing {smoothing} outside [0, 1)")));
    }
    Ok((n, k))
}

/// Smoothed target mass for class `j` given true class `y`:
/// `(1 - eps) * [j == y] + eps / K`.
#[inline]
fn smoothed_target(j: usize, y: usize, k: usize, eps: f64) -> f64 {
    let base = eps / k as f64;
    if j == y {
        base + (1.0 - eps)
    } else {
        base
    }
}

/// Softmax cross-entropy with label smoothing, averaged over the batch.
/// Returns `(loss, dloss/dlogits)`.
pub fn softmax_cross_entropy<E: Element>(
    logits: &Tensor<E>,
    targets: &[u32],
    smoothing: f64,
) -> Result<(f64, Tensor<E>)> {
    let (n, k) = check(logits, targets, smoothing)?;
    let mut dlogits = Tensor::zeros(logits.shape());
    let mut total = 0.0f64;
    let inv_n = 1.0 / n as f64;
    let mut row = vec![0.0f64; k];
    for ni in 0..n {
        let src = &logits.data()[ni * k..(ni + 1) * k];
        let mut maxv = f64::NEG_INFINITY;
        for (r, &v) in row.iter_mut().zip(src) {
            *r = v.as_f64();
            if *r > maxv {
                maxv = *r;
            }
        }
        if !maxv.is_finite() {
            return Err(Error::Numeric(format!("non-finite logits in loss at row {ni}")));
        }
        let mut lse = 0.0f64;
        for r in &row {
            lse += (r - maxv).exp();
        }
        let lse = maxv + lse.ln();

        let y = targets[ni] as usize;
        let dst = &mut dlogits.data_mut()[ni * k..(ni + 1) * k];
        for j in 0..k {
            let logp = row[j] - lse;
            let q = smoothed_target(j, y, k, smoothing);
            total -= q * logp;
            let p = logp.exp();
            dst[j] = el((p - q) * inv_n);
        }
    }
    Ok((total * inv_n, dlogits))
}

/// One-vs-all sigmoid binary cross-entropy against the smoothed one-hot
/// targets, averaged over all N*K logit positions. Returns
/// `(loss, dloss/dlogits)`.
pub fn sigmoid_bce<E: Element>(
    logits: &Tensor<E>,
    targets: &[u32],
    smoothing: f64,
) -> Result<(f64, Tensor<E>)> {
    let (n, k) = check(logits, targets, smoothing)?;
    let mut dlogits = Tensor::zeros(logits.shape());
    let mut total = 0.0f64;
    let inv = 1.0 / (n * k) as f64;
    for ni in 0..n {
        let y = targets[ni] as usize;
        let src = &logits.data()[ni * k..(ni + 1) * k];
        let dst = &mut dlogits.data_mut()[ni * k..(ni + 1) * k];
        for j in 0..k {
            let z = src[j].as_f64();
            if !z.is_finite() {
                return Err(Error::Numeric(format!("non-finite logits in loss at row {ni}")));
            }
            let t = smoothed_target(j, y, k, smoothing);
            // -t*log(sigmoid(z)) - (1-t)*log(1-sigmoid(z))
            //   = softplus(z) - t*z, with the stable softplus form.
            let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
            total += softplus - t * z;
            let sig = 1.0 / (1.0 + (-z).exp());
            dst[j] = el((sig - t) * inv);
        }
    }
    Ok((total * inv, dlogits))
}

/// Dispatch on [`LossKind`].
pub fn classification_loss<E: Element>(
    kind: LossKind,
    logits: &Tensor<E>,
    targets: &[u32],
    smoothing: f64,
) -> Result<(f64, Tensor<E>)> {
    match kind {
        LossKind::Ce => softmax_cross_entropy(logits, targets, smoothing),
        LossKind::Bce => sigmoid_bce(logits, targets, smoothing),
    }
}

/// Count of rows whose argmax logit equals the target (first index wins ties).
pub fn correct_count<E: Element>(logits: &Tensor<E>, targets: &[u32]) -> Result<usize> {
    let (n, k) = (logits.dim(0), logits.dim(1));
    if targets.len() != n {
        return Err(Error::shape(format!(
            "correct_count: {} targets for batch of {n}",
            targets.len()
        )));
    }
    let mut correct = 0;
    for ni in 0..n {
        let row = &logits.data()[ni * k..(ni + 1) * k];
        let mut best = 0usize;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == targets[ni] as usize {
            correct += 1;
        }
    }
    Ok(correct)
}
