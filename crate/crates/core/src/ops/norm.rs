//! Batch normalization over NCHW (statistics per channel, across N*H*W).

use crate::error::{Error, Result};
use crate::tensor::{el, Element, Tensor};

pub const BN_DEFAULT_EPS: f64 = 1e-5;
pub const BN_DEFAULT_MOMENTUM: f64 = 0.1;

/// Learnable scale/shift plus running statistics for inference.
#[derive(Debug, Clone)]
pub struct BatchNormParams<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
    pub eps: f64,
    pub momentum: f64,
}

impl<E: Element> BatchNormParams<E> {
    /// Fresh normalization state: gamma 1, beta 0, running mean 0, var 1.
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::full(&[channels], E::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], E::one()),
            eps: BN_DEFAULT_EPS,
            momentum: BN_DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.dim(0)
    }
}

/// Per-channel batch statistics saved by the training forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

fn check_input<E: Element>(x: &Tensor<E>, bn: &BatchNormParams<E>) -> Result<()> {
    if x.rank() != 4 {
        return Err(Error::shape(format!("batchnorm wants NCHW, got {:?}", x.shape())));
    }
    if x.dim(1) != bn.channels() {
        return Err(Error::shape(format!(
            "batchnorm: input has {} channels, params have {}",
            x.dim(1),
            bn.channels()
        )));
    }
    Ok(())
}

/// Inference transform using the running statistics.
pub fn batchnorm_infer<E: Element>(x: &Tensor<E>, bn: &BatchNormParams<E>) -> Result<Tensor<E>> {
    check_input(x, bn)?;
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let spatial = h * w;
    let mut y = Tensor::zeros(x.shape());
    for ci in 0..c {
        let scale = el::<E>(
            bn.gamma.data()[ci].as_f64() / (bn.running_var.data()[ci].as_f64() + bn.eps).sqrt(),
        );
        let shift = bn.beta.data()[ci] - bn.running_mean.data()[ci] * scale;
        for ni in 0..n {
            let base = (ni * c + ci) * spatial;
            let src = &x.data()[base..base + spatial];
            let dst = &mut y.data_mut()[base..base + spatial];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * scale + shift;
            }
        }
    }
    Ok(y)
}

/// Training-mode normalization against the batch's own statistics, without
/// touching the running averages. Statistics are accumulated in f64 so the
/// f32 path stays well conditioned.
pub fn batchnorm_forward_stats<E: Element>(
    x: &Tensor<E>,
    bn: &BatchNormParams<E>,
) -> Result<(Tensor<E>, BnCache)> {
    check_input(x, bn)?;
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let spatial = h * w;
    let m = (n * spatial) as f64;
    if n * spatial < 2 {
        return Err(Error::invalid(
            "batchnorm training needs at least 2 values per channel",
        ));
    }
    let mut mean = vec![0.0f64; c];
    let mut inv_std = vec![0.0f64; c];
    let mut y = Tensor::zeros(x.shape());
    for ci in 0..c {
        let mut sum = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * spatial;
            for &v in &x.data()[base..base + spatial] {
                sum += v.as_f64();
            }
        }
        let mu = sum / m;
        let mut var_sum = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * spatial;
            for &v in &x.data()[base..base + spatial] {
                let d = v.as_f64() - mu;
                var_sum += d * d;
            }
        }
        let var = var_sum / m; // biased, as used for the normalization itself
        let istd = 1.0 / (var + bn.eps).sqrt();
        mean[ci] = mu;
        inv_std[ci] = istd;

        let scale = el::<E>(bn.gamma.data()[ci].as_f64() * istd);
        let shift = el::<E>(bn.beta.data()[ci].as_f64() - bn.gamma.data()[ci].as_f64() * istd * mu);
        for ni in 0..n {
            let base = (ni * c + ci) * spatial;
            let src = &x.data()[base..base + spatial];
            let dst = &mut y.data_mut()[base..base + spatial];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * scale + shift;
            }
        }
    }
    Ok((y, BnCache { mean, inv_std }))
}

/// Training forward pass: normalize with batch statistics and fold them into
/// the running averages (`running = (1-momentum)*running + momentum*batch`,
/// with the unbiased variance going into the running variance).
pub fn batchnorm_train<E: Element>(
    x: &Tensor<E>,
    bn: &mut BatchNormParams<E>,
) -> Result<(Tensor<E>, BnCache)> {
    let (y, cache) = batchnorm_forward_stats(x, bn)?;
    let m = (x.dim(0) * x.dim(2) * x.dim(3)) as f64;
    let unbias = m / (m - 1.0);
    for ci in 0..bn.channels() {
        let var_b = 1.0 / (cache.inv_std[ci] * cache.inv_std[ci]) - bn.eps;
        let rm = bn.running_mean.data()[ci].as_f64();
        let rv = bn.running_var.data()[ci].as_f64();
        bn.running_mean.data_mut()[ci] =
            el((1.0 - bn.momentum) * rm + bn.momentum * cache.mean[ci]);
        bn.running_var.data_mut()[ci] =
            el((1.0 - bn.momentum) * rv + bn.momentum * var_b * unbias);
    }
    Ok((y, cache))
}

/// Gradients through the training-mode forward pass (batch statistics are a
/// function of `x`, which the standard three-term formula accounts for).
/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<E: Element>(
    x: &Tensor<E>,
    bn: &BatchNormParams<E>,
    cache: &BnCache,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    check_input(x, bn)?;
    if dy.shape() != x.shape() {
        return Err(Error::shape(format!(
            "batchnorm_backward: dy {:?} vs x {:?}",
            dy.shape(),
            x.shape()
        )));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let spatial = h * w;
    let m = (n * spatial) as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ci in 0..c {
        let mu = cache.mean[ci];
        let istd = cache.inv_std[ci];
        // First pass: sum(dy) and sum(dy * xhat).
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * spatial;
            let xs = &x.data()[base..base + spatial];
            let gs = &dy.data()[base..base + spatial];
            for (&xv, &gv) in xs.iter().zip(gs) {
                let xhat = (xv.as_f64() - mu) * istd;
                sum_dy += gv.as_f64();
                sum_dy_xhat += gv.as_f64() * xhat;
            }
        }
        dgamma.data_mut()[ci] = el(sum_dy_xhat);
        dbeta.data_mut()[ci] = el(sum_dy);

        let g = bn.gamma.data()[ci].as_f64();
        let mean_dy = sum_dy / m;
        let mean_dy_xhat = sum_dy_xhat / m;
        for ni in 0..n {
            let base = (ni * c + ci) * spatial;
            for off in 0..spatial {
                let xhat = (x.data()[base + off].as_f64() - mu) * istd;
                let dyv = dy.data()[base + off].as_f64();
                dx.data_mut()[base + off] =
                    el(g * istd * (dyv - mean_dy - xhat * mean_dy_xhat));
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{fd_grad_at, naive_batchnorm_infer, rel_err};
    use crate::rng;

    #[test]
    fn infer_matches_reference() {
        let mut r = rng::seeded(9);
        let x = rng::normal_tensor::<f64>(&mut r, &[2, 3, 4, 4], 1.5);
        let mut bn = BatchNormParams::<f64>::new(3);
        bn.gamma = rng::normal_tensor(&mut r, &[3], 1.0);
        bn.beta = rng::normal_tensor(&mut r, &[3], 1.0);
        bn.running_mean = rng::normal_tensor(&mut r, &[3], 1.0);
        bn.running_var = Tensor::from_f64_vec(&[3], &[0.5, 1.0, 2.5]).unwrap();
        let y = batchnorm_infer(&x, &bn).unwrap();
        let want = naive_batchnorm_infer(
            &x,
            bn.gamma.data(),
            bn.beta.data(),
            bn.running_mean.data(),
            bn.running_var.data(),
            bn.eps,
        );
        assert!(y.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn train_mode_normalizes_to_gamma_beta() {
        let mut r = rng::seeded(10);
        let x = rng::normal_tensor::<f64>(&mut r, &[4, 2, 8, 8], 3.0);
        let mut bn = BatchNormParams::<f64>::new(2);
        bn.gamma = Tensor::from_f64_vec(&[2], &[1.5, -0.5]).unwrap();
        bn.beta = Tensor::from_f64_vec(&[2], &[0.25, 2.0]).unwrap();
        let (y, cache) = batchnorm_train(&x, &mut bn).unwrap();

        let (n, c, h, w) = (4usize, 2usize, 8usize, 8usize);
        let m = (n * h * w) as f64;
        for ci in 0..c {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for ni in 0..n {
                for hh in 0..h {
                    for ww in 0..w {
                        let v = y.at4(ni, ci, hh, ww);
                        sum += v;
                        sq += v * v;
                    }
                }
            }
            let mean = sum / m;
            let std = (sq / m - mean * mean).sqrt();
            let beta = bn.beta.data()[ci];
            let gamma = bn.gamma.data()[ci].abs();
            assert!((mean - beta).abs() < 1e-6, "mean {mean} vs beta {beta}");
            // Exact expected std accounts for the eps inside the normalizer.
            let var_b = 1.0 / (cache.inv_std[ci] * cache.inv_std[ci]) - bn.eps;
            let expected_std = gamma * (var_b / (var_b + bn.eps)).sqrt();
            assert!((std - expected_std).abs() < 1e-6, "std {std} vs {expected_std}");
            assert!((std - gamma).abs() < 1e-4, "std {std} far from |gamma| {gamma}");
        }
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let mut r = rng::seeded(11);
        // Shifted data: mean 5, std 2.
        let x = rng::normal_tensor::<f64>(&mut r, &[8, 1, 4, 4], 2.0).map(|v| v + 5.0);
        let mut bn = BatchNormParams::<f64>::new(1);
        for _ in 0..200 {
            batchnorm_train(&x, &mut bn).unwrap();
        }
        assert!((bn.running_mean.data()[0] - 5.0).abs() < 0.1);
        assert!((bn.running_var.data()[0] - 4.0).abs() < 0.5);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng::seeded(12);
        let x = rng::normal_tensor::<f64>(&mut r, &[2, 2, 3, 3], 1.0);
        let mut bn = BatchNormParams::<f64>::new(2);
        bn.gamma = Tensor::from_f64_vec(&[2], &[1.2, 0.7]).unwrap();
        bn.beta = Tensor::from_f64_vec(&[2], &[-0.3, 0.6]).unwrap();
        let probe = rng::normal_tensor::<f64>(&mut r, &[2, 2, 3, 3], 1.0);

        let (_, cache) = batchnorm_forward_stats(&x, &bn).unwrap();
        let (dx, dgamma, dbeta) = batchnorm_backward(&x, &bn, &cache, &probe).unwrap();

        let j_of_x = |vals: &[f64]| {
            let xt = Tensor::from_vec(x.shape(), vals.to_vec()).unwrap();
            let (y, _) = batchnorm_forward_stats(&xt, &bn).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        for i in 0..x.len() {
            let fd = fd_grad_at(j_of_x, x.data(), i, 1e-5);
            assert!(rel_err(dx.data()[i], fd) < 1e-5, "dx[{i}]: {} vs {fd}", dx.data()[i]);
        }

        let j_of_gamma = |vals: &[f64]| {
            let mut b2 = bn.clone();
            b2.gamma = Tensor::from_vec(&[2], vals.to_vec()).unwrap();
            let (y, _) = batchnorm_forward_stats(&x, &b2).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        for i in 0..2 {
            let fd = fd_grad_at(j_of_gamma, bn.gamma.data(), i, 1e-5);
            assert!(rel_err(dgamma.data()[i], fd) < 1e-6, "dgamma[{i}]");
        }

        let j_of_beta = |vals: &[f64]| {
            let mut b2 = bn.clone();
            b2.beta = Tensor::from_vec(&[2], vals.to_vec()).unwrap();
            let (y, _) = batchnorm_forward_stats(&x, &b2).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        for i in 0..2 {
            let fd = fd_grad_at(j_of_beta, bn.beta.data(), i, 1e-5);
            assert!(rel_err(dbeta.data()[i], fd) < 1e-6, "dbeta[{i}]");
        }
    }

    #[test]
    fn rejects_batch_of_one_value() {
        let x = Tensor::<f64>::zeros(&[1, 3, 1, 1]);
        let mut bn = BatchNormParams::new(3);
        assert!(batchnorm_train(&x, &mut bn).is_err());
    }
}
