//! Deliberately naive reference implementations.
//!
//! Everything here is written as the most direct loop transcription of the
//! defining formula, independent of the optimized kernels in [`crate::ops`]
//! and [`crate::act`]. Tests pin the fast paths against these, and the
//! gradient checker uses the central-difference helpers. All reference code
//! works in `f64`.

use crate::tensor::Tensor;

/// Direct convolution: `x` is NCHW, `w` is (C_out, C_in, k, k), `b` is
/// (C_out). Zero padding `pad` on all sides, square kernel, square stride.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, c_in, h, wid) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (c_out, k) = (w.dim(0), w.dim(2));
    assert_eq!(w.dim(1), c_in);
    assert_eq!(w.dim(3), k);
    let h_out = (h + 2 * pad - k) / stride + 1;
    let w_out = (wid + 2 * pad - k) / stride + 1;
    let mut y = Tensor::zeros(&[n, c_out, h_out, w_out]);
    for ni in 0..n {
        for co in 0..c_out {
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let mut acc = b.data()[co];
                    for ci in 0..c_in {
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = (oh * stride + kh) as isize - pad as isize;
                                let iw = (ow * stride + kw) as isize - pad as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wid as isize {
                                    continue;
                                }
                                acc += x.at4(ni, ci, ih as usize, iw as usize)
                                    * w.at4(co, ci, kh, kw);
                            }
                        }
                    }
                    let idx = y.idx4(ni, co, oh, ow);
                    y.data_mut()[idx] = acc;
                }
            }
        }
    }
    y
}

/// 2x2 stride-2 max pooling (requires even spatial dims).
pub fn naive_maxpool2(x: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    assert!(h % 2 == 0 && w % 2 == 0);
    let mut y = Tensor::zeros(&[n, c, h / 2, w / 2]);
    for ni in 0..n {
        for ci in 0..c {
            for oh in 0..h / 2 {
                for ow in 0..w / 2 {
                    let mut best = f64::NEG_INFINITY;
                    for dh in 0..2 {
                        for dw in 0..2 {
                            let v = x.at4(ni, ci, 2 * oh + dh, 2 * ow + dw);
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    let idx = y.idx4(ni, ci, oh, ow);
                    y.data_mut()[idx] = best;
                }
            }
        }
    }
    y
}

/// Global average pooling to spatial size 1x1.
pub fn naive_global_avgpool(x: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut y = Tensor::zeros(&[n, c, 1, 1]);
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = 0.0;
            for hh in 0..h {
                for ww in 0..w {
                    acc += x.at4(ni, ci, hh, ww);
                }
            }
            let idx = y.idx4(ni, ci, 0, 0);
            y.data_mut()[idx] = acc / (h * w) as f64;
        }
    }
    y
}

/// Series-informed activation, straight from its defining sum:
///
/// `y[n,c,h,w] = sum_{i,j in [-r, r]} a[c, r+i, r+j] * relu(x[n, c, h+i, w+j] + b[c])`
///
/// with zero padding outside the spatial extent. `a` is (C, 2r+1, 2r+1),
/// `b` is (C).
pub fn naive_series_act(x: &Tensor<f64>, a: &Tensor<f64>, b: &Tensor<f64>, radius: usize) -> Tensor<f64> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let span = 2 * radius + 1;
    assert_eq!(a.shape(), &[c, span, span]);
    assert_eq!(b.shape(), &[c]);
    let r = radius as isize;
    let mut y = Tensor::zeros(&[n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for hh in 0..h as isize {
                for ww in 0..w as isize {
                    let mut acc = 0.0;
                    for di in -r..=r {
                        for dj in -r..=r {
                            let (ih, iw) = (hh + di, ww + dj);
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                continue;
                            }
                            let t = (x.at4(ni, ci, ih as usize, iw as usize) + b.data()[ci]).max(0.0);
                            let a_idx =
                                (ci * span + (r + di) as usize) * span + (r + dj) as usize;
                            acc += a.data()[a_idx] * t;
                        }
                    }
                    let idx = y.idx4(ni, ci, hh as usize, ww as usize);
                    y.data_mut()[idx] = acc;
                }
            }
        }
    }
    y
}

/// Batch-norm inference transform per channel:
/// `y = gamma * (x - running_mean) / sqrt(running_var + eps) + beta`.
pub fn naive_batchnorm_infer(
    x: &Tensor<f64>,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Tensor<f64> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut y = Tensor::zeros(&[n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            let scale = gamma[ci] / (var[ci] + eps).sqrt();
            let shift = beta[ci] - mean[ci] * scale;
            for hh in 0..h {
                for ww in 0..w {
                    let idx = y.idx4(ni, ci, hh, ww);
                    y.data_mut()[idx] = x.at4(ni, ci, hh, ww) * scale + shift;
                }
            }
        }
    }
    y
}

/// Central finite-difference gradient of `f` with respect to `params`,
/// evaluated coordinate by coordinate with step `h`.
pub fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; params.len()];
    let mut work = params.to_vec();
    for i in 0..params.len() {
        let original = work[i];
        work[i] = original + h;
        let plus = f(&work);
        work[i] = original - h;
        let minus = f(&work);
        work[i] = original;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Central finite difference of `f` along a single coordinate.
pub fn fd_grad_at(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], i: usize, h: f64) -> f64 {
    let mut work = params.to_vec();
    let original = work[i];
    work[i] = original + h;
    let plus = f(&work);
    work[i] = original - h;
    let minus = f(&work);
    (plus - minus) / (2.0 * h)
}

/// Relative error between an analytic and a reference derivative, with an
/// absolute floor so near-zero pairs compare absolutely.
pub fn rel_err(analytic: f64, reference: f64) -> f64 {
    let denom = analytic.abs().max(reference.abs()).max(1e-6);
    (analytic - reference).abs() / denom
}
