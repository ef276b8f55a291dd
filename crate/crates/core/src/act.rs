//! Activations: the lambda-blended ReLU used while training runs deep, and
//! the series-informed activation that aggregates shifted ReLU responses
//! with learned per-channel weights.

use crate::error::{Error, Result};
use crate::tensor::{el, Element, Tensor};
use serde::{Deserialize, Serialize};

/// Std of the truncated normal used to initialize conv and series weights.
pub const INIT_STD: f64 = 0.2;

/// Schedule for the blend coefficient: ramps linearly from 0 to 1 over the
/// first `deep_epochs` epochs, then stays at 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub deep_epochs: usize,
}

impl LambdaSchedule {
    pub fn new(deep_epochs: usize) -> Result<Self> {
        if deep_epochs == 0 {
            return Err(Error::invalid("lambda schedule needs deep_epochs >= 1"));
        }
        Ok(LambdaSchedule { deep_epochs })
    }

    /// `lambda(e) = min(e / deep_epochs, 1)`.
    pub fn value(&self, epoch: usize) -> f64 {
        (epoch as f64 / self.deep_epochs as f64).min(1.0)
    }
}

/// Blend of ReLU and identity: `(1 - lambda) * relu(x) + lambda * x`.
///
/// At `lambda = 0` this is plain ReLU, at `lambda = 1` the identity, which is
/// what lets the surrounding pair of convolutions collapse into one at the
/// end of training. Algebraically it equals a leaky ReLU with negative slope
/// `lambda`, and it is computed that way (one multiply on the negative side)
/// so the endpoints are exact.
pub fn lambda_relu<E: Element>(x: &Tensor<E>, lambda: f64) -> Tensor<E> {
    let slope = el::<E>(lambda);
    x.map(|v| if v > E::zero() { v } else { v * slope })
}

/// Gradient of [`lambda_relu`]: 1 on the positive side, `lambda` elsewhere.
pub fn lambda_relu_backward<E: Element>(x: &Tensor<E>, lambda: f64, dy: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape() != dy.shape() {
        return Err(Error::shape(format!(
            "lambda_relu_backward: x {:?} vs dy {:?}",
            x.shape(),
            dy.shape()
        )));
    }
    let slope = el::<E>(lambda);
    let mut dx = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let g = dy.data()[i];
        dx.data_mut()[i] = if x.data()[i] > E::zero() { g } else { g * slope };
    }
    Ok(dx)
}

/// Per-channel parameters of the series-informed activation.
///
/// For radius `n`, each channel carries a `(2n+1) x (2n+1)` mixing kernel `a`
/// and a scalar input shift `b`:
///
/// `y[c,h,w] = sum_{i,j in [-n, n]} a[c, n+i, n+j] * relu(x[c, h+i, w+j] + b[c])`
///
/// computed as a shifted-ReLU map followed by a depthwise cross-correlation
/// with zero padding `n`. With `n = 0`, `a = 1`, `b = 0` the op reduces
/// exactly (bit for bit) to ReLU.
#[derive(Debug, Clone)]
pub struct SeriesActParams<E: Element> {
    pub radius: usize,
    /// `(C, 2n+1, 2n+1)` mixing weights.
    pub a: Tensor<E>,
    /// `(C)` input shifts.
    pub b: Tensor<E>,
}

impl<E: Element> SeriesActParams<E> {
    pub fn new(radius: usize, a: Tensor<E>, b: Tensor<E>) -> Result<Self> {
        let span = 2 * radius + 1;
        if a.rank() != 3 || a.dim(1) != span || a.dim(2) != span {
            return Err(Error::shape(format!(
                "series act: a must be (C, {span}, {span}), got {:?}",
                a.shape()
            )));
        }
        if b.rank() != 1 || b.dim(0) != a.dim(0) {
            return Err(Error::shape(format!(
                "series act: b must be ({}), got {:?}",
                a.dim(0),
                b.shape()
            )));
        }
        Ok(SeriesActParams { radius, a, b })
    }

    /// Identity-of-ReLU parameters: center tap 1, everything else 0.
    pub fn relu_equivalent(channels: usize, radius: usize) -> Self {
        let span = 2 * radius + 1;
        let mut a = Tensor::zeros(&[channels, span, span]);
        for c in 0..channels {
            let center = (c * span + radius) * span + radius;
            a.data_mut()[center] = E::one();
        }
        SeriesActParams {
            radius,
            a,
            b: Tensor::zeros(&[channels]),
        }
    }

    /// Random init: truncated-normal mixing weights, zero shifts.
    pub fn init(channels: usize, radius: usize, rng: &mut crate::rng::Prng) -> Self {
        let span = 2 * radius + 1;
        SeriesActParams {
            radius,
            a: crate::rng::trunc_normal_tensor(rng, &[channels, span, span], INIT_STD),
            b: Tensor::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.a.dim(0)
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Saved shifted-ReLU map `t = relu(x + b)` for the backward pass.
#[derive(Debug, Clone)]
pub struct SeriesCache<E: Element> {
    pub t: Tensor<E>,
}

fn check_series<E: Element>(x: &Tensor<E>, p: &SeriesActParams<E>) -> Result<()> {
    if x.rank() != 4 {
        return Err(Error::shape(format!("series act wants NCHW, got {:?}", x.shape())));
    }
    if x.dim(1) != p.channels() {
        return Err(Error::shape(format!(
            "series act: input has {} channels, params have {}",
            x.dim(1),
            p.channels()
        )));
    }
    Ok(())
}

/// Accumulate `dst[h][w] += a_tap * src[h+ti][w+tj]` over the valid region
/// for every tap `(ti, tj)` in `[-r, r]^2`. `flip` mirrors the tap lookup,
/// which turns the correlation into its adjoint.
fn tap_accumulate<E: Element>(
    src: &[E],
    dst: &mut [E],
    h: usize,
    w: usize,
    a_plane: &[E],
    r: usize,
    flip: bool,
) {
    let span = 2 * r + 1;
    let ri = r as isize;
    for ti in -ri..=ri {
        for tj in -ri..=ri {
            let (ai, aj) = if flip { (-ti, -tj) } else { (ti, tj) };
            let a_tap = a_plane[((ri + ai) as usize) * span + (ri + aj) as usize];
            if a_tap == E::zero() {
                continue;
            }
            // Clamp below at zero: taps can overshoot the whole map when
            // the window is larger than the feature grid.
            let h_lo = (-ti).max(0) as usize;
            let h_hi = (h as isize).min(h as isize - ti).max(0) as usize;
            let w_lo = (-tj).max(0) as usize;
            let w_hi = (w as isize).min(w as isize - tj).max(0) as usize;
            for hh in h_lo..h_hi {
                let src_row = ((hh as isize + ti) as usize) * w;
                let dst_row = hh * w;
                for ww in w_lo..w_hi {
                    dst[dst_row + ww] +=
                        a_tap * src[src_row + (ww as isize + tj) as usize];
                }
            }
        }
    }
}

/// Forward pass of the series-informed activation.
pub fn series_forward<E: Element>(
    x: &Tensor<E>,
    p: &SeriesActParams<E>,
) -> Result<(Tensor<E>, SeriesCache<E>)> {
    check_series(x, p)?;
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let spatial = h * w;
    let span = 2 * p.radius + 1;

    // Shifted ReLU map.
    let mut t = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            let b = p.b.data()[ci];
            let base = (ni * c + ci) * spatial;
            let src = &x.data()[base..base + spatial];
            let dst = &mut t.data_mut()[base..base + spatial];
            for (d, &s) in dst.iter_mut().zip(src) {
                let v = s + b;
                // NaN must pass through, not clamp to zero: a poisoned
                // value has to stay visible to the non-finite diagnostics.
                *d = if v > E::zero() || v.is_nan() { v } else { E::zero() };
            }
        }
    }

    // Fast exit for the pure-ReLU shape: a single center tap of weight one
    // makes the correlation the identity, so return `t` unchanged; with
    // b = 0 the result is bitwise ReLU.
    let mut y = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            let a_plane = &p.a.data()[ci * span * span..(ci + 1) * span * span];
            tap_accumulate(
                &t.data()[base..base + spatial],
                &mut y.data_mut()[base..base + spatial],
                h,
                w,
                a_plane,
                p.radius,
                false,
            );
        }
    }
    Ok((y, SeriesCache { t }))
}

/// Gradients of [`series_forward`]: `(dx, da, db)`.
pub fn series_backward<E: Element>(
    x: &Tensor<E>,
    p: &SeriesActParams<E>,
    cache: &SeriesCache<E>,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    check_series(x, p)?;
    if dy.shape() != x.shape() {
        return Err(Error::shape(format!(
            "series_backward: dy {:?} vs x {:?}",
            dy.shape(),
            x.shape()
        )));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let spatial = h * w;
    let span = 2 * p.radius + 1;
    let ri = p.radius as isize;

    let mut dx = Tensor::zeros(x.shape());
    let mut da = Tensor::zeros(p.a.shape());
    let mut db = Tensor::zeros(p.b.shape());
    let mut dt_plane = vec![E::zero(); spatial];

    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            let t_plane = &cache.t.data()[base..base + spatial];
            let dy_plane = &dy.data()[base..base + spatial];

            // da[c, n+i, n+j] += sum_{h,w} dy[h, w] * t[h+i, w+j]
            let da_plane = &mut da.data_mut()[ci * span * span..(ci + 1) * span * span];
            for ti in -ri..=ri {
                for tj in -ri..=ri {
                    let h_lo = (-ti).max(0) as usize;
                    let h_hi = (h as isize).min(h as isize - ti).max(0) as usize;
                    let w_lo = (-tj).max(0) as usize;
                    let w_hi = (w as isize).min(w as isize - tj).max(0) as usize;
                    let mut acc = E::zero();
                    for hh in h_lo..h_hi {
                        let t_row = ((hh as isize + ti) as usize) * w;
                        let dy_row = hh * w;
                        for ww in w_lo..w_hi {
                            acc += dy_plane[dy_row + ww]
                                * t_plane[t_row + (ww as isize + tj) as usize];
                        }
                    }
                    da_plane[((ri + ti) as usize) * span + (ri + tj) as usize] += acc;
                }
            }

            // dt = adjoint correlation of dy with a, then gate by relu mask.
            dt_plane.iter_mut().for_each(|v| *v = E::zero());
            let a_plane = &p.a.data()[ci * span * span..(ci + 1) * span * span];
            tap_accumulate(dy_plane, &mut dt_plane, h, w, a_plane, p.radius, true);

            let dx_plane = &mut dx.data_mut()[base..base + spatial];
            let mut db_acc = E::zero();
            for i in 0..spatial {
                if t_plane[i] > E::zero() {
                    dx_plane[i] = dt_plane[i];
                    db_acc += dt_plane[i];
                }
            }
            db.data_mut()[ci] += db_acc;
        }
    }
    Ok((dx, da, db))
}

/// Multiply-accumulate count of the series activation on an `H x W x C` map
/// under the window-area reading: `H * W * C * (2n+1)^2`.
pub fn series_flops_radius(h: usize, w: usize, c: usize, n: usize) -> u64 {
    let span = (2 * n + 1) as u64;
    (h as u64) * (w as u64) * (c as u64) * span * span
}

/// The same count under the literal `n^2` reading, where `n` is taken as the
/// full window edge rather than a radius: `H * W * C * n^2`. Kept alongside
/// the radius form because published per-layer counts use this convention.
pub fn series_flops_literal(h: usize, w: usize, c: usize, n: usize) -> u64 {
    (h as u64) * (w as u64) * (c as u64) * (n as u64) * (n as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{fd_grad_at, naive_series_act, rel_err};
    use crate::rng;

    #[test]
    fn lambda_schedule_endpoints() {
        let s = LambdaSchedule::new(50).unwrap();
        assert_eq!(s.value(0), 0.0);
        assert_eq!(s.value(25), 0.5);
        assert_eq!(s.value(50), 1.0);
        assert_eq!(s.value(51), 1.0);
        assert_eq!(s.value(10_000), 1.0);
        assert!(LambdaSchedule::new(0).is_err());
    }

    #[test]
    fn lambda_relu_is_relu_at_zero_and_identity_at_one() {
        let mut r = rng::seeded(40);
        let x = rng::normal_tensor::<f32>(&mut r, &[64], 2.0);
        let at0 = lambda_relu(&x, 0.0);
        for (y, &v) in at0.data().iter().zip(x.data()) {
            assert_eq!(*y, v.max(0.0));
        }
        let at1 = lambda_relu(&x, 1.0);
        assert_eq!(at1.data(), x.data(), "lambda=1 must be bitwise identity");
    }

    #[test]
    fn lambda_relu_midpoint_values() {
        let x = Tensor::<f64>::from_f64_vec(&[2], &[-2.0, 3.0]).unwrap();
        let y = lambda_relu(&x, 0.5);
        assert_eq!(y.data(), &[-1.0, 3.0]);
    }

    #[test]
    fn lambda_relu_backward_matches_finite_differences() {
        let mut r = rng::seeded(41);
        // Keep x away from the kink.
        let x = rng::normal_tensor::<f64>(&mut r, &[40], 1.0)
            .map(|v| if v.abs() < 1e-2 { v + 0.05 } else { v });
        let probe = rng::normal_tensor::<f64>(&mut r, &[40], 1.0);
        for &lambda in &[0.0, 0.3, 0.7, 1.0] {
            let dx = lambda_relu_backward(&x, lambda, &probe).unwrap();
            let j = |vals: &[f64]| {
                let t = Tensor::from_vec(&[40], vals.to_vec()).unwrap();
                lambda_relu(&t, lambda)
                    .data()
                    .iter()
                    .zip(probe.data())
                    .map(|(a, p)| a * p)
                    .sum()
            };
            for i in 0..x.len() {
                let fd = fd_grad_at(j, x.data(), i, 1e-6);
                assert!(rel_err(dx.data()[i], fd) < 1e-6, "lambda {lambda}, dx[{i}]");
            }
        }
    }

    #[test]
    fn degenerate_series_is_bitwise_relu() {
        let mut r = rng::seeded(42);
        let x = rng::normal_tensor::<f32>(&mut r, &[2, 3, 5, 5], 2.0);
        let p = SeriesActParams::<f32>::relu_equivalent(3, 0);
        let (y, _) = series_forward(&x, &p).unwrap();
        for (yv, xv) in y.data().iter().zip(x.data()) {
            assert_eq!(yv.to_bits(), xv.max(0.0).to_bits());
        }
    }

    #[test]
    fn relu_equivalent_holds_at_any_radius() {
        // Center-only taps make the correlation an identity for every n.
        let mut r = rng::seeded(43);
        let x = rng::normal_tensor::<f64>(&mut r, &[1, 2, 6, 6], 1.0);
        for radius in 0..=3 {
            let p = SeriesActParams::<f64>::relu_equivalent(2, radius);
            let (y, _) = series_forward(&x, &p).unwrap();
            let relu = x.map(|v| v.max(0.0));
            assert_eq!(y, relu, "radius {radius}");
        }
    }

    #[test]
    fn series_matches_reference_over_radii() {
        let mut r = rng::seeded(44);
        for radius in 0..=3 {
            let span = 2 * radius + 1;
            let x = rng::normal_tensor::<f64>(&mut r, &[2, 3, 7, 6], 1.0);
            let a = rng::normal_tensor::<f64>(&mut r, &[3, span, span], 0.5);
            let b = rng::normal_tensor::<f64>(&mut r, &[3], 0.5);
            let p = SeriesActParams::new(radius, a.clone(), b.clone()).unwrap();
            let (y, _) = series_forward(&x, &p).unwrap();
            let want = naive_series_act(&x, &a, &b, radius);
            assert!(y.max_abs_diff(&want).unwrap() < 1e-12, "radius {radius}");
        }
    }

    #[test]
    fn window_larger_than_feature_map_matches_oracle() {
        // Late stages shrink the grid below the tap window (a 2x2 map under
        // a 7x7 window); every tap that overshoots must simply drop out.
        let mut r = rng::seeded(46);
        let radius = 3;
        let span = 2 * radius + 1;
        let x = rng::normal_tensor::<f64>(&mut r, &[2, 3, 2, 2], 1.0);
        let a = rng::normal_tensor::<f64>(&mut r, &[3, span, span], 0.5);
        let b = rng::normal_tensor::<f64>(&mut r, &[3], 0.5);
        let p = SeriesActParams::new(radius, a.clone(), b.clone()).unwrap();
        let (y, _) = series_forward(&x, &p).unwrap();
        let want = naive_series_act(&x, &a, &b, radius);
        assert!(y.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn series_backward_matches_finite_differences() {
        let mut r = rng::seeded(45);
        let radius = 2;
        let span = 2 * radius + 1;
        let (c, h, w) = (2, 5, 5);
        // Keep x + b away from the relu kink so central differences are clean.
        let mut x = rng::normal_tensor::<f64>(&mut r, &[1, c, h, w], 1.0);
        for v in x.data_mut() {
            if v.abs() < 5e-3 {
                *v += 0.1;
            }
        }
        let a = rng::normal_tensor::<f64>(&mut r, &[c, span, span], 0.5);
        let b = Tensor::zeros(&[c]);
        let p = SeriesActParams::new(radius, a, b).unwrap();
        let probe = rng::normal_tensor::<f64>(&mut r, &[1, c, h, w], 1.0);

        let (_, cache) = series_forward(&x, &p).unwrap();
        let (dx, da, db) = series_backward(&x, &p, &cache, &probe).unwrap();

        let j_x = |vals: &[f64]| {
            let t = Tensor::from_vec(x.shape(), vals.to_vec()).unwrap();
            let (y, _) = series_forward(&t, &p).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
        };
        for i in 0..x.len() {
            let fd = fd_grad_at(j_x, x.data(), i, 1e-6);
            assert!(rel_err(dx.data()[i], fd) < 1e-5, "dx[{i}]");
        }

        let j_a = |vals: &[f64]| {
            let at = Tensor::from_vec(p.a.shape(), vals.to_vec()).unwrap();
            let pp = SeriesActParams::new(radius, at, p.b.clone()).unwrap();
            let (y, _) = series_forward(&x, &pp).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
        };
        for i in 0..p.a.len() {
            let fd = fd_grad_at(j_a, p.a.data(), i, 1e-6);
            assert!(rel_err(da.data()[i], fd) < 1e-5, "da[{i}]");
        }

        let j_b = |vals: &[f64]| {
            let bt = Tensor::from_vec(&[c], vals.to_vec()).unwrap();
            let pp = SeriesActParams::new(radius, p.a.clone(), bt).unwrap();
            let (y, _) = series_forward(&x, &pp).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
        };
        for i in 0..c {
            let fd = fd_grad_at(j_b, p.b.data(), i, 1e-6);
            assert!(rel_err(db.data()[i], fd) < 1e-5, "db[{i}]");
        }
    }

    #[test]
    fn flop_counts_match_both_conventions() {
        // Window-area form: (2*3+1)^2 = 49 taps per position.
        assert_eq!(series_flops_radius(10, 10, 8, 3), 10 * 10 * 8 * 49);
        assert_eq!(series_flops_radius(4, 4, 2, 0), 4 * 4 * 2);
        // Literal form with n taken as the window edge.
        assert_eq!(series_flops_literal(10, 10, 8, 7), 10 * 10 * 8 * 49);
        // A pointwise conv with 2048 outputs costs 2048/49 ~ 41.8x more
        // multiplies per position than a 7-edge series window.
        let conv_per_pos = 2048u64;
        let series_per_pos = series_flops_literal(1, 1, 1, 7);
        let ratio = conv_per_pos as f64 / series_per_pos as f64;
        assert!((ratio - 41.8).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn param_count_is_window_plus_shift() {
        let p = SeriesActParams::<f32>::relu_equivalent(16, 3);
        assert_eq!(p.param_count(), 16 * 49 + 16);
    }
}
