//! Fully connected layer on 2D activations `(N, in)`.
//!
//! The network body expresses its head as a 1x1 convolution on a 1x1 map;
//! this op is the flat-matrix formulation of the same transform, and the
//! tests pin the two against each other.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Element, Tensor};

/// `y = x * W^T + b` where `x` is `(N, in)`, `w` is `(out, in)`, `b` is `(out)`.
pub fn linear<E: Element>(x: &Tensor<E>, w: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if x.rank() != 2 || w.rank() != 2 {
        return Err(Error::shape(format!(
            "linear wants matrices, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (n, d_in) = (x.dim(0), x.dim(1));
    let (d_out, d_in2) = (w.dim(0), w.dim(1));
    if d_in != d_in2 {
        return Err(Error::shape(format!(
            "linear: input dim {d_in} vs weight dim {d_in2}"
        )));
    }
    if b.rank() != 1 || b.dim(0) != d_out {
        return Err(Error::shape(format!("linear: bias {:?} vs out {d_out}", b.shape())));
    }
    // y[n][o] = sum_i x[n][i] * w[o][i]; stream over w rows per sample.
    let mut y = Tensor::zeros(&[n, d_out]);
    for ni in 0..n {
        let x_row = &x.data()[ni * d_in..(ni + 1) * d_in];
        let y_row = &mut y.data_mut()[ni * d_out..(ni + 1) * d_out];
        for o in 0..d_out {
            let w_row = &w.data()[o * d_in..(o + 1) * d_in];
            let mut acc = b.data()[o];
            for (&xv, &wv) in x_row.iter().zip(w_row) {
                acc += xv * wv;
            }
            y_row[o] = acc;
        }
    }
    Ok(y)
}

/// Gradients of [`linear`]: `(dx, dw, db)`.
pub fn linear_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (n, d_in) = (x.dim(0), x.dim(1));
    let (d_out, _) = (w.dim(0), w.dim(1));
    if dy.shape() != [n, d_out] {
        return Err(Error::shape(format!(
            "linear_backward: dy {:?}, expected {:?}",
            dy.shape(),
            [n, d_out]
        )));
    }
    // dx = dy * w : (N, out) x (out, in)
    let mut dx = Tensor::zeros(&[n, d_in]);
    matmul_into(dy.data(), w.data(), dx.data_mut(), n, d_out, d_in);

    // dw = dy^T * x : (out, N) x (N, in); transpose dy once.
    let mut dy_t = vec![E::zero(); d_out * n];
    for ni in 0..n {
        for o in 0..d_out {
            dy_t[o * n + ni] = dy.data()[ni * d_out + o];
        }
    }
    let mut dw = Tensor::zeros(&[d_out, d_in]);
    matmul_into(&dy_t, x.data(), dw.data_mut(), d_out, n, d_in);

    let mut db = Tensor::zeros(&[d_out]);
    for ni in 0..n {
        for o in 0..d_out {
            db.data_mut()[o] += dy.data()[ni * d_out + o];
        }
    }
    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv::{conv2d, ConvParams};
    use crate::reference::{fd_grad_at, rel_err};
    use crate::rng;

    #[test]
    fn agrees_with_pointwise_conv_on_1x1_maps() {
        let mut r = rng::seeded(21);
        let (n, d_in, d_out) = (5, 7, 4);
        let x2 = rng::normal_tensor::<f64>(&mut r, &[n, d_in], 1.0);
        let w = rng::normal_tensor::<f64>(&mut r, &[d_out, d_in], 0.5);
        let b = rng::normal_tensor::<f64>(&mut r, &[d_out], 0.5);

        let flat = linear(&x2, &w, &b).unwrap();

        let x4 = x2.clone().reshaped(&[n, d_in, 1, 1]).unwrap();
        let conv = ConvParams::new(
            w.clone().reshaped(&[d_out, d_in, 1, 1]).unwrap(),
            b.clone(),
            1,
            0,
        )
        .unwrap();
        let y4 = conv2d(&x4, &conv).unwrap();
        let y2 = y4.reshaped(&[n, d_out]).unwrap();
        assert!(flat.max_abs_diff(&y2).unwrap() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng::seeded(22);
        let (n, d_in, d_out) = (3, 5, 4);
        let x = rng::normal_tensor::<f64>(&mut r, &[n, d_in], 1.0);
        let w = rng::normal_tensor::<f64>(&mut r, &[d_out, d_in], 0.5);
        let b = rng::normal_tensor::<f64>(&mut r, &[d_out], 0.5);
        let probe = rng::normal_tensor::<f64>(&mut r, &[n, d_out], 1.0);

        let (dx, dw, db) = linear_backward(&x, &w, &probe).unwrap();

        let j_x = |vals: &[f64]| {
            let xt = Tensor::from_vec(x.shape(), vals.to_vec()).unwrap();
            let y = linear(&xt, &w, &b).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
        };
        for i in 0..x.len() {
            assert!(rel_err(dx.data()[i], fd_grad_at(j_x, x.data(), i, 1e-5)) < 1e-6);
        }
        let j_w = |vals: &[f64]| {
            let wt = Tensor::from_vec(w.shape(), vals.to_vec()).unwrap();
            let y = linear(&x, &wt, &b).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
        };
        for i in 0..w.len() {
            assert!(rel_err(dw.data()[i], fd_grad_at(j_w, w.data(), i, 1e-5)) < 1e-6);
        }
        let j_b = |vals: &[f64]| {
            let bt = Tensor::from_vec(b.shape(), vals.to_vec()).unwrap();
            let y = linear(&x, &w, &bt).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
        };
        for i in 0..b.len() {
            assert!(rel_err(db.data()[i], fd_grad_at(j_b, b.data(), i, 1e-5)) < 1e-6);
        }
    }
}
