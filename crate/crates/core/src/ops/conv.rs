//! 2D convolution via im2col + matmul, with a no-copy fast path for the
//! pointwise (1x1, stride 1, no padding) case that dominates this
//! architecture.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Element, Tensor};

/// Square-kernel convolution parameters. Weight layout is
/// `(C_out, C_in, k, k)`, bias is `(C_out)`.
#[derive(Debug, Clone)]
pub struct ConvParams<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    pub stride: usize,
    pub padding: usize,
}

impl<E: Element> ConvParams<E> {
    pub fn new(weight: Tensor<E>, bias: Tensor<E>, stride: usize, padding: usize) -> Result<Self> {
        if weight.rank() != 4 {
            return Err(Error::shape(format!(
                "conv weight must be rank 4, got {:?}",
                weight.shape()
            )));
        }
        if weight.dim(2) != weight.dim(3) {
            return Err(Error::shape(format!(
                "conv kernel must be square, got {:?}",
                weight.shape()
            )));
        }
        if bias.rank() != 1 || bias.dim(0) != weight.dim(0) {
            return Err(Error::shape(format!(
                "conv bias shape {:?} does not match C_out={}",
                bias.shape(),
                weight.dim(0)
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv stride must be >= 1"));
        }
        if weight.dim(2) == 0 {
            return Err(Error::invalid("conv kernel size must be >= 1"));
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn c_in(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2)
    }

    /// True for the 1x1 / stride-1 / no-padding case that reduces to a
    /// per-sample matrix product with no data movement.
    pub fn is_pointwise(&self) -> bool {
        self.kernel() == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output spatial dims: `floor((d + 2p - k) / s) + 1`, each must be >= 1.
pub fn conv_out_dims(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::shape(format!(
            "conv input {h}x{w} (pad {padding}) smaller than kernel {k}"
        )));
    }
    let h_out = (h + 2 * padding - k) / stride + 1;
    let w_out = (w + 2 * padding - k) / stride + 1;
    Ok((h_out, w_out))
}

/// Unfold `x` (NCHW) into the im2col matrix of shape
/// `(C_in*k*k, N*H_out*W_out)`.
///
/// Row index is `(ci*k + kh)*k + kw`; column index is `(n*H_out + oh)*W_out + ow`.
/// For a 1x1 / stride-1 / unpadded kernel on a single sample this layout is
/// exactly the flattened input, which is what lets the pointwise conv path
/// skip the copy entirely.
pub fn im2col<E: Element>(
    x: &Tensor<E>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    if x.rank() != 4 {
        return Err(Error::shape(format!("im2col wants NCHW, got {:?}", x.shape())));
    }
    let (n, c_in, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (h_out, w_out) = conv_out_dims(h, w, k, stride, padding)?;
    let cols = n * h_out * w_out;
    let mut out = Tensor::zeros(&[c_in * k * k, cols]);
    for ni in 0..n {
        let col_base = ni * h_out * w_out;
        im2col_sample(x, ni, k, stride, padding, h_out, w_out, cols, col_base, out.data_mut());
    }
    Ok(out)
}

/// Fill the columns of one sample into `buf`, a row-major
/// `(C_in*k*k, total_cols)` buffer starting at column `col_base`.
#[allow(clippy::too_many_arguments)]
fn im2col_sample<E: Element>(
    x: &Tensor<E>,
    ni: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
    total_cols: usize,
    col_base: usize,
    buf: &mut [E],
) {
    let (c_in, h, w) = (x.dim(1), x.dim(2), x.dim(3));
    let xd = x.data();
    for ci in 0..c_in {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let row_buf = &mut buf[row * total_cols..(row + 1) * total_cols];
                for oh in 0..h_out {
                    let ih = (oh * stride + kh) as isize - padding as isize;
                    let col_row = col_base + oh * w_out;
                    if ih < 0 || ih >= h as isize {
                        for ow in 0..w_out {
                            row_buf[col_row + ow] = E::zero();
                        }
                        continue;
                    }
                    let x_row = ((ni * c_in + ci) * h + ih as usize) * w;
                    for ow in 0..w_out {
                        let iw = (ow * stride + kw) as isize - padding as isize;
                        row_buf[col_row + ow] = if iw < 0 || iw >= w as isize {
                            E::zero()
                        } else {
                            xd[x_row + iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold a `(C_in*k*k, H_out*W_out)` column-gradient matrix for one sample
/// back into `dx`, accumulating where patches overlap.
#[allow(clippy::too_many_arguments)]
fn col2im_sample_accumulate<E: Element>(
    cols: &[E],
    ni: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
    dx: &mut Tensor<E>,
) {
    let (c_in, h, w) = (dx.dim(1), dx.dim(2), dx.dim(3));
    let n_cols = h_out * w_out;
    for ci in 0..c_in {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let row_vals = &cols[row * n_cols..(row + 1) * n_cols];
                for oh in 0..h_out {
                    let ih = (oh * stride + kh) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dx_row = ((ni * c_in + ci) * h + ih as usize) * w;
                    for ow in 0..w_out {
                        let iw = (ow * stride + kw) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dx.data_mut()[dx_row + iw as usize] += row_vals[oh * w_out + ow];
                    }
                }
            }
        }
    }
}

/// Convolution forward pass. `x` is NCHW; output is
/// `(N, C_out, H_out, W_out)`.
pub fn conv2d<E: Element>(x: &Tensor<E>, p: &ConvParams<E>) -> Result<Tensor<E>> {
    if x.rank() != 4 {
        return Err(Error::shape(format!("conv2d wants NCHW, got {:?}", x.shape())));
    }
    if x.dim(1) != p.c_in() {
        return Err(Error::shape(format!(
            "conv2d: input has {} channels, weight wants {}",
            x.dim(1),
            p.c_in()
        )));
    }
    let (n, _, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let k = p.kernel();
    let (h_out, w_out) = conv_out_dims(h, w, k, p.stride, p.padding)?;
    let (c_out, c_in) = (p.c_out(), p.c_in());
    let spatial = h_out * w_out;
    let mut y = Tensor::zeros(&[n, c_out, h_out, w_out]);

    let w_mat = p.weight.data(); // already (C_out, C_in*k*k) row-major
    let ck2 = c_in * k * k;
    let mut col_buf = if p.is_pointwise() {
        Vec::new()
    } else {
        vec![E::zero(); ck2 * spatial]
    };

    for ni in 0..n {
        let y_slab = &mut y.data_mut()[ni * c_out * spatial..(ni + 1) * c_out * spatial];
        if p.is_pointwise() {
            // (C_out, C_in) x (C_in, H*W) straight on the input buffer.
            let x_slab = &x.data()[ni * c_in * spatial..(ni + 1) * c_in * spatial];
            matmul_into(w_mat, x_slab, y_slab, c_out, c_in, spatial);
        } else {
            col_buf.iter_mut().for_each(|v| *v = E::zero());
            im2col_sample(x, ni, k, p.stride, p.padding, h_out, w_out, spatial, 0, &mut col_buf);
            matmul_into(w_mat, &col_buf, y_slab, c_out, ck2, spatial);
        }
        for co in 0..c_out {
            let bias = p.bias.data()[co];
            for v in &mut y_slab[co * spatial..(co + 1) * spatial] {
                *v += bias;
            }
        }
    }
    Ok(y)
}

/// Gradients of [`conv2d`]: returns `(dx, dweight, dbias)`.
pub fn conv2d_backward<E: Element>(
    x: &Tensor<E>,
    p: &ConvParams<E>,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (n, c_in, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let k = p.kernel();
    let (h_out, w_out) = conv_out_dims(h, w, k, p.stride, p.padding)?;
    let c_out = p.c_out();
    let spatial = h_out * w_out;
    if dy.shape() != [n, c_out, h_out, w_out] {
        return Err(Error::shape(format!(
            "conv2d_backward: dy shape {:?}, expected {:?}",
            dy.shape(),
            [n, c_out, h_out, w_out]
        )));
    }

    let ck2 = c_in * k * k;
    let mut dx = Tensor::zeros(&[n, c_in, h, w]);
    let mut dw = Tensor::zeros(p.weight.shape());
    let mut db = Tensor::zeros(&[c_out]);

    // Bias gradient: plain per-channel sum over batch and space.
    for ni in 0..n {
        for co in 0..c_out {
            let dy_row = &dy.data()[(ni * c_out + co) * spatial..(ni * c_out + co + 1) * spatial];
            let mut acc = E::zero();
            for &v in dy_row {
                acc += v;
            }
            db.data_mut()[co] += acc;
        }
    }

    // Transposed weight (C_in*k*k, C_out) for the input gradient.
    let mut w_t = vec![E::zero(); ck2 * c_out];
    for co in 0..c_out {
        for r in 0..ck2 {
            w_t[r * c_out + co] = p.weight.data()[co * ck2 + r];
        }
    }

    let mut col_buf = vec![E::zero(); ck2 * spatial];
    let mut col_t = vec![E::zero(); spatial * ck2];
    let mut dcol = vec![E::zero(); ck2 * spatial];

    for ni in 0..n {
        let dy_slab = &dy.data()[ni * c_out * spatial..(ni + 1) * c_out * spatial];

        // Patch matrix for this sample (input buffer itself when pointwise).
        let x_cols: &[E] = if p.is_pointwise() {
            &x.data()[ni * c_in * spatial..(ni + 1) * c_in * spatial]
        } else {
            col_buf.iter_mut().for_each(|v| *v = E::zero());
            im2col_sample(x, ni, k, p.stride, p.padding, h_out, w_out, spatial, 0, &mut col_buf);
            &col_buf
        };

        // dW += dY_n * X_n^T   -- transpose X once so both operands stream.
        for r in 0..ck2 {
            let src = &x_cols[r * spatial..(r + 1) * spatial];
            for (col, &v) in src.iter().enumerate() {
                col_t[col * ck2 + r] = v;
            }
        }
        matmul_into(dy_slab, &col_t, dw.data_mut(), c_out, spatial, ck2);

        // dX_cols = W^T * dY_n, then fold columns back onto the input grid.
        if p.is_pointwise() {
            let dx_slab = &mut dx.data_mut()[ni * c_in * spatial..(ni + 1) * c_in * spatial];
            matmul_into(&w_t, dy_slab, dx_slab, c_in, c_out, spatial);
        } else {
            dcol.iter_mut().for_each(|v| *v = E::zero());
            matmul_into(&w_t, dy_slab, &mut dcol, ck2, c_out, spatial);
            col2im_sample_accumulate(&dcol, ni, k, p.stride, p.padding, h_out, w_out, &mut dx);
        }
    }
    Ok((dx, dw, db))
}
