//! Spatial pooling: 2x2 stride-2 max pooling (the only downsampler in the
//! body of the network) and global average pooling (the head).

use crate::error::{Error, Result};
use crate::tensor::{el, Element, Tensor};

/// Flat input indices of each pooled maximum, for the backward pass.
#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    pub argmax: Vec<u32>,
    pub input_shape: [usize; 4],
}

/// 2x2 stride-2 max pool. Spatial dims must be even. Ties keep the first
/// maximum in scan order (top-left first), so results are reproducible.
pub fn maxpool2<E: Element>(x: &Tensor<E>) -> Result<(Tensor<E>, MaxPoolCache)> {
    if x.rank() != 4 {
        return Err(Error::shape(format!("maxpool2 wants NCHW, got {:?}", x.shape())));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let mut argmax = vec![0u32; n * c * ho * wo];
    let xd = x.data();
    let mut out_i = 0;
    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let base = plane + (2 * oh) * w + 2 * ow;
                    let candidates = [base, base + 1, base + w, base + w + 1];
                    let mut best_idx = candidates[0];
                    let mut best = xd[best_idx];
                    for &idx in &candidates[1..] {
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                    y.data_mut()[out_i] = best;
                    argmax[out_i] = best_idx as u32;
                    out_i += 1;
                }
            }
        }
    }
    Ok((
        y,
        MaxPoolCache {
            argmax,
            input_shape: [n, c, h, w],
        },
    ))
}

/// Route pooled gradients back to the positions that won the max.
pub fn maxpool2_backward<E: Element>(cache: &MaxPoolCache, dy: &Tensor<E>) -> Result<Tensor<E>> {
    if dy.len() != cache.argmax.len() {
        return Err(Error::shape(format!(
            "maxpool2_backward: dy has {} values, cache has {}",
            dy.len(),
            cache.argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(&cache.input_shape);
    for (i, &src) in cache.argmax.iter().enumerate() {
        dx.data_mut()[src as usize] += dy.data()[i];
    }
    Ok(dx)
}

/// 2x2 stride-2 average pool (used on shortcut paths across a downsampling
/// stage, where max pooling would not be an identity-friendly reduction).
pub fn avgpool2<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    if x.rank() != 4 {
        return Err(Error::shape(format!("avgpool2 wants NCHW, got {:?}", x.shape())));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "avgpool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let quarter = el::<E>(0.25);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let xd = x.data();
    let mut out_i = 0;
    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let base = plane + (2 * oh) * w + 2 * ow;
                    let sum = xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1];
                    y.data_mut()[out_i] = sum * quarter;
                    out_i += 1;
                }
            }
        }
    }
    Ok(y)
}

/// Gradient of [`avgpool2`]: spread each output gradient evenly over its
/// 2x2 window.
pub fn avgpool2_backward<E: Element>(input_shape: &[usize], dy: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    if dy.shape() != [n, c, h / 2, w / 2] {
        return Err(Error::shape(format!(
            "avgpool2_backward: dy shape {:?} vs input {:?}",
            dy.shape(),
            input_shape
        )));
    }
    let quarter = el::<E>(0.25);
    let mut dx = Tensor::zeros(input_shape);
    let (ho, wo) = (h / 2, w / 2);
    let mut in_i = 0;
    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = dy.data()[in_i] * quarter;
                    in_i += 1;
                    let base = plane + (2 * oh) * w + 2 * ow;
                    dx.data_mut()[base] += g;
                    dx.data_mut()[base + 1] += g;
                    dx.data_mut()[base + w] += g;
                    dx.data_mut()[base + w + 1] += g;
                }
            }
        }
    }
    Ok(dx)
}

/// Global average pool: NCHW -> (N, C, 1, 1).
pub fn global_avgpool<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    if x.rank() != 4 {
        return Err(Error::shape(format!(
            "global_avgpool wants NCHW, got {:?}",
            x.shape()
        )));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let inv = el::<E>(1.0 / (h * w) as f64);
    let mut y = Tensor::zeros(&[n, c, 1, 1]);
    let spatial = h * w;
    for i in 0..n * c {
        let mut acc = E::zero();
        for &v in &x.data()[i * spatial..(i + 1) * spatial] {
            acc += v;
        }
        y.data_mut()[i] = acc * inv;
    }
    Ok(y)
}

/// Gradient of [`global_avgpool`]: uniform spread of `dy` over H*W.
pub fn global_avgpool_backward<E: Element>(
    input_shape: &[usize],
    dy: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    if dy.shape() != [n, c, 1, 1] {
        return Err(Error::shape(format!(
            "global_avgpool_backward: dy shape {:?}",
            dy.shape()
        )));
    }
    let inv = el::<E>(1.0 / (h * w) as f64);
    let mut dx = Tensor::zeros(input_shape);
    let spatial = h * w;
    for i in 0..n * c {
        let g = dy.data()[i] * inv;
        for v in &mut dx.data_mut()[i * spatial..(i + 1) * spatial] {
            *v = g;
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{naive_global_avgpool, naive_maxpool2};
    use crate::rng;

    #[test]
    fn maxpool_matches_reference() {
        let mut r = rng::seeded(5);
        let x = rng::normal_tensor::<f64>(&mut r, &[2, 3, 8, 6], 1.0);
        let (y, _) = maxpool2(&x).unwrap();
        let want = naive_maxpool2(&x);
        assert_eq!(y, want);
    }

    #[test]
    fn maxpool_tie_break_keeps_first() {
        let x = Tensor::<f64>::from_f64_vec(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]).unwrap();
        let (_, cache) = maxpool2(&x).unwrap();
        assert_eq!(cache.argmax, vec![0]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        assert!(maxpool2(&Tensor::<f32>::zeros(&[1, 1, 3, 4])).is_err());
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let x = Tensor::<f64>::from_f64_vec(&[1, 1, 2, 2], &[0.0, 5.0, -1.0, 2.0]).unwrap();
        let (y, cache) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[5.0]);
        let dy = Tensor::<f64>::from_f64_vec(&[1, 1, 1, 1], &[3.0]).unwrap();
        let dx = maxpool2_backward(&cache, &dy).unwrap();
        assert_eq!(dx.data(), &[0.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn gap_matches_reference_and_backward_is_uniform() {
        let mut r = rng::seeded(6);
        let x = rng::normal_tensor::<f64>(&mut r, &[2, 4, 3, 5], 1.0);
        let y = global_avgpool(&x).unwrap();
        // The reference divides at the end while the kernel multiplies by
        // 1/(h*w), so agreement is to rounding, not bitwise.
        assert!(y.max_abs_diff(&naive_global_avgpool(&x)).unwrap() < 1e-14);

        let dy = Tensor::<f64>::full(&[2, 4, 1, 1], 15.0);
        let dx = global_avgpool_backward(x.shape(), &dy).unwrap();
        for &v in dx.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn avgpool_halves_and_averages() {
        let x = Tensor::<f64>::from_f64_vec(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 6.0]).unwrap();
        let y = avgpool2(&x).unwrap();
        assert_eq!(y.data(), &[3.0]);
        let dy = Tensor::<f64>::from_f64_vec(&[1, 1, 1, 1], &[4.0]).unwrap();
        let dx = avgpool2_backward(x.shape(), &dy).unwrap();
        assert_eq!(dx.data(), &[1.0, 1.0, 1.0, 1.0]);
    }
}
