//! Dense row-major tensors over `f32`/`f64`, plus the handful of linear
//! algebra primitives the rest of the crate is built on.
//!
//! Reductions here run in a fixed serial order, so every result is
//! bit-reproducible across runs on the same build.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Scalar type tag carried by checkpoints and CLI flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// Single-byte tag used in the checkpoint tensor records.
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            other => Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::invalid(format!("unknown dtype `{other}` (expected f32 or f64)"))),
        }
    }
}

/// Scalar types tensors can hold. Sealed in practice: `f32` and `f64`.
pub trait Element:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Append the little-endian byte representation to `out`.
    fn write_le(self, out: &mut Vec<u8>);

    /// Read one value from the start of `bytes` (must hold at least
    /// `DTYPE.size_bytes()` bytes).
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Convert an `f64` literal into the working element type. Used all over the
/// numeric code; short on purpose.
#[inline(always)]
pub fn el<E: Element>(v: f64) -> E {
    E::from_f64(v)
}

/// Dense row-major tensor: shape plus a flat value buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::zero(); len],
        }
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Build from `f64` values, casting into the element type.
    pub fn from_f64_vec(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| el(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of dimension `i`.
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Reinterpret with a new shape of the same total length.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} values) to {:?} ({} values)",
                self.shape,
                self.data.len(),
                shape,
                len
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Flat offset of `[n][c][h][w]` in an NCHW tensor.
    #[inline(always)]
    pub fn idx4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline(always)]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> E {
        self.data[self.idx4(n, c, h, w)]
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Cast every value through `f64` into another element type.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| F::from_f64(v.as_f64())).collect(),
        }
    }

    /// Largest absolute elementwise difference between two same-shape tensors.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "max_abs_diff: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut worst = 0.0f64;
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = (a.as_f64() - b.as_f64()).abs();
            if d > worst {
                worst = d;
            }
        }
        Ok(worst)
    }

    /// First non-finite entry, if any: `(flat_index, value)`.
    pub fn first_non_finite(&self) -> Option<(usize, f64)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| (i, self.data[i].as_f64()))
    }

    /// Error out if any value is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.first_non_finite() {
            None => Ok(()),
            Some((index, value)) => Err(Error::NonFinite {
                context: context.to_string(),
                index,
                value,
            }),
        }
    }
}

/// `C = A * B` for row-major matrices `(m,k) x (k,n)`.
///
/// Plain ikj loop: the inner dimension is contiguous for both `B` and `C`,
/// which autovectorizes well, and the summation order is fixed so results
/// are reproducible bit for bit.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(format!(
            "matmul wants two matrices, got ranks {} and {}",
            a.rank(),
            b.rank()
        )));
    }
    let (m, k) = (a.dim(0), a.dim(1));
    let (k2, n) = (b.dim(0), b.dim(1));
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul: ({m},{k}) x ({k2},{n}) inner dims differ"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    matmul_into(a.data(), b.data(), out.data_mut(), m, k, n);
    Ok(out)
}

/// Accumulating matmul core over flat slices; `c += a * b`.
///
/// Sums run in f64 regardless of `E`, so each output sees one rounding
/// instead of one per term. The f32 error of a long dot product then stays
/// near a single ulp, which is what lets a folded convolution agree with
/// the conv/norm pair it replaced to the default f32 tolerance.
pub(crate) fn matmul_into<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (av, cv) in acc.iter_mut().zip(c_row.iter()) {
            *av = cv.as_f64();
        }
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let s = a_ik.as_f64();
            let b_row = &b[kk * n..(kk + 1) * n];
            for (av, &bv) in acc.iter_mut().zip(b_row) {
                *av += s * bv.as_f64();
            }
        }
        for (cv, &av) in c_row.iter_mut().zip(acc.iter()) {
            *cv = E::from_f64(av);
        }
    }
}

/// Transpose a row-major matrix.
pub fn transpose<E: Element>(a: &Tensor<E>) -> Result<Tensor<E>> {
    if a.rank() != 2 {
        return Err(Error::shape(format!("transpose wants a matrix, got rank {}", a.rank())));
    }
    let (m, n) = (a.dim(0), a.dim(1));
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.data_mut()[j * m + i] = a.data()[i * n + j];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_matches_hand_result() {
        let a = Tensor::from_f64_vec(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_f64_vec(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul::<f64>(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Tensor::<f64>::from_f64_vec(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = transpose(&a).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        let back = transpose(&t).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn non_finite_detection() {
        let mut t = Tensor::<f32>::zeros(&[4]);
        assert!(t.ensure_finite("t").is_ok());
        t.data_mut()[2] = f32::NAN;
        let (idx, _) = t.first_non_finite().unwrap();
        assert_eq!(idx, 2);
        assert!(t.ensure_finite("t").is_err());
    }

    #[test]
    fn idx4_row_major_layout() {
        let t = Tensor::<f32>::zeros(&[2, 3, 4, 5]);
        assert_eq!(t.idx4(0, 0, 0, 0), 0);
        assert_eq!(t.idx4(0, 0, 0, 1), 1);
        assert_eq!(t.idx4(0, 0, 1, 0), 5);
        assert_eq!(t.idx4(0, 1, 0, 0), 20);
        assert_eq!(t.idx4(1, 0, 0, 0), 60);
    }
}
