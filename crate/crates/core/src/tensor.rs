//! Dense row-major tensors over 32- or 64-bit IEEE floats.
//!
//! A [`Tensor`] owns a contiguous `Vec` of values in row-major order: for a
//! 4-D activation of shape `[B, C, H, W]`, element `(b, c, h, w)` lives at
//! flat index `((b*C + c)*H + h)*W + w`. There are no strides or views;
//! every operation produces a freshly owned tensor, which keeps accumulation
//! order (and therefore bit-level reproducibility) easy to state.

use crate::error::{Error, Result};
use std::fmt;

/// Scalar element type: 32- or 64-bit IEEE float.
pub trait Element:
    num_traits::Float + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

/// On-disk dtype tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Dense N-dimensional array, row-major, the universal value type.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Element = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    /// Builds a tensor, checking `product(shape) == data.len()` and that all
    /// extents are at least 1.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert!(shape.iter().all(|&d| d >= 1), "zero extent in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        assert!(shape.iter().all(|&d| d >= 1), "zero extent in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterprets the flat data under a new shape with the same element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elems) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Flat index of a multi-index (row-major).
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, &d) in idx.iter().zip(self.shape.iter()) {
            debug_assert!(*i < d);
            flat = flat * d + i;
        }
        flat
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let flat = self.flat_index(idx);
        self.data[flat] = value;
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * factor).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Returns an error if any element is NaN or infinite. Validation hook
    /// used by callers that must not propagate non-finite values.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{context}: element {i} of shape {:?} is {v}",
                    self.shape
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Extents as (B, C, H, W); errors unless the tensor is 4-D.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "expected 4-D tensor, got {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }
}

/// Pairwise (cascade) summation. Keeps reductions accurate enough that
/// permutation-invariance tests hold at 1e-12 relative tolerance.
pub fn pairwise_sum<T: Element>(values: &[T]) -> T {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        let mut acc = T::zero();
        for &v in values {
            acc = acc + v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Zero-pads the spatial border of a `[B, C, H, W]` tensor by `p` on each side.
pub fn pad_zero<T: Element>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    if p == 0 {
        return Ok(x.clone());
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = Tensor::zeros(&[b, c, hp, wp]);
    let src = x.data();
    let dst = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                let src_row = ((bi * c + ci) * h + hi) * w;
                let dst_row = ((bi * c + ci) * hp + hi + p) * wp + p;
                dst[dst_row..dst_row + w].copy_from_slice(&src[src_row..src_row + w]);
            }
        }
    }
    Ok(out)
}

/// Crops the spatial border of a `[B, C, H, W]` tensor by `p` on each side.
/// Inverse of [`pad_zero`].
pub fn crop<T: Element>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (b, c, hp, wp) = x.dims4()?;
    if p == 0 {
        return Ok(x.clone());
    }
    if hp <= 2 * p || wp <= 2 * p {
        return Err(Error::ShapeMismatch(format!(
            "crop by {p} on spatial extents {hp}x{wp}"
        )));
    }
    let (h, w) = (hp - 2 * p, wp - 2 * p);
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let src = x.data();
    let dst = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                let src_row = ((bi * c + ci) * hp + hi + p) * wp + p;
                let dst_row = ((bi * c + ci) * h + hi) * w;
                dst[dst_row..dst_row + w].copy_from_slice(&src[src_row..src_row + w]);
            }
        }
    }
    Ok(out)
}

/// Matrix product of `[M, K]` and `[K, N]` tensors.
///
/// Accumulates over `k` in ascending order for every output element, so the
/// result is bit-identical to the naive `for i { for j { for k }}` loop.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul expects 2-D tensors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner extents: {k} vs {k2}"
        )));
    }
    let mut out = vec![T::zero(); m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

/// `out[i*n + j] += sum_k a[i*k_dim + k] * b[k*n + j]`, `k` ascending.
/// Parallelises over output rows; each element keeps a fixed accumulation
/// order, so results are independent of thread count.
pub fn matmul_into<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k_dim: usize, n: usize) {
    use rayon::prelude::*;
    debug_assert_eq!(a.len(), m * k_dim);
    debug_assert_eq!(b.len(), k_dim * n);
    debug_assert_eq!(out.len(), m * n);
    let work = m * k_dim * n;
    if work < 4_000_000 {
        for i in 0..m {
            let row_a = &a[i * k_dim..(i + 1) * k_dim];
            let row_out = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in row_a.iter().enumerate() {
                let row_b = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in row_out.iter_mut().zip(row_b.iter()) {
                    *o = *o + av * bv;
                }
            }
        }
        return;
    }
    out.par_chunks_mut(n).enumerate().for_each(|(i, row_out)| {
        let row_a = &a[i * k_dim..(i + 1) * k_dim];
        for (kk, &av) in row_a.iter().enumerate() {
            let row_b = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row_out.iter_mut().zip(row_b.iter()) {
                *o = *o + av * bv;
            }
        }
    });
}

/// `out[i*n + j] += sum_k a[i*k_dim + k] * b[j*k_dim + k]` — product with the
/// second operand transposed. Used on gradient paths only, so the dot
/// products run over eight accumulator lanes (deterministic, but not the
/// strict ascending-k order of [`matmul_into`]).
pub fn matmul_abt_into<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k_dim: usize, n: usize) {
    use rayon::prelude::*;
    debug_assert_eq!(a.len(), m * k_dim);
    debug_assert_eq!(b.len(), n * k_dim);
    debug_assert_eq!(out.len(), m * n);
    let body = |i: usize, row_out: &mut [T]| {
        let row_a = &a[i * k_dim..(i + 1) * k_dim];
        for (j, o) in row_out.iter_mut().enumerate() {
            let row_b = &b[j * k_dim..(j + 1) * k_dim];
            let mut lanes = [T::zero(); 8];
            let mut ca = row_a.chunks_exact(8);
            let mut cb = row_b.chunks_exact(8);
            for (xa, xb) in (&mut ca).zip(&mut cb) {
                for l in 0..8 {
                    lanes[l] = lanes[l] + xa[l] * xb[l];
                }
            }
            let mut acc = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
                + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
            for (&xa, &xb) in ca.remainder().iter().zip(cb.remainder().iter()) {
                acc = acc + xa * xb;
            }
            *o = *o + acc;
        }
    };
    if m * k_dim * n < 4_000_000 {
        for (i, row_out) in out.chunks_mut(n).enumerate() {
            body(i, row_out);
        }
    } else {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row_out)| body(i, row_out));
    }
}

/// `out[r*n + j] += sum_k a[k*m + r] * b[k*n + j]` — product with the first
/// operand transposed, `k` ascending per element.
pub fn matmul_atb_into<T: Element>(a: &[T], b: &[T], out: &mut [T], k_dim: usize, m: usize, n: usize) {
    use rayon::prelude::*;
    debug_assert_eq!(a.len(), k_dim * m);
    debug_assert_eq!(b.len(), k_dim * n);
    debug_assert_eq!(out.len(), m * n);
    let body = |r: usize, row_out: &mut [T]| {
        for kk in 0..k_dim {
            let av = a[kk * m + r];
            let row_b = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row_out.iter_mut().zip(row_b.iter()) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k_dim * n < 4_000_000 {
        for (r, row_out) in out.chunks_mut(n).enumerate() {
            body(r, row_out);
        }
    } else {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(r, row_out)| body(r, row_out));
    }
}

/// Global average pooling: `[B, C, H, W] -> [B, C, 1, 1]`, mean over the
/// spatial extent of each channel (pairwise summation).
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = T::from_f64(1.0 / hw as f64);
    let mut out = Tensor::zeros(&[b, c, 1, 1]);
    let src = x.data();
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let s = pairwise_sum(&src[base..base + hw]);
            out.data_mut()[bi * c + ci] = s * inv;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Tensor::<f64>::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(&[2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn pad_zero_single_element() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![5.0]).unwrap();
        let y = pad_zero(&x, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pad_zero_identity_at_p0() {
        let x = Tensor::new(&[1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let y = pad_zero(&x, 0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn pad_zero_block() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pad_zero(&x, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.at(&[0, 0, 1, 1]), 1.0);
        assert_eq!(y.at(&[0, 0, 1, 2]), 2.0);
        assert_eq!(y.at(&[0, 0, 2, 1]), 3.0);
        assert_eq!(y.at(&[0, 0, 2, 2]), 4.0);
        assert_eq!(y.at(&[0, 0, 0, 0]), 0.0);
        assert_eq!(y.at(&[0, 0, 3, 3]), 0.0);
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &a).unwrap(), a);
    }

    #[test]
    fn matmul_row_col() {
        let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matmul(&a, &b).is_err());
    }

    /// Oracle: naive i-j-k triple loop, independent of the production path.
    fn matmul_naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.data()[i * k + kk] * b.data()[kk * n + j];
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive_loop_bitwise() {
        let mut rng = crate::rng::Rng::new(7);
        let a = Tensor::from_fn(&[7, 5], |_| rng.next_standard_normal());
        let b = Tensor::from_fn(&[5, 3], |_| rng.next_standard_normal());
        let fast = matmul(&a, &b).unwrap();
        let naive = matmul_naive(&a, &b);
        for (x, y) in fast.data().iter().zip(naive.data().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn matmul_large_matches_naive_loop_bitwise() {
        // Exercises the parallel path.
        let mut rng = crate::rng::Rng::new(11);
        let a = Tensor::from_fn(&[80, 70], |_| rng.next_standard_normal());
        let b = Tensor::from_fn(&[70, 90], |_| rng.next_standard_normal());
        let fast = matmul(&a, &b).unwrap();
        let naive = matmul_naive(&a, &b);
        for (x, y) in fast.data().iter().zip(naive.data().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn gap_small_channel() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn gap_constant_channel() {
        let x = Tensor::full(&[2, 3, 4, 5], 2.5f64);
        let y = global_avg_pool(&x).unwrap();
        for &v in y.data() {
            assert!((v - 2.5).abs() < 1e-15);
        }
    }

    #[test]
    fn gap_matches_direct_summation_oracle() {
        let mut rng = crate::rng::Rng::new(3);
        let x = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.next_standard_normal());
        let y = global_avg_pool(&x).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let mut s = 0.0;
                for h in 0..4 {
                    for w in 0..4 {
                        s += x.at(&[b, c, h, w]);
                    }
                }
                let expect = s / 16.0;
                let got = y.at(&[b, c, 0, 0]);
                assert!((got - expect).abs() <= 1e-14 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gap_permutation_invariant() {
        let mut rng = crate::rng::Rng::new(17);
        let (h, w) = (7, 9);
        let x = Tensor::from_fn(&[1, 2, h, w], |_| 0.5 + rng.next_f64());
        let y1 = global_avg_pool(&x).unwrap();
        // Reverse the spatial order of every channel.
        let mut perm = x.clone();
        for c in 0..2 {
            let base = c * h * w;
            perm.data_mut()[base..base + h * w].reverse();
        }
        let y2 = global_avg_pool(&perm).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data().iter()) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
            assert!(rel <= 1e-12, "rel deviation {rel}");
        }
    }

    proptest! {
        #[test]
        fn row_major_index_matches_enumeration(
            b in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5
        ) {
            let t = Tensor::<f64>::from_fn(&[b, c, h, w], |i| i as f64);
            let mut flat = 0usize;
            for bi in 0..b {
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            prop_assert_eq!(t.flat_index(&[bi, ci, hi, wi]), flat);
                            prop_assert_eq!(t.at(&[bi, ci, hi, wi]), flat as f64);
                            flat += 1;
                        }
                    }
                }
            }
        }

        #[test]
        fn pad_then_crop_is_identity(
            b in 1usize..3, c in 1usize..3, h in 1usize..6, w in 1usize..6, p in 0usize..4
        ) {
            let t = Tensor::<f64>::from_fn(&[b, c, h, w], |i| (i as f64).sin());
            let roundtrip = crop(&pad_zero(&t, p).unwrap(), p).unwrap();
            prop_assert_eq!(roundtrip, t);
        }
    }
}
