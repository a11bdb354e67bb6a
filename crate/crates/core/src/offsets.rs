//! Kernel tap geometry.

use crate::error::{Error, Result};

/// Spatial offsets of a k×k kernel around its centre, plus the input channel
/// index set. For odd `k` the offsets are `(-⌊k/2⌋ + i, -⌊k/2⌋ + j)` with
/// `i, j ∈ 0..k`, symmetric about zero.
#[derive(Debug, Clone)]
pub struct KernelOffsets {
    pub k: usize,
    offsets: Vec<(isize, isize)>,
}

impl KernelOffsets {
    /// Even kernel sizes are rejected: centring assumes odd `k`.
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {k}")));
        }
        let half = (k / 2) as isize;
        let mut offsets = Vec::with_capacity(k * k);
        for i in 0..k as isize {
            for j in 0..k as isize {
                offsets.push((i - half, j - half));
            }
        }
        Ok(KernelOffsets { k, offsets })
    }

    /// Offsets in (i-major, j-minor) order; index `i*k + j` matches the
    /// row-major layout of kernel tensors.
    pub fn iter(&self) -> impl Iterator<Item = (isize, isize)> + '_ {
        self.offsets.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Channel index set `0..c_in`.
    pub fn channel_set(c_in: usize) -> std::ops::Range<usize> {
        0..c_in
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_is_k_squared() {
        for k in [1, 3, 5, 7] {
            assert_eq!(KernelOffsets::new(k).unwrap().len(), k * k);
        }
    }

    #[test]
    fn symmetric_about_zero_for_odd_k() {
        let offs = KernelOffsets::new(5).unwrap();
        let set: Vec<_> = offs.iter().collect();
        for &(di, dj) in &set {
            assert!(set.contains(&(-di, -dj)));
        }
        assert!(set.contains(&(0, 0)));
    }

    #[test]
    fn even_k_rejected() {
        assert!(KernelOffsets::new(2).is_err());
        assert!(KernelOffsets::new(4).is_err());
        assert!(KernelOffsets::new(0).is_err());
    }

    #[test]
    fn channel_set_covers_inputs() {
        assert_eq!(KernelOffsets::channel_set(4).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }
}
