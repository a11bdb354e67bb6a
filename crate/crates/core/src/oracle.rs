//! Reference implementations used for verification.
//!
//! Every function here is the most literal direct-summation form of the
//! operation it describes: nested loops, no im2col, no buffer reuse, no
//! parallelism. The production kernels are required to reproduce these
//! results exactly (64-bit) for the sliding-window operations, so both
//! sides accumulate taps in the same documented order: input channel
//! ascending (major), then kernel row, then kernel column. The code paths
//! themselves share nothing with the production implementations.
//!
//! These functions stay out of the hot path; they exist for tests, the
//! `selftest` and `gradcheck` commands, and nothing else.

use crate::tensor::Tensor;

fn out_extent(h: usize, k: usize, s: usize, p: usize) -> usize {
    (h + 2 * p - k) / s + 1
}

/// Padded read: zero outside the valid region.
fn read_padded(x: &Tensor<f64>, b: usize, c: usize, row: isize, col: isize) -> f64 {
    let (_, _, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if row < 0 || col < 0 || row >= h as isize || col >= w as isize {
        0.0
    } else {
        x.at(&[b, c, row as usize, col as usize])
    }
}

/// Vanilla grouped 2-D convolution, direct summation.
///
/// `kernel` has shape `[C_out, C_in/groups, k, k]`; accumulation per output
/// element runs over `(m, i, j)` with `m` the within-group input channel.
pub fn conv2d_oracle(
    x: &Tensor<f64>,
    kernel: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Tensor<f64> {
    let (bsz, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, c_in_g, k) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    assert_eq!(kernel.shape()[3], k);
    assert_eq!(c_in_g * groups, c_in);
    assert_eq!(c_out % groups, 0);
    let (ho, wo) = (
        out_extent(h, k, stride, padding),
        out_extent(w, k, stride, padding),
    );
    let mut y = Tensor::zeros(&[bsz, c_out, ho, wo]);
    let c_out_g = c_out / groups;
    for b in 0..bsz {
        for n in 0..c_out {
            let g = n / c_out_g;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for m in 0..c_in_g {
                        let cin = g * c_in_g + m;
                        for i in 0..k {
                            for j in 0..k {
                                let row = (oh * stride + i) as isize - padding as isize;
                                let col = (ow * stride + j) as isize - padding as isize;
                                acc += read_padded(x, b, cin, row, col)
                                    * kernel.at(&[n, m, i, j]);
                            }
                        }
                    }
                    if let Some(bias) = bias {
                        acc += bias.at(&[n]);
                    }
                    y.set(&[b, n, oh, ow], acc);
                }
            }
        }
    }
    y
}

/// Spatially adaptive convolution with per-position kernels, direct summation.
///
/// `field` has shape `[B, G, k*k, H_out, W_out]`; channel `n` uses the group
/// kernel `g(n) = n / group_size` (all channels share group 0 when `G == 1`).
/// Channel count is preserved.
pub fn lsa_apply_oracle(
    x: &Tensor<f64>,
    field: &Tensor<f64>,
    k: usize,
    stride: usize,
    group_size: usize,
) -> Tensor<f64> {
    let (bsz, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let groups = field.shape()[1];
    assert_eq!(field.shape()[0], bsz);
    assert_eq!(field.shape()[2], k * k);
    let padding = k / 2;
    let (ho, wo) = (
        out_extent(h, k, stride, padding),
        out_extent(w, k, stride, padding),
    );
    assert_eq!(field.shape()[3], ho);
    assert_eq!(field.shape()[4], wo);
    let mut y = Tensor::zeros(&[bsz, c, ho, wo]);
    for b in 0..bsz {
        for n in 0..c {
            let g = if groups == 1 { 0 } else { n / group_size };
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for i in 0..k {
                        for j in 0..k {
                            let row = (oh * stride + i) as isize - padding as isize;
                            let col = (ow * stride + j) as isize - padding as isize;
                            acc += read_padded(x, b, n, row, col)
                                * field.at(&[b, g, i * k + j, oh, ow]);
                        }
                    }
                    y.set(&[b, n, oh, ow], acc);
                }
            }
        }
    }
    y
}

/// Per-sample convolution with one predicted kernel per sample, direct
/// summation. `kernels` has shape `[B, C_out, C_in, k, k]`; the same kernel
/// slides over every spatial position of its sample.
pub fn per_sample_conv_oracle(
    x: &Tensor<f64>,
    kernels: &Tensor<f64>,
    stride: usize,
    padding: usize,
) -> Tensor<f64> {
    let (bsz, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, k) = (kernels.shape()[1], kernels.shape()[3]);
    assert_eq!(kernels.shape()[0], bsz);
    assert_eq!(kernels.shape()[2], c_in);
    assert_eq!(kernels.shape()[4], k);
    let (ho, wo) = (
        out_extent(h, k, stride, padding),
        out_extent(w, k, stride, padding),
    );
    let mut y = Tensor::zeros(&[bsz, c_out, ho, wo]);
    for b in 0..bsz {
        for n in 0..c_out {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for m in 0..c_in {
                        for i in 0..k {
                            for j in 0..k {
                                let row = (oh * stride + i) as isize - padding as isize;
                                let col = (ow * stride + j) as isize - padding as isize;
                                acc += read_padded(x, b, m, row, col)
                                    * kernels.at(&[b, n, m, i, j]);
                            }
                        }
                    }
                    y.set(&[b, n, oh, ow], acc);
                }
            }
        }
    }
    y
}

/// Pointwise (1x1) channel map with naive loops: `y[n] = sum_m w[n,m] x[m] + b[n]`.
pub fn pointwise_oracle(
    x: &Tensor<f64>,
    weight: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
) -> Tensor<f64> {
    let (bsz, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let c_out = weight.shape()[0];
    assert_eq!(weight.shape()[1], c_in);
    let mut y = Tensor::zeros(&[bsz, c_out, h, w]);
    for b in 0..bsz {
        for n in 0..c_out {
            for hh in 0..h {
                for ww in 0..w {
                    let mut acc = 0.0;
                    for m in 0..c_in {
                        acc += weight.at(&[n, m]) * x.at(&[b, m, hh, ww]);
                    }
                    if let Some(bias) = bias {
                        acc += bias.at(&[n]);
                    }
                    y.set(&[b, n, hh, ww], acc);
                }
            }
        }
    }
    y
}

/// Naive sequential-sum spatial mean: `[B, C, H, W] -> [B, C, 1, 1]`.
pub fn mean_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    let (bsz, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut y = Tensor::zeros(&[bsz, c, 1, 1]);
    for b in 0..bsz {
        for ci in 0..c {
            let mut acc = 0.0;
            for hh in 0..h {
                for ww in 0..w {
                    acc += x.at(&[b, ci, hh, ww]);
                }
            }
            y.set(&[b, ci, 0, 0], acc / (h * w) as f64);
        }
    }
    y
}

/// Per-channel batch normalisation over `(B, H, W)` with naive sums
/// (training behaviour: batch statistics).
pub fn batchnorm_oracle(
    x: &Tensor<f64>,
    gamma: &Tensor<f64>,
    beta: &Tensor<f64>,
    eps: f64,
) -> Tensor<f64> {
    let (bsz, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let n = (bsz * h * w) as f64;
    let mut y = Tensor::zeros(x.shape());
    for ci in 0..c {
        let mut sum = 0.0;
        for b in 0..bsz {
            for hh in 0..h {
                for ww in 0..w {
                    sum += x.at(&[b, ci, hh, ww]);
                }
            }
        }
        let mean = sum / n;
        let mut var_sum = 0.0;
        for b in 0..bsz {
            for hh in 0..h {
                for ww in 0..w {
                    let d = x.at(&[b, ci, hh, ww]) - mean;
                    var_sum += d * d;
                }
            }
        }
        let inv_std = 1.0 / (var_sum / n + eps).sqrt();
        for b in 0..bsz {
            for hh in 0..h {
                for ww in 0..w {
                    let xhat = (x.at(&[b, ci, hh, ww]) - mean) * inv_std;
                    y.set(&[b, ci, hh, ww], gamma.at(&[ci]) * xhat + beta.at(&[ci]));
                }
            }
        }
    }
    y
}

pub fn relu_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}
