//! Per-channel batch normalisation over `(B, H, W)`.

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Element, Tensor};

/// Per-channel statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T: Element> {
    pub mean: Tensor<T>,
    pub inv_std: Tensor<T>,
    /// Biased batch variance (used for running updates).
    pub var: Tensor<T>,
    /// Number of elements each statistic was computed over (B*H*W).
    pub n: usize,
}

/// Statistics source: batch statistics (training) or stored running
/// statistics (evaluation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Batch,
    Running,
}

fn check_channels<T: Element>(x: &Tensor<T>, len: usize, what: &str) -> Result<()> {
    let c = x.shape()[1];
    if len != c {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {len} params vs {c} channels"
        )));
    }
    Ok(())
}

/// Per-channel mean and biased variance over `(B, H, W)` (pairwise sums).
pub fn batch_stats<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = x.dims4()?;
    let n = b * h * w;
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut mean = Tensor::zeros(&[c]);
    let mut var = Tensor::zeros(&[c]);
    let hw = h * w;
    let xd = x.data();
    let mut buf = vec![T::zero(); n];
    for ci in 0..c {
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            buf[bi * hw..(bi + 1) * hw].copy_from_slice(&xd[base..base + hw]);
        }
        let m = pairwise_sum(&buf) * inv_n;
        mean.data_mut()[ci] = m;
        let sq: Vec<T> = buf.iter().map(|&v| (v - m) * (v - m)).collect();
        var.data_mut()[ci] = pairwise_sum(&sq) * inv_n;
    }
    Ok((mean, var))
}

/// Forward with batch statistics; returns the cache needed by the VJP.
pub fn forward_batch<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (b, c, h, w) = x.dims4()?;
    check_channels(x, gamma.numel(), "bn gamma")?;
    check_channels(x, beta.numel(), "bn beta")?;
    let (mean, var) = batch_stats(x)?;
    let inv_std = Tensor::from_fn(&[c], |ci| {
        T::from_f64(1.0 / (var.data()[ci].to_f64() + eps).sqrt())
    });
    let y = normalize(x, &mean, &inv_std, gamma, beta);
    Ok((
        y,
        BnCache {
            mean,
            inv_std,
            var,
            n: b * h * w,
        },
    ))
}

/// Forward with stored running statistics (evaluation).
pub fn forward_running<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.dims4()?;
    check_channels(x, gamma.numel(), "bn gamma")?;
    let inv_std = Tensor::from_fn(&[c], |ci| {
        T::from_f64(1.0 / (running_var.data()[ci].to_f64() + eps).sqrt())
    });
    Ok(normalize(x, running_mean, &inv_std, gamma, beta))
}

fn normalize<T: Element>(
    x: &Tensor<T>,
    mean: &Tensor<T>,
    inv_std: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Tensor<T> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    let yd = y.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let (m, s) = (mean.data()[ci], inv_std.data()[ci]);
            let (g, be) = (gamma.data()[ci], beta.data()[ci]);
            let base = (bi * c + ci) * hw;
            for i in base..base + hw {
                yd[i] = g * ((xd[i] - m) * s) + be;
            }
        }
    }
    y
}

/// Gradients for batch-statistics mode; statistics are functions of the
/// batch, so the input gradient carries the mean/variance terms.
pub fn vjp_batch<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = x.dims4()?;
    if dy.shape() != x.shape() {
        return Err(Error::ShapeMismatch("bn dy shape".into()));
    }
    let hw = h * w;
    let n = (b * hw) as f64;
    let xd = x.data();
    let dyd = dy.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ci in 0..c {
        let m = cache.mean.data()[ci];
        let s = cache.inv_std.data()[ci];
        let g = gamma.data()[ci];
        // Accumulate sums in sample-major order.
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in base..base + hw {
                let xhat = (xd[i] - m) * s;
                sum_dy = sum_dy + dyd[i];
                sum_dy_xhat = sum_dy_xhat + dyd[i] * xhat;
            }
        }
        dgamma.data_mut()[ci] = sum_dy_xhat;
        dbeta.data_mut()[ci] = sum_dy;
        let inv_n = T::from_f64(1.0 / n);
        let coeff = g * s;
        let dxd = dx.data_mut();
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in base..base + hw {
                let xhat = (xd[i] - m) * s;
                dxd[i] = coeff * (dyd[i] - inv_n * sum_dy - xhat * (inv_n * sum_dy_xhat));
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Gradients for running-statistics mode (statistics are constants).
pub fn vjp_running<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let xd = x.data();
    let dyd = dy.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ci in 0..c {
        let m = running_mean.data()[ci];
        let s = T::from_f64(1.0 / (running_var.data()[ci].to_f64() + eps).sqrt());
        let g = gamma.data()[ci];
        let mut sdg = T::zero();
        let mut sdb = T::zero();
        let dxd = dx.data_mut();
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in base..base + hw {
                let xhat = (xd[i] - m) * s;
                sdg = sdg + dyd[i] * xhat;
                sdb = sdb + dyd[i];
                dxd[i] = dyd[i] * g * s;
            }
        }
        dgamma.data_mut()[ci] = sdg;
        dbeta.data_mut()[ci] = sdb;
    }
    Ok((dx, dgamma, dbeta))
}

/// Momentum update of running statistics from batch statistics. Uses the
/// unbiased variance when more than one element contributed.
pub fn update_running<T: Element>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    cache: &BnCache<T>,
    momentum: f64,
) {
    let n = cache.n;
    let mom = T::from_f64(momentum);
    let keep = T::from_f64(1.0 - momentum);
    let correction = if n > 1 {
        T::from_f64(n as f64 / (n - 1) as f64)
    } else {
        T::one()
    };
    for ci in 0..running_mean.numel() {
        let rm = running_mean.data()[ci];
        running_mean.data_mut()[ci] = keep * rm + mom * cache.mean.data()[ci];
        let rv = running_var.data()[ci];
        running_var.data_mut()[ci] = keep * rv + mom * cache.var.data()[ci] * correction;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::verify::{dot, fd_grad, max_rel_err, rel_err, FD_EPS};

    #[test]
    fn standardized_input_passes_through() {
        // Input with zero mean and unit variance per channel, scale 1 shift 0.
        let data = vec![-1.0, 1.0, -1.0, 1.0, -2.0, 2.0, -2.0, 2.0];
        let x = Tensor::new(&[1, 2, 2, 2], data).unwrap();
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let (y, _) = forward_batch(&x, &gamma, &beta, 1e-5).unwrap();
        // Channel 0 has unit variance so output ~ input; channel 1 is rescaled.
        for i in 0..4 {
            assert!(rel_err(y.data()[i], x.data()[i]) <= 1e-4);
        }
    }

    #[test]
    fn matches_oracle() {
        let mut rng = Rng::new(21);
        let x = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.next_standard_normal());
        let gamma = Tensor::from_fn(&[3], |_| 1.0 + 0.1 * rng.next_standard_normal());
        let beta = Tensor::from_fn(&[3], |_| rng.next_standard_normal());
        let (y, _) = forward_batch(&x, &gamma, &beta, 1e-5).unwrap();
        let reference = crate::oracle::batchnorm_oracle(&x, &gamma, &beta, 1e-5);
        for (a, b) in y.data().iter().zip(reference.data().iter()) {
            assert!(rel_err(*a, *b) <= 1e-12);
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = Rng::new(22);
        let x = Tensor::from_fn(&[2, 2, 3, 3], |_| rng.next_standard_normal());
        let gamma = Tensor::from_fn(&[2], |_| 1.0 + 0.2 * rng.next_standard_normal());
        let beta = Tensor::from_fn(&[2], |_| rng.next_standard_normal());
        let dy = Tensor::from_fn(&[2, 2, 3, 3], |_| rng.next_standard_normal());
        let (_, cache) = forward_batch(&x, &gamma, &beta, 1e-5).unwrap();
        let (dx, dgamma, dbeta) = vjp_batch(&x, &gamma, &cache, &dy).unwrap();

        let loss_x = |v: &[f64]| {
            let xt = Tensor::new(x.shape(), v.to_vec()).unwrap();
            let (y, _) = forward_batch(&xt, &gamma, &beta, 1e-5).unwrap();
            dot(dy.data(), y.data())
        };
        assert!(max_rel_err(dx.data(), &fd_grad(loss_x, x.data(), FD_EPS)) <= 1e-6);

        let loss_g = |v: &[f64]| {
            let gt = Tensor::new(&[2], v.to_vec()).unwrap();
            let (y, _) = forward_batch(&x, &gt, &beta, 1e-5).unwrap();
            dot(dy.data(), y.data())
        };
        assert!(max_rel_err(dgamma.data(), &fd_grad(loss_g, gamma.data(), FD_EPS)) <= 1e-6);

        let loss_b = |v: &[f64]| {
            let bt = Tensor::new(&[2], v.to_vec()).unwrap();
            let (y, _) = forward_batch(&x, &gamma, &bt, 1e-5).unwrap();
            dot(dy.data(), y.data())
        };
        assert!(max_rel_err(dbeta.data(), &fd_grad(loss_b, beta.data(), FD_EPS)) <= 1e-6);
    }

    #[test]
    fn running_update_moves_toward_batch_stats() {
        let mut rng = Rng::new(23);
        let x = Tensor::from_fn(&[4, 2, 3, 3], |_| 2.0 + rng.next_standard_normal());
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let (_, cache) = forward_batch(&x, &gamma, &beta, 1e-5).unwrap();
        let mut rm = Tensor::zeros(&[2]);
        let mut rv = Tensor::full(&[2], 1.0);
        update_running(&mut rm, &mut rv, &cache, 0.1);
        for ci in 0..2 {
            assert!(rel_err(rm.data()[ci], 0.1 * cache.mean.data()[ci]) <= 1e-12);
        }
    }
}
