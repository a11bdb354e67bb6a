//! Global shift-invariant branch: one predicted kernel per sample.
//!
//! The branch reduces channels to `m = round(lambda * sqrt(C))`, aggregates
//! context with global average pooling, predicts an `m x m x k x k` kernel
//! from the pooled vector, applies that single kernel at every sliding
//! position of its sample, and maps channels back to `C`.

use crate::conv::{conv_out_extent, pointwise_forward, pointwise_vjp};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{global_avg_pool, matmul_abt_into, matmul_atb_into, matmul_into, pad_zero, Element, Tensor};
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct GsiConfig {
    /// Applied kernel size (odd).
    pub k_gsi: usize,
    /// Width multiplier for the reduced channel count.
    pub lambda: f64,
    pub stride: usize,
}

impl Default for GsiConfig {
    fn default() -> Self {
        GsiConfig {
            k_gsi: 1,
            lambda: 1.0,
            stride: 1,
        }
    }
}

impl GsiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_gsi % 2 == 0 {
            return Err(Error::Config("k_gsi must be odd".into()));
        }
        if self.lambda <= 0.0 || self.stride == 0 {
            return Err(Error::Config("lambda and stride must be positive".into()));
        }
        Ok(())
    }

    /// Reduced width `m = round(lambda * sqrt(C))`, at least 1.
    pub fn reduced_width(&self, channels: usize) -> usize {
        ((self.lambda * (channels as f64).sqrt()).round() as usize).max(1)
    }
}

/// Branch weights: three pointwise maps, all with bias.
/// `pw2` produces the kernel entries; output channel `((n*m + c)*k + i)*k + j`
/// becomes kernel tap `(n, c, i, j)`.
#[derive(Debug, Clone)]
pub struct GsiWeights<T: Element> {
    /// `[m, C]` + `[m]`
    pub pw1_w: Tensor<T>,
    pub pw1_b: Tensor<T>,
    /// `[m*m*k*k, m]` + `[m*m*k*k]`
    pub pw2_w: Tensor<T>,
    pub pw2_b: Tensor<T>,
    /// `[C, m]` + `[C]`
    pub pw3_w: Tensor<T>,
    pub pw3_b: Tensor<T>,
}

impl<T: Element> GsiWeights<T> {
    pub fn input_channels(&self) -> usize {
        self.pw1_w.shape()[1]
    }

    pub fn reduced_width(&self) -> usize {
        self.pw1_w.shape()[0]
    }
}

/// Gradients mirroring [`GsiWeights`].
#[derive(Debug, Clone)]
pub struct GsiGrads<T: Element> {
    pub pw1_w: Tensor<T>,
    pub pw1_b: Tensor<T>,
    pub pw2_w: Tensor<T>,
    pub pw2_b: Tensor<T>,
    pub pw3_w: Tensor<T>,
    pub pw3_b: Tensor<T>,
}

/// Per-sample predicted kernels `[B, m, m, k, k]`. The type carries no
/// spatial axes: one kernel per sample, applied everywhere.
#[derive(Debug, Clone)]
pub struct GsiKernel<T: Element> {
    pub tensor: Tensor<T>,
}

impl<T: Element> GsiKernel<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.ndim() != 5 || tensor.shape()[1] != tensor.shape()[2] {
            return Err(Error::ShapeMismatch(format!(
                "GSI kernel must be [B, m, m, k, k], got {:?}",
                tensor.shape()
            )));
        }
        Ok(GsiKernel { tensor })
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.tensor.shape()[3]
    }
}

/// Kaiming fan-in init for pw1/pw3, zero biases; `zero_pw2` zero-fills the
/// kernel-producing layer so the branch starts as the zero map.
pub fn init_gsi_weights<T: Element>(
    channels: usize,
    cfg: &GsiConfig,
    rng: &mut Rng,
    zero_pw2: bool,
) -> Result<GsiWeights<T>> {
    cfg.validate()?;
    let m = cfg.reduced_width(channels);
    let kk = cfg.k_gsi * cfg.k_gsi;
    let std1 = (2.0 / channels as f64).sqrt();
    let pw1_w = Tensor::from_fn(&[m, channels], |_| T::from_f64(std1 * rng.next_standard_normal()));
    let pw2_w = if zero_pw2 {
        Tensor::zeros(&[m * m * kk, m])
    } else {
        let std2 = (2.0 / m as f64).sqrt();
        Tensor::from_fn(&[m * m * kk, m], |_| T::from_f64(std2 * rng.next_standard_normal()))
    };
    let std3 = (2.0 / m as f64).sqrt();
    let pw3_w = Tensor::from_fn(&[channels, m], |_| T::from_f64(std3 * rng.next_standard_normal()));
    Ok(GsiWeights {
        pw1_w,
        pw1_b: Tensor::zeros(&[m]),
        pw2_w,
        pw2_b: Tensor::zeros(&[m * m * kk]),
        pw3_w,
        pw3_b: Tensor::zeros(&[channels]),
    })
}

fn check_input<T: Element>(x: &Tensor<T>, gamma: &GsiWeights<T>) -> Result<usize> {
    let (_, c, _, _) = x.dims4()?;
    if c != gamma.input_channels() {
        return Err(Error::ShapeMismatch(format!(
            "GSI weights expect {} channels, input has {c}",
            gamma.input_channels()
        )));
    }
    Ok(c)
}

/// Predicts the per-sample kernel: `reshape(pw2(GAP(pw1(x))), [m, m, k, k])`.
pub fn gsi_predict<T: Element>(
    x: &Tensor<T>,
    gamma: &GsiWeights<T>,
    cfg: &GsiConfig,
) -> Result<GsiKernel<T>> {
    check_input(x, gamma)?;
    let pre = pointwise_forward(x, &gamma.pw1_w, Some(&gamma.pw1_b), 1)?;
    predict_from_pre(&pre, gamma, cfg)
}

fn predict_from_pre<T: Element>(
    pre: &Tensor<T>,
    gamma: &GsiWeights<T>,
    cfg: &GsiConfig,
) -> Result<GsiKernel<T>> {
    let (b, m, _, _) = pre.dims4()?;
    let pooled = global_avg_pool(pre)?;
    let kvec = pointwise_forward(&pooled, &gamma.pw2_w, Some(&gamma.pw2_b), 1)?;
    let k = cfg.k_gsi;
    GsiKernel::new(kvec.reshape(&[b, m, m, k, k])?)
}

/// Applies one kernel per sample as a sliding window over the reduced
/// feature map: `[B, m, H, W] x [B, m, m, k, k] -> [B, m, H', W']`.
pub fn gsi_apply<T: Element>(
    pre: &Tensor<T>,
    kernels: &GsiKernel<T>,
    cfg: &GsiConfig,
) -> Result<Tensor<T>> {
    let (b, m, h, w) = pre.dims4()?;
    if kernels.batch() != b || kernels.width() != m || kernels.k() != cfg.k_gsi {
        return Err(Error::ShapeMismatch(format!(
            "GSI kernels {:?} vs pre {:?} (k_gsi {})",
            kernels.tensor.shape(),
            pre.shape(),
            cfg.k_gsi
        )));
    }
    let k = cfg.k_gsi;
    let pad = k / 2;
    let ho = conv_out_extent(h, k, cfg.stride, pad)?;
    let wo = conv_out_extent(w, k, cfg.stride, pad)?;
    let padded = pad_zero(pre, pad)?;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let rows = m * k * k;
    let hw = ho * wo;
    let pd = padded.data();
    let kd = kernels.tensor.data();
    let mut y = Tensor::zeros(&[b, m, ho, wo]);
    y.data_mut()
        .par_chunks_mut(m * hw)
        .enumerate()
        .for_each(|(bi, y_b)| {
            let mut col = vec![T::zero(); rows * hw];
            super::gsi::im2col_sample(
                &pd[bi * m * hp * wp..(bi + 1) * m * hp * wp],
                hp,
                wp,
                m,
                k,
                cfg.stride,
                ho,
                wo,
                &mut col,
            );
            let kern = &kd[bi * m * rows..(bi + 1) * m * rows];
            matmul_into(kern, &col, y_b, m, rows, hw);
        });
    Ok(y)
}

// Shared with the static conv path in spirit, but kept local so this module
// stands alone; rows are ordered (channel, i, j).
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col_sample<T: Element>(
    padded: &[T],
    hp: usize,
    wp: usize,
    c: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let hw = ho * wo;
    for m in 0..c {
        let plane = &padded[m * hp * wp..(m + 1) * hp * wp];
        for i in 0..k {
            for j in 0..k {
                let row = (m * k + i) * k + j;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oh in 0..ho {
                    let src = (oh * stride + i) * wp + j;
                    for ow in 0..wo {
                        dst[oh * wo + ow] = plane[src + ow * stride];
                    }
                }
            }
        }
    }
}

/// Full-branch forward: `pw3(apply(pw1(x), predicted_kernel))`.
pub fn gsi_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &GsiWeights<T>,
    cfg: &GsiConfig,
) -> Result<Tensor<T>> {
    let (y, _) = gsi_forward_cached(x, gamma, cfg)?;
    Ok(y)
}

pub struct GsiCache<T: Element> {
    pub pre: Tensor<T>,
    pub pooled: Tensor<T>,
    pub kernels: GsiKernel<T>,
    pub applied: Tensor<T>,
}

pub fn gsi_forward_cached<T: Element>(
    x: &Tensor<T>,
    gamma: &GsiWeights<T>,
    cfg: &GsiConfig,
) -> Result<(Tensor<T>, GsiCache<T>)> {
    cfg.validate()?;
    check_input(x, gamma)?;
    let pre = pointwise_forward(x, &gamma.pw1_w, Some(&gamma.pw1_b), 1)?;
    let pooled = global_avg_pool(&pre)?;
    let kvec = pointwise_forward(&pooled, &gamma.pw2_w, Some(&gamma.pw2_b), 1)?;
    let (b, m, _, _) = pre.dims4()?;
    let k = cfg.k_gsi;
    let kernels = GsiKernel::new(kvec.reshape(&[b, m, m, k, k])?)?;
    let applied = gsi_apply(&pre, &kernels, cfg)?;
    let y = pointwise_forward(&applied, &gamma.pw3_w, Some(&gamma.pw3_b), 1)?;
    Ok((
        y,
        GsiCache {
            pre,
            pooled,
            kernels,
            applied,
        },
    ))
}

/// Gradients of [`gsi_apply`] with respect to the feature map and kernels.
pub fn gsi_apply_vjp<T: Element>(
    pre: &Tensor<T>,
    kernels: &GsiKernel<T>,
    cfg: &GsiConfig,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, GsiKernel<T>)> {
    let (b, m, h, w) = pre.dims4()?;
    let k = cfg.k_gsi;
    let pad = k / 2;
    let ho = conv_out_extent(h, k, cfg.stride, pad)?;
    let wo = conv_out_extent(w, k, cfg.stride, pad)?;
    if dy.shape() != [b, m, ho, wo] {
        return Err(Error::ShapeMismatch(format!(
            "gsi apply dy {:?}, expected {:?}",
            dy.shape(),
            [b, m, ho, wo]
        )));
    }
    let padded = pad_zero(pre, pad)?;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let rows = m * k * k;
    let hw = ho * wo;
    let pd = padded.data();
    let kd = kernels.tensor.data();
    let dyd = dy.data();

    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let mut col = vec![T::zero(); rows * hw];
            im2col_sample(
                &pd[bi * m * hp * wp..(bi + 1) * m * hp * wp],
                hp,
                wp,
                m,
                k,
                cfg.stride,
                ho,
                wo,
                &mut col,
            );
            let dy_b = &dyd[bi * m * hw..(bi + 1) * m * hw];
            // dkernel_b = dy_b . col^T
            let mut dkern = vec![T::zero(); m * rows];
            matmul_abt_into(dy_b, &col, &mut dkern, m, hw, rows);
            // dcol = kern^T . dy_b, then scatter back.
            let kern = &kd[bi * m * rows..(bi + 1) * m * rows];
            let mut dcol = vec![T::zero(); rows * hw];
            matmul_atb_into(kern, dy_b, &mut dcol, m, rows, hw);
            let mut dpad = vec![T::zero(); m * hp * wp];
            for mm in 0..m {
                let plane = &mut dpad[mm * hp * wp..(mm + 1) * hp * wp];
                for i in 0..k {
                    for j in 0..k {
                        let row = (mm * k + i) * k + j;
                        let src = &dcol[row * hw..(row + 1) * hw];
                        for oh in 0..ho {
                            let dst = (oh * cfg.stride + i) * wp + j;
                            for ow in 0..wo {
                                plane[dst + ow * cfg.stride] =
                                    plane[dst + ow * cfg.stride] + src[oh * wo + ow];
                            }
                        }
                    }
                }
            }
            (dpad, dkern)
        })
        .collect();

    let mut dpre = Tensor::zeros(&[b, m, h, w]);
    let mut dkernels = Tensor::zeros(kernels.tensor.shape());
    {
        let dpred = dpre.data_mut();
        let dkd = dkernels.data_mut();
        for (bi, (dpad, dkern)) in per_sample.iter().enumerate() {
            for mm in 0..m {
                for hi in 0..h {
                    let src = (mm * hp + hi + pad) * wp + pad;
                    let dst = ((bi * m + mm) * h + hi) * w;
                    for wi in 0..w {
                        dpred[dst + wi] = dpad[src + wi];
                    }
                }
            }
            dkd[bi * m * rows..(bi + 1) * m * rows].copy_from_slice(dkern);
        }
    }
    Ok((dpre, GsiKernel::new(dkernels)?))
}

/// Full-branch VJP: gradients flow through the applied-kernel path and the
/// kernel-prediction path (the input influences the output both directly and
/// via the predicted kernel).
pub fn gsi_vjp<T: Element>(
    x: &Tensor<T>,
    gamma: &GsiWeights<T>,
    cfg: &GsiConfig,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, GsiGrads<T>)> {
    let (_, cache) = gsi_forward_cached(x, gamma, cfg)?;
    gsi_vjp_cached(x, gamma, cfg, &cache, dy)
}

pub fn gsi_vjp_cached<T: Element>(
    x: &Tensor<T>,
    gamma: &GsiWeights<T>,
    cfg: &GsiConfig,
    cache: &GsiCache<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, GsiGrads<T>)> {
    // pw3
    let (dapplied, dpw3_w, dpw3_b) = pointwise_vjp(&cache.applied, &gamma.pw3_w, true, 1, dy)?;
    // dynamic conv apply
    let (dpre_direct, dkernels) = gsi_apply_vjp(&cache.pre, &cache.kernels, cfg, &dapplied)?;
    // kernel prediction: reshape kernel grads back to pw2 output channels
    let (b, m, _, _) = cache.pre.dims4()?;
    let kk = cfg.k_gsi * cfg.k_gsi;
    let dkvec = dkernels.tensor.reshape(&[b, m * m * kk, 1, 1])?;
    let (dpooled, dpw2_w, dpw2_b) = pointwise_vjp(&cache.pooled, &gamma.pw2_w, true, 1, &dkvec)?;
    // GAP backward: spread evenly over positions.
    let (_, _, h, w) = cache.pre.dims4()?;
    let inv_hw = T::from_f64(1.0 / (h * w) as f64);
    let mut dpre = dpre_direct;
    {
        let dd = dpre.data_mut();
        let dp = dpooled.data();
        for bi in 0..b {
            for mm in 0..m {
                let g = dp[bi * m + mm] * inv_hw;
                let base = (bi * m + mm) * h * w;
                for v in &mut dd[base..base + h * w] {
                    *v = *v + g;
                }
            }
        }
    }
    // pw1
    let (dx, dpw1_w, dpw1_b) = pointwise_vjp(x, &gamma.pw1_w, true, 1, &dpre)?;
    Ok((
        dx,
        GsiGrads {
            pw1_w: dpw1_w,
            pw1_b: dpw1_b.expect("pw1 bias grad"),
            pw2_w: dpw2_w,
            pw2_b: dpw2_b.expect("pw2 bias grad"),
            pw3_w: dpw3_w,
            pw3_b: dpw3_b.expect("pw3 bias grad"),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::rng::Rng;
    use crate::verify::randn;

    fn unit_weights(c: usize, cfg: &GsiConfig) -> GsiWeights<f64> {
        let m = cfg.reduced_width(c);
        let kk = cfg.k_gsi * cfg.k_gsi;
        GsiWeights {
            pw1_w: Tensor::full(&[m, c], 1.0),
            pw1_b: Tensor::zeros(&[m]),
            pw2_w: Tensor::full(&[m * m * kk, m], 1.0),
            pw2_b: Tensor::zeros(&[m * m * kk]),
            pw3_w: Tensor::full(&[c, m], 1.0),
            pw3_b: Tensor::zeros(&[c]),
        }
    }

    #[test]
    fn predict_mean_of_input() {
        // m = 1, k = 1, unit weights, zero biases: the kernel is the mean.
        let cfg = GsiConfig::default();
        let gamma = unit_weights(1, &cfg);
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let kern = gsi_predict(&x, &gamma, &cfg).unwrap();
        assert_eq!(kern.tensor.shape(), &[1, 1, 1, 1, 1]);
        assert!((kern.tensor.data()[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn predict_is_permutation_invariant() {
        let cfg = GsiConfig::default();
        let mut rng = Rng::new(31);
        let c = 4;
        let gamma = init_gsi_weights::<f64>(c, &cfg, &mut rng, false).unwrap();
        let x = randn(&[2, c, 3, 5], &mut rng);
        let k1 = gsi_predict(&x, &gamma, &cfg).unwrap();
        let mut perm = x.clone();
        for bc in 0..2 * c {
            perm.data_mut()[bc * 15..(bc + 1) * 15].reverse();
        }
        let k2 = gsi_predict(&perm, &gamma, &cfg).unwrap();
        let scale = k1
            .tensor
            .data()
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.abs()))
            .max(1e-12);
        for (a, b) in k1.tensor.data().iter().zip(k2.tensor.data().iter()) {
            assert!((a - b).abs() / scale <= 1e-12);
        }
    }

    #[test]
    fn predict_matches_composed_oracle() {
        let cfg = GsiConfig {
            k_gsi: 3,
            lambda: 1.0,
            stride: 1,
        };
        let mut rng = Rng::new(32);
        let c = 5;
        let m = cfg.reduced_width(c);
        let gamma = init_gsi_weights::<f64>(c, &cfg, &mut rng, false).unwrap();
        let x = randn(&[2, c, 4, 4], &mut rng);
        let kern = gsi_predict(&x, &gamma, &cfg).unwrap();
        // Composed reference: explicit pointwise, naive mean, pointwise.
        let pre = oracle::pointwise_oracle(&x, &gamma.pw1_w, Some(&gamma.pw1_b));
        let pooled = oracle::mean_oracle(&pre);
        let kvec = oracle::pointwise_oracle(&pooled, &gamma.pw2_w, Some(&gamma.pw2_b));
        let reference = kvec.reshape(&[2, m, m, 3, 3]).unwrap();
        let scale = reference
            .data()
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.abs()))
            .max(1e-12);
        for (a, b) in kern.tensor.data().iter().zip(reference.data().iter()) {
            assert!((a - b).abs() / scale <= 1e-12);
        }
    }

    #[test]
    fn forced_construction_scales_by_mean() {
        // m=1, k=1, unit weights: y = mean(x) * x summed over one channel.
        let cfg = GsiConfig::default();
        let gamma = unit_weights(1, &cfg);
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = gsi_forward(&x, &gamma, &cfg).unwrap();
        let expect = [2.5, 5.0, 7.5, 10.0];
        for (a, e) in y.data().iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_pw2_gives_bias_only_output() {
        let cfg = GsiConfig::default();
        let mut rng = Rng::new(33);
        let c = 4;
        let mut gamma = init_gsi_weights::<f64>(c, &cfg, &mut rng, true).unwrap();
        let x = randn(&[2, c, 3, 3], &mut rng);
        let y = gsi_forward(&x, &gamma, &cfg).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        // With a pw3 bias the output is that bias everywhere.
        gamma.pw3_b = Tensor::from_fn(&[c], |i| i as f64);
        let y2 = gsi_forward(&x, &gamma, &cfg).unwrap();
        for bi in 0..2 {
            for ci in 0..c {
                for h in 0..3 {
                    for w in 0..3 {
                        assert_eq!(y2.at(&[bi, ci, h, w]), ci as f64);
                    }
                }
            }
        }
    }

    #[test]
    fn apply_matches_per_sample_conv_oracle_exactly() {
        let mut rng = Rng::new(34);
        for &(k, stride) in &[(1usize, 1usize), (3, 1), (3, 2), (1, 2)] {
            let cfg = GsiConfig {
                k_gsi: k,
                lambda: 1.0,
                stride,
            };
            let m = 3;
            let pre = randn(&[2, m, 5, 5], &mut rng);
            let kernels = GsiKernel::new(randn(&[2, m, m, k, k], &mut rng)).unwrap();
            let fast = gsi_apply(&pre, &kernels, &cfg).unwrap();
            let reference = oracle::per_sample_conv_oracle(&pre, &kernels.tensor, stride, k / 2);
            assert_eq!(fast, reference, "k={k} stride={stride}");
        }
    }

    #[test]
    fn kernel_type_has_no_spatial_axes() {
        let cfg = GsiConfig::default();
        let mut rng = Rng::new(35);
        let gamma = init_gsi_weights::<f64>(4, &cfg, &mut rng, false).unwrap();
        let x = randn(&[2, 4, 6, 6], &mut rng);
        let kern = gsi_predict(&x, &gamma, &cfg).unwrap();
        // [B, m, m, k, k]: five axes, none spatial.
        assert_eq!(kern.tensor.ndim(), 5);
        assert_eq!(kern.tensor.shape()[0], 2);
        assert_eq!(kern.tensor.shape()[1], kern.tensor.shape()[2]);
        assert_eq!(kern.tensor.shape()[3], kern.tensor.shape()[4]);
    }

    #[test]
    fn zero_dy_gives_zero_grads() {
        let cfg = GsiConfig::default();
        let mut rng = Rng::new(36);
        let gamma = init_gsi_weights::<f64>(4, &cfg, &mut rng, false).unwrap();
        let x = randn(&[1, 4, 3, 3], &mut rng);
        let dy = Tensor::zeros(&[1, 4, 3, 3]);
        let (dx, dgamma) = gsi_vjp(&x, &gamma, &cfg, &dy).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dgamma.pw1_w.data().iter().all(|&v| v == 0.0));
        assert!(dgamma.pw2_w.data().iter().all(|&v| v == 0.0));
        assert!(dgamma.pw3_w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gap_symmetry_of_prediction_path_gradient() {
        // Constant input, linear pw1: the gradient through the prediction
        // path is identical across pixels.
        let cfg = GsiConfig::default();
        let mut rng = Rng::new(37);
        let gamma = init_gsi_weights::<f64>(2, &cfg, &mut rng, false).unwrap();
        let x = Tensor::full(&[1, 2, 3, 3], 0.7f64);
        let dy = randn(&[1, 2, 3, 3], &mut rng);
        let (dx, _) = gsi_vjp(&x, &gamma, &cfg, &dy).unwrap();
        // dx = direct path (depends on dy pixel) + prediction path (uniform).
        // Isolate the prediction path by comparing against a kernels-frozen
        // run: freeze kernels by treating them as constants.
        let (_, cache) = gsi_forward_cached(&x, &gamma, &cfg).unwrap();
        let (dapplied, _, _) = pointwise_vjp(&cache.applied, &gamma.pw3_w, true, 1, &dy).unwrap();
        let (dpre_direct, _) = gsi_apply_vjp(&cache.pre, &cache.kernels, &cfg, &dapplied).unwrap();
        let (dx_direct, _, _) = pointwise_vjp(&x, &gamma.pw1_w, true, 1, &dpre_direct).unwrap();
        let diff = dx.add(&dx_direct.scale(-1.0)).unwrap();
        // The remainder (prediction-path gradient) is constant per channel.
        for c in 0..2 {
            let v0 = diff.at(&[0, c, 0, 0]);
            for h in 0..3 {
                for w in 0..3 {
                    assert!((diff.at(&[0, c, h, w]) - v0).abs() <= 1e-12 * v0.abs().max(1.0));
                }
            }
        }
    }
}
