//! Local spatial-adaptive branch: per-position kernel prediction and apply.

use crate::conv::{conv_out_extent, depthwise_forward, depthwise_vjp, pointwise_forward, pointwise_vjp};
use crate::error::{Error, Result};
use crate::norm::{self, BnCache, BnMode};
use crate::rng::Rng;
use crate::tensor::{pad_zero, Element, Tensor};
use rayon::prelude::*;

/// Configuration of the LSA branch.
#[derive(Debug, Clone)]
pub struct LsaConfig {
    /// Applied kernel size (odd).
    pub k_lsa: usize,
    /// Depthwise kernel size inside the predictor (odd).
    pub k_dw: usize,
    /// Number of (depthwise, pointwise) predictor pairs.
    pub n_pairs: usize,
    /// Predictor channel reduction ratio; hidden width is `ceil(alpha * C)`.
    pub alpha: f64,
    /// Channels sharing one predicted kernel; groups = C / group_size, or 1
    /// when C is not divisible.
    pub group_size: usize,
    pub stride: usize,
}

impl Default for LsaConfig {
    fn default() -> Self {
        LsaConfig {
            k_lsa: 7,
            k_dw: 3,
            n_pairs: 2,
            alpha: 0.25,
            group_size: 16,
            stride: 1,
        }
    }
}

impl LsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_lsa % 2 == 0 || self.k_dw % 2 == 0 {
            return Err(Error::Config("LSA kernel sizes must be odd".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if self.n_pairs == 0 || self.stride == 0 || self.group_size == 0 {
            return Err(Error::Config("n_pairs, stride, group_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Kernel groups for a channel count: `C / group_size`, forced to 1 when
    /// C is smaller than or not divisible by the group size.
    pub fn groups(&self, channels: usize) -> usize {
        if channels >= self.group_size && channels % self.group_size == 0 {
            channels / self.group_size
        } else {
            1
        }
    }

    pub fn hidden_width(&self, channels: usize) -> usize {
        ((self.alpha * channels as f64).ceil() as usize).max(1)
    }

    /// Side length of the input region each predicted kernel depends on
    /// (one depthwise layer per pair widens it by `k_dw - 1`).
    pub fn receptive_field(&self) -> usize {
        self.n_pairs * (self.k_dw - 1) + 1
    }
}

/// Predictor weights: `n_pairs` stages of optional depthwise + pointwise,
/// batch norm (with running stats) on every pointwise output except the last.
/// The channel trajectory is `C -> ceil(alpha*C) -> ... -> G * k_lsa^2`.
#[derive(Debug, Clone)]
pub struct LsaPredictorWeights<T: Element> {
    pub stages: Vec<PredictorStage<T>>,
}

#[derive(Debug, Clone)]
pub struct PredictorStage<T: Element> {
    /// `[C_in, 1, k_dw, k_dw]`; absent for the single-pixel predictor.
    pub dw: Option<Tensor<T>>,
    /// `[C_out, C_in]`, no bias.
    pub pw: Tensor<T>,
    /// Batch-norm scale/shift + running stats; absent on the final stage.
    pub bn: Option<StageBn<T>>,
}

#[derive(Debug, Clone)]
pub struct StageBn<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

/// Gradients mirroring [`LsaPredictorWeights`].
#[derive(Debug, Clone)]
pub struct LsaPredictorGrads<T: Element> {
    pub stages: Vec<StageGrads<T>>,
}

#[derive(Debug, Clone)]
pub struct StageGrads<T: Element> {
    pub dw: Option<Tensor<T>>,
    pub pw: Tensor<T>,
    pub bn: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Element> LsaPredictorWeights<T> {
    pub fn input_channels(&self) -> usize {
        self.stages[0].pw.shape()[1]
    }

    pub fn output_channels(&self) -> usize {
        self.stages.last().expect("at least one stage").pw.shape()[0]
    }

    /// Actual receptive field of this predictor (1 when single-pixel).
    pub fn receptive_field(&self, cfg: &LsaConfig) -> usize {
        let dw_stages = self.stages.iter().filter(|s| s.dw.is_some()).count();
        dw_stages * (cfg.k_dw - 1) + 1
    }
}

/// Per-(sample, group, position) predicted kernels: `[B, G, k^2, H', W']`.
/// Predictor output channel `g*k^2 + (i*k + j)` maps to kernel tap `(i, j)`
/// of group `g`.
#[derive(Debug, Clone)]
pub struct LsaKernelField<T: Element> {
    pub tensor: Tensor<T>,
    pub k: usize,
}

impl<T: Element> LsaKernelField<T> {
    pub fn new(tensor: Tensor<T>, k: usize) -> Result<Self> {
        if tensor.ndim() != 5 || tensor.shape()[2] != k * k {
            return Err(Error::ShapeMismatch(format!(
                "kernel field must be [B, G, {}, H, W], got {:?}",
                k * k,
                tensor.shape()
            )));
        }
        Ok(LsaKernelField { tensor, k })
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn groups(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.tensor.shape()[3], self.tensor.shape()[4])
    }
}

/// Kaiming fan-in normal initialisation of a predictor for `channels` inputs.
/// `single_pixel` drops the depthwise layers (kernels are then predicted from
/// the centre pixel alone); `zero_final` zero-fills the last pointwise layer
/// so the predicted field starts at zero.
pub fn init_lsa_predictor<T: Element>(
    channels: usize,
    cfg: &LsaConfig,
    rng: &mut Rng,
    single_pixel: bool,
    zero_final: bool,
) -> Result<LsaPredictorWeights<T>> {
    cfg.validate()?;
    let groups = cfg.groups(channels);
    let hidden = cfg.hidden_width(channels);
    let out_channels = groups * cfg.k_lsa * cfg.k_lsa;
    let mut widths = vec![channels];
    for _ in 1..cfg.n_pairs {
        widths.push(hidden);
    }
    widths.push(out_channels);

    let mut stages = Vec::with_capacity(cfg.n_pairs);
    for s in 0..cfg.n_pairs {
        let (c_in, c_out) = (widths[s], widths[s + 1]);
        let dw = if single_pixel {
            None
        } else {
            let std = (2.0 / (cfg.k_dw * cfg.k_dw) as f64).sqrt();
            Some(Tensor::from_fn(&[c_in, 1, cfg.k_dw, cfg.k_dw], |_| {
                T::from_f64(std * rng.next_standard_normal())
            }))
        };
        let last = s + 1 == cfg.n_pairs;
        let pw = if last && zero_final {
            Tensor::zeros(&[c_out, c_in])
        } else {
            let std = (2.0 / c_in as f64).sqrt();
            Tensor::from_fn(&[c_out, c_in], |_| T::from_f64(std * rng.next_standard_normal()))
        };
        let bn = if last {
            None
        } else {
            Some(StageBn {
                gamma: Tensor::full(&[c_out], T::one()),
                beta: Tensor::zeros(&[c_out]),
                running_mean: Tensor::zeros(&[c_out]),
                running_var: Tensor::full(&[c_out], T::one()),
            })
        };
        stages.push(PredictorStage { dw, pw, bn });
    }
    Ok(LsaPredictorWeights { stages })
}

/// Mean pooling to the operator's output resolution: output cell `h` covers
/// input rows `[h*s, min(h*s + s, H))`. For extents divisible by `s` this is
/// plain non-overlapping s×s pooling.
pub(crate) fn avg_pool_by_stride<T: Element>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let ho = (h - 1) / s + 1;
    let wo = (w - 1) / s + 1;
    let mut y = Tensor::zeros(&[b, c, ho, wo]);
    let xd = x.data();
    let yd = y.data_mut();
    for bc in 0..b * c {
        let plane = &xd[bc * h * w..(bc + 1) * h * w];
        let out = &mut yd[bc * ho * wo..(bc + 1) * ho * wo];
        for oh in 0..ho {
            let h_end = (oh * s + s).min(h);
            for ow in 0..wo {
                let w_end = (ow * s + s).min(w);
                let mut acc = T::zero();
                for hi in oh * s..h_end {
                    for wi in ow * s..w_end {
                        acc = acc + plane[hi * w + wi];
                    }
                }
                let count = (h_end - oh * s) * (w_end - ow * s);
                out[oh * wo + ow] = acc * T::from_f64(1.0 / count as f64);
            }
        }
    }
    Ok(y)
}

fn avg_pool_by_stride_vjp<T: Element>(
    in_shape: &[usize],
    s: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (dy.shape()[2], dy.shape()[3]);
    let mut dx = Tensor::zeros(in_shape);
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for bc in 0..b * c {
        let dplane = &dyd[bc * ho * wo..(bc + 1) * ho * wo];
        let out = &mut dxd[bc * h * w..(bc + 1) * h * w];
        for oh in 0..ho {
            let h_end = (oh * s + s).min(h);
            for ow in 0..wo {
                let w_end = (ow * s + s).min(w);
                let count = (h_end - oh * s) * (w_end - ow * s);
                let g = dplane[oh * wo + ow] * T::from_f64(1.0 / count as f64);
                for hi in oh * s..h_end {
                    for wi in ow * s..w_end {
                        out[hi * w + wi] = out[hi * w + wi] + g;
                    }
                }
            }
        }
    }
    dx
}

/// Everything the backward pass needs from a predictor forward run.
pub struct PredictCache<T: Element> {
    pooled: Option<Tensor<T>>,
    stages: Vec<StageCache<T>>,
    pub(crate) bn_caches: Vec<Option<BnCache<T>>>,
}

pub(crate) struct StageCache<T: Element> {
    x_in: Tensor<T>,
    dw_out: Option<Tensor<T>>,
    /// Pointwise output (BN input); only cached when the stage has BN.
    pw_out: Option<Tensor<T>>,
    /// Pre-ReLU activations (BN output); absent on the final stage.
    pub(crate) bn_out: Option<Tensor<T>>,
}

impl<T: Element> PredictCache<T> {
    /// Smallest |pre-ReLU| activation; used to keep finite-difference probes
    /// away from kinks.
    pub fn min_pre_relu_magnitude(&self) -> f64 {
        let mut m = f64::INFINITY;
        for st in &self.stages {
            if let Some(bn_out) = &st.bn_out {
                for &v in bn_out.data() {
                    m = m.min(v.to_f64().abs());
                }
            }
        }
        m
    }
}

fn predictor_run<T: Element>(
    x: &Tensor<T>,
    theta: &LsaPredictorWeights<T>,
    cfg: &LsaConfig,
    mode: BnMode,
) -> Result<(Tensor<T>, PredictCache<T>)> {
    let (_, c, _, _) = x.dims4()?;
    if c != theta.input_channels() {
        return Err(Error::ShapeMismatch(format!(
            "predictor expects {} channels, input has {c}",
            theta.input_channels()
        )));
    }
    let pooled = if cfg.stride > 1 {
        Some(avg_pool_by_stride(x, cfg.stride)?)
    } else {
        None
    };
    let mut a = pooled.clone().unwrap_or_else(|| x.clone());
    let mut stages = Vec::with_capacity(theta.stages.len());
    let mut bn_caches = Vec::with_capacity(theta.stages.len());
    for stage in &theta.stages {
        let x_in = a;
        let dw_out = match &stage.dw {
            Some(dw) => Some(depthwise_forward(&x_in, dw, 1, cfg.k_dw / 2)?),
            None => None,
        };
        let pw_in = dw_out.as_ref().unwrap_or(&x_in);
        let pw_out = pointwise_forward(pw_in, &stage.pw, None, 1)?;
        let (next, pw_cached, bn_out, bn_cache) = match &stage.bn {
            Some(bn) => {
                let (y, cache) = match mode {
                    BnMode::Batch => norm::forward_batch(&pw_out, &bn.gamma, &bn.beta, BN_EPS)?,
                    BnMode::Running => {
                        let y = norm::forward_running(
                            &pw_out,
                            &bn.gamma,
                            &bn.beta,
                            &bn.running_mean,
                            &bn.running_var,
                            BN_EPS,
                        )?;
                        // Cache unused in running mode; store batch stats shape-compatibly.
                        let c_out = bn.gamma.numel();
                        (
                            y,
                            BnCache {
                                mean: bn.running_mean.clone(),
                                inv_std: Tensor::from_fn(&[c_out], |ci| {
                                    T::from_f64(
                                        1.0 / (bn.running_var.data()[ci].to_f64() + BN_EPS).sqrt(),
                                    )
                                }),
                                var: bn.running_var.clone(),
                                n: 0,
                            },
                        )
                    }
                };
                let relu = y.map(|v| if v > T::zero() { v } else { T::zero() });
                (relu, Some(pw_out), Some(y), Some(cache))
            }
            None => (pw_out, None, None, None),
        };
        stages.push(StageCache {
            x_in,
            dw_out,
            pw_out: pw_cached,
            bn_out,
        });
        bn_caches.push(bn_cache);
        a = next;
    }
    Ok((
        a,
        PredictCache {
            pooled,
            stages,
            bn_caches,
        },
    ))
}

pub(crate) const BN_EPS: f64 = 1e-5;

/// Runs the kernel-prediction sub-network. With stride > 1 the input is mean
/// pooled first so kernels exist at output resolution.
pub fn lsa_predict<T: Element>(
    x: &Tensor<T>,
    theta: &LsaPredictorWeights<T>,
    cfg: &LsaConfig,
    mode: BnMode,
) -> Result<LsaKernelField<T>> {
    let (field, _) = lsa_predict_cached(x, theta, cfg, mode)?;
    Ok(field)
}

pub fn lsa_predict_cached<T: Element>(
    x: &Tensor<T>,
    theta: &LsaPredictorWeights<T>,
    cfg: &LsaConfig,
    mode: BnMode,
) -> Result<(LsaKernelField<T>, PredictCache<T>)> {
    cfg.validate()?;
    let (_, c, _, _) = x.dims4()?;
    let groups = cfg.groups(c);
    let kk = cfg.k_lsa * cfg.k_lsa;
    if theta.output_channels() != groups * kk {
        return Err(Error::ShapeMismatch(format!(
            "predictor emits {} channels, expected {} (G={groups}, k^2={kk})",
            theta.output_channels(),
            groups * kk
        )));
    }
    let (raw, cache) = predictor_run(x, theta, cfg, mode)?;
    let (b, _, ho, wo) = raw.dims4()?;
    let field = raw.reshape(&[b, groups, kk, ho, wo])?;
    Ok((LsaKernelField::new(field, cfg.k_lsa)?, cache))
}

fn group_of(n: usize, groups: usize, group_size: usize) -> usize {
    if groups == 1 {
        0
    } else {
        n / group_size
    }
}

/// Applies a kernel field (Dirac or predicted) as a sliding window:
/// channel count is preserved and every channel of group `g` is convolved
/// with the same per-position kernel. Zero padding `k/2`.
pub fn lsa_forward<T: Element>(
    x: &Tensor<T>,
    field: &LsaKernelField<T>,
    cfg: &LsaConfig,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let k = field.k;
    let pad = k / 2;
    let ho = conv_out_extent(h, k, cfg.stride, pad)?;
    let wo = conv_out_extent(w, k, cfg.stride, pad)?;
    let groups = field.groups();
    if field.batch() != b || field.spatial() != (ho, wo) {
        return Err(Error::ShapeMismatch(format!(
            "kernel field {:?} does not match output [{b}, {groups}, {}, {ho}, {wo}]",
            field.tensor.shape(),
            k * k
        )));
    }
    if groups != cfg.groups(c) {
        return Err(Error::ShapeMismatch(format!(
            "field has {groups} groups, config implies {}",
            cfg.groups(c)
        )));
    }
    let padded = pad_zero(x, pad)?;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let s = cfg.stride;
    let hw = ho * wo;
    let kk = k * k;
    let fd = field.tensor.data();
    let pd = padded.data();
    let mut y = Tensor::zeros(&[b, c, ho, wo]);
    y.data_mut()
        .par_chunks_mut(hw)
        .with_min_len(4)
        .enumerate()
        .for_each(|(bn, out_plane)| {
            let (bi, n) = (bn / c, bn % c);
            let g = group_of(n, groups, cfg.group_size);
            let plane = &pd[(bi * c + n) * hp * wp..(bi * c + n + 1) * hp * wp];
            let kern_base = (bi * groups + g) * kk * hw;
            // Tap-major traversal keeps both the kernel slab and (at stride 1)
            // the input row contiguous; per-element accumulation order is
            // still (i, j) ascending.
            for i in 0..k {
                for j in 0..k {
                    let kern = &fd[kern_base + (i * k + j) * hw..kern_base + (i * k + j + 1) * hw];
                    for oh in 0..ho {
                        let in_row = (oh * s + i) * wp + j;
                        let out_row = oh * wo;
                        if s == 1 {
                            let src = &plane[in_row..in_row + wo];
                            let kr = &kern[out_row..out_row + wo];
                            let dst = &mut out_plane[out_row..out_row + wo];
                            for ((o, &p), &kv) in dst.iter_mut().zip(src.iter()).zip(kr.iter()) {
                                *o = *o + p * kv;
                            }
                        } else {
                            for ow in 0..wo {
                                out_plane[out_row + ow] = out_plane[out_row + ow]
                                    + plane[in_row + ow * s] * kern[out_row + ow];
                            }
                        }
                    }
                }
            }
        });
    Ok(y)
}

/// Gradients of [`lsa_forward`] with respect to the input and the kernel field.
pub fn lsa_apply_vjp<T: Element>(
    x: &Tensor<T>,
    field: &LsaKernelField<T>,
    cfg: &LsaConfig,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, LsaKernelField<T>)> {
    let (b, c, h, w) = x.dims4()?;
    let k = field.k;
    let pad = k / 2;
    let ho = conv_out_extent(h, k, cfg.stride, pad)?;
    let wo = conv_out_extent(w, k, cfg.stride, pad)?;
    if dy.shape() != [b, c, ho, wo] {
        return Err(Error::ShapeMismatch(format!(
            "lsa dy {:?}, expected {:?}",
            dy.shape(),
            [b, c, ho, wo]
        )));
    }
    let groups = field.groups();
    let padded = pad_zero(x, pad)?;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let s = cfg.stride;
    let hw = ho * wo;
    let kk = k * k;
    let fd = field.tensor.data();
    let pd = padded.data();
    let dyd = dy.data();

    // dx: each (sample, channel) plane is independent.
    let mut dpad = vec![T::zero(); b * c * hp * wp];
    dpad.par_chunks_mut(hp * wp)
        .with_min_len(4)
        .enumerate()
        .for_each(|(bn, dplane)| {
            let (bi, n) = (bn / c, bn % c);
            let g = group_of(n, groups, cfg.group_size);
            let kern_base = (bi * groups + g) * kk * hw;
            let dout = &dyd[bn * hw..(bn + 1) * hw];
            for i in 0..k {
                for j in 0..k {
                    let kern = &fd[kern_base + (i * k + j) * hw..kern_base + (i * k + j + 1) * hw];
                    for oh in 0..ho {
                        let in_row = (oh * s + i) * wp + j;
                        let out_row = oh * wo;
                        for ow in 0..wo {
                            dplane[in_row + ow * s] = dplane[in_row + ow * s]
                                + kern[out_row + ow] * dout[out_row + ow];
                        }
                    }
                }
            }
        });
    let mut dx = Tensor::zeros(&[b, c, h, w]);
    {
        let dxd = dx.data_mut();
        for bn in 0..b * c {
            let dplane = &dpad[bn * hp * wp..(bn + 1) * hp * wp];
            for hi in 0..h {
                let src = (hi + pad) * wp + pad;
                let dst = (bn * h + hi) * w;
                for wi in 0..w {
                    dxd[dst + wi] = dplane[src + wi];
                }
            }
        }
    }

    // dfield: each (sample, group) block sums over its member channels in
    // ascending channel order.
    let group_size = if groups == 1 { c } else { cfg.group_size };
    let mut dfield = Tensor::zeros(field.tensor.shape());
    dfield
        .data_mut()
        .par_chunks_mut(kk * hw)
        .enumerate()
        .for_each(|(bg, dkern)| {
            let (bi, g) = (bg / groups, bg % groups);
            for n in g * group_size..(g + 1) * group_size {
                let plane = &pd[(bi * c + n) * hp * wp..(bi * c + n + 1) * hp * wp];
                let dout = &dyd[(bi * c + n) * hw..(bi * c + n + 1) * hw];
                for i in 0..k {
                    for j in 0..k {
                        let kern = &mut dkern[(i * k + j) * hw..(i * k + j + 1) * hw];
                        for oh in 0..ho {
                            let in_row = (oh * s + i) * wp + j;
                            let out_row = oh * wo;
                            for ow in 0..wo {
                                kern[out_row + ow] = kern[out_row + ow]
                                    + plane[in_row + ow * s] * dout[out_row + ow];
                            }
                        }
                    }
                }
            }
        });

    Ok((dx, LsaKernelField::new(dfield, k)?))
}

/// Full-branch forward: predict, then apply.
pub fn lsa_op_forward<T: Element>(
    x: &Tensor<T>,
    theta: &LsaPredictorWeights<T>,
    cfg: &LsaConfig,
    mode: BnMode,
) -> Result<Tensor<T>> {
    let field = lsa_predict(x, theta, cfg, mode)?;
    lsa_forward(x, &field, cfg)
}

pub struct LsaCache<T: Element> {
    pub field: LsaKernelField<T>,
    pub(crate) predict: PredictCache<T>,
}

pub fn lsa_forward_cached<T: Element>(
    x: &Tensor<T>,
    theta: &LsaPredictorWeights<T>,
    cfg: &LsaConfig,
    mode: BnMode,
) -> Result<(Tensor<T>, LsaCache<T>)> {
    let (field, predict) = lsa_predict_cached(x, theta, cfg, mode)?;
    let y = lsa_forward(x, &field, cfg)?;
    Ok((y, LsaCache { field, predict }))
}

/// Backward through the predictor stack given the gradient of the raw
/// predictor output (field reshaped back to channels).
fn predictor_vjp<T: Element>(
    theta: &LsaPredictorWeights<T>,
    cfg: &LsaConfig,
    cache: &PredictCache<T>,
    in_shape: &[usize],
    draw: Tensor<T>,
) -> Result<(Tensor<T>, LsaPredictorGrads<T>)> {
    let mut da = draw;
    let mut stage_grads: Vec<StageGrads<T>> = Vec::with_capacity(theta.stages.len());
    for (idx, stage) in theta.stages.iter().enumerate().rev() {
        let sc = &cache.stages[idx];
        let mut bn_grad = None;
        if let Some(bn) = &stage.bn {
            // ReLU mask from the pre-activation.
            let pre = sc.bn_out.as_ref().expect("bn stage caches pre-relu");
            let mut masked = da.clone();
            for (m, &p) in masked.data_mut().iter_mut().zip(pre.data().iter()) {
                if p <= T::zero() {
                    *m = T::zero();
                }
            }
            let bn_cache = cache.bn_caches[idx].as_ref().expect("bn cache");
            let pw_out = sc.pw_out.as_ref().expect("bn stage caches its input");
            let (dx_bn, dgamma, dbeta) =
                norm::vjp_batch(pw_out, &bn.gamma, bn_cache, &masked)?;
            da = dx_bn;
            bn_grad = Some((dgamma, dbeta));
        }
        let pw_in = sc.dw_out.as_ref().unwrap_or(&sc.x_in);
        let (d_pw_in, dpw, _) = pointwise_vjp(pw_in, &stage.pw, false, 1, &da)?;
        da = d_pw_in;
        let dw_grad = match &stage.dw {
            Some(dw) => {
                let (d_in, ddw) = depthwise_vjp(&sc.x_in, dw, 1, cfg.k_dw / 2, &da)?;
                da = d_in;
                Some(ddw)
            }
            None => None,
        };
        stage_grads.push(StageGrads {
            dw: dw_grad,
            pw: dpw,
            bn: bn_grad,
        });
    }
    stage_grads.reverse();
    let dx = if cache.pooled.is_some() {
        avg_pool_by_stride_vjp(in_shape, cfg.stride, &da)
    } else {
        da
    };
    Ok((dx, LsaPredictorGrads { stages: stage_grads }))
}

/// Full-branch VJP: the input gradient receives both the direct convolution
/// path and the kernel-prediction path.
pub fn lsa_vjp<T: Element>(
    x: &Tensor<T>,
    theta: &LsaPredictorWeights<T>,
    cfg: &LsaConfig,
    mode: BnMode,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, LsaPredictorGrads<T>)> {
    let (_, cache) = lsa_forward_cached(x, theta, cfg, mode)?;
    lsa_vjp_cached(x, theta, cfg, &cache, dy)
}

pub fn lsa_vjp_cached<T: Element>(
    x: &Tensor<T>,
    theta: &LsaPredictorWeights<T>,
    cfg: &LsaConfig,
    cache: &LsaCache<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, LsaPredictorGrads<T>)> {
    let (dx_direct, dfield) = lsa_apply_vjp(x, &cache.field, cfg, dy)?;
    let (b, _, _, _) = x.dims4()?;
    let (ho, wo) = cache.field.spatial();
    let groups = cache.field.groups();
    let kk = cache.field.k * cache.field.k;
    let draw = dfield.tensor.reshape(&[b, groups * kk, ho, wo])?;
    let (dx_predict, dtheta) = predictor_vjp(theta, cfg, &cache.predict, x.shape(), draw)?;
    let dx = dx_direct.add(&dx_predict)?;
    Ok((dx, dtheta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::rng::Rng;
    use crate::verify::randn;

    fn cfg_k3(stride: usize) -> LsaConfig {
        LsaConfig {
            k_lsa: 3,
            k_dw: 3,
            n_pairs: 2,
            alpha: 0.25,
            group_size: 2,
            stride,
        }
    }

    #[test]
    fn zero_predictor_gives_zero_field() {
        let cfg = cfg_k3(1);
        let mut rng = Rng::new(1);
        let mut theta = init_lsa_predictor::<f64>(4, &cfg, &mut rng, false, false).unwrap();
        for stage in &mut theta.stages {
            if let Some(dw) = &mut stage.dw {
                *dw = Tensor::zeros(dw.shape());
            }
            stage.pw = Tensor::zeros(stage.pw.shape());
            if let Some(bn) = &mut stage.bn {
                bn.beta = Tensor::zeros(bn.beta.shape());
            }
        }
        let x = randn(&[1, 4, 3, 3], &mut rng);
        let field = lsa_predict(&x, &theta, &cfg, BnMode::Batch).unwrap();
        assert!(field.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_dirac_path_matches_hand_computation() {
        // N=1, single-pixel predictor: the field at (h, w) is a fixed linear
        // read-out of x[:, :, h, w]. Weight rows: row r sums channel (r mod 4)
        // with weight 1 for r < 4, else 0 ("identity-extended").
        let cfg = LsaConfig {
            k_lsa: 3,
            k_dw: 3,
            n_pairs: 1,
            alpha: 1.0,
            group_size: 4,
            stride: 1,
        };
        let mut pw = Tensor::zeros(&[9, 4]);
        for r in 0..4 {
            pw.set(&[r, r], 1.0);
        }
        let theta = LsaPredictorWeights {
            stages: vec![PredictorStage {
                dw: None,
                pw,
                bn: None,
            }],
        };
        let x = Tensor::new(
            &[1, 4, 2, 2],
            (0..16).map(|v| v as f64 * 0.5 - 3.0).collect(),
        )
        .unwrap();
        let field = lsa_predict(&x, &theta, &cfg, BnMode::Batch).unwrap();
        assert_eq!(field.tensor.shape(), &[1, 1, 9, 2, 2]);
        for h in 0..2 {
            for w in 0..2 {
                for tap in 0..9 {
                    let expect = if tap < 4 { x.at(&[0, tap, h, w]) } else { 0.0 };
                    assert_eq!(field.tensor.at(&[0, 0, tap, h, w]), expect);
                }
            }
        }
    }

    #[test]
    fn wide_field_predictor_with_dirac_dw_reads_center_pixel() {
        // Depthwise Dirac kernels make each dw layer an identity, so the
        // field still reads the centre pixel exactly.
        let cfg = LsaConfig {
            k_lsa: 3,
            k_dw: 3,
            n_pairs: 1,
            alpha: 1.0,
            group_size: 4,
            stride: 1,
        };
        let mut dw = Tensor::zeros(&[4, 1, 3, 3]);
        for c in 0..4 {
            dw.set(&[c, 0, 1, 1], 1.0);
        }
        let mut pw = Tensor::zeros(&[9, 4]);
        for r in 0..4 {
            pw.set(&[r, r], 1.0);
        }
        let theta = LsaPredictorWeights {
            stages: vec![PredictorStage {
                dw: Some(dw),
                pw,
                bn: None,
            }],
        };
        let mut rng = Rng::new(2);
        let x = randn(&[1, 4, 2, 2], &mut rng);
        let field = lsa_predict(&x, &theta, &cfg, BnMode::Batch).unwrap();
        for h in 0..2 {
            for w in 0..2 {
                for tap in 0..4 {
                    assert_eq!(field.tensor.at(&[0, 0, tap, h, w]), x.at(&[0, tap, h, w]));
                }
            }
        }
    }

    #[test]
    fn locality_out_of_neighborhood_perturbation_is_invisible() {
        // Locality is a property of the deployed operator, so the predictor
        // runs with stored running statistics here; batch statistics couple
        // every position by construction.
        let cfg = cfg_k3(1);
        let mut rng = Rng::new(3);
        let theta = init_lsa_predictor::<f64>(4, &cfg, &mut rng, false, false).unwrap();
        let x = randn(&[1, 4, 9, 9], &mut rng);
        let field = lsa_predict(&x, &theta, &cfg, BnMode::Running).unwrap();
        // Receptive field is 5x5 around (4, 4); perturb at (0, 0) and (8, 8):
        // Chebyshev distance 4 > 2.
        assert_eq!(cfg.receptive_field(), 5);
        let mut x2 = x.clone();
        x2.set(&[0, 1, 0, 0], 1000.0);
        x2.set(&[0, 2, 8, 8], -512.0);
        let field2 = lsa_predict(&x2, &theta, &cfg, BnMode::Running).unwrap();
        for g in 0..field.groups() {
            for tap in 0..9 {
                let a = field.tensor.at(&[0, g, tap, 4, 4]);
                let b = field2.tensor.at(&[0, g, tap, 4, 4]);
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // A perturbation inside the neighbourhood is visible.
        let mut x3 = x.clone();
        x3.set(&[0, 1, 4, 5], 7.0);
        let field3 = lsa_predict(&x3, &theta, &cfg, BnMode::Running).unwrap();
        let moved = (0..field.groups())
            .flat_map(|g| (0..9).map(move |t| (g, t)))
            .any(|(g, t)| {
                field.tensor.at(&[0, g, t, 4, 4]) != field3.tensor.at(&[0, g, t, 4, 4])
            });
        assert!(moved);
    }

    #[test]
    fn dirac_field_is_identity() {
        let cfg = cfg_k3(1);
        let mut rng = Rng::new(4);
        let x = randn(&[2, 4, 5, 5], &mut rng);
        let mut field = Tensor::zeros(&[2, 2, 9, 5, 5]);
        // Centre tap of a 3x3 kernel is index 4.
        for b in 0..2 {
            for g in 0..2 {
                for h in 0..5 {
                    for w in 0..5 {
                        field.set(&[b, g, 4, h, w], 1.0);
                    }
                }
            }
        }
        let field = LsaKernelField::new(field, 3).unwrap();
        let y = lsa_forward(&x, &field, &cfg).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_field_reduces_to_static_conv() {
        let cfg = LsaConfig {
            k_lsa: 3,
            group_size: 1,
            ..cfg_k3(1)
        };
        let x = Tensor::new(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let field = LsaKernelField::new(Tensor::full(&[1, 1, 9, 3, 3], 1.0), 3).unwrap();
        let y = lsa_forward(&x, &field, &cfg).unwrap();
        assert_eq!(y.at(&[0, 0, 1, 1]), 45.0);
    }

    #[test]
    fn apply_matches_direct_oracle_exactly() {
        let mut rng = Rng::new(5);
        for stride in [1usize, 2] {
            let cfg = cfg_k3(stride);
            let x = randn(&[2, 4, 5, 5], &mut rng);
            let ho = (5 - 1) / stride + 1;
            let field =
                LsaKernelField::new(randn(&[2, 2, 9, ho, ho], &mut rng), 3).unwrap();
            let fast = lsa_forward(&x, &field, &cfg).unwrap();
            let reference = oracle::lsa_apply_oracle(&x, &field.tensor, 3, stride, 2);
            assert_eq!(fast, reference, "stride {stride}");
        }
    }

    #[test]
    fn channel_sharing_within_groups() {
        // Compare against explicit per-channel application of the group kernel.
        let cfg = cfg_k3(1);
        let mut rng = Rng::new(6);
        let x = randn(&[1, 4, 4, 4], &mut rng);
        let field = LsaKernelField::new(randn(&[1, 2, 9, 4, 4], &mut rng), 3).unwrap();
        let y = lsa_forward(&x, &field, &cfg).unwrap();
        for n in 0..4 {
            let g = n / 2;
            // Single-channel slice convolved with its group kernel.
            let xs = Tensor::from_fn(&[1, 1, 4, 4], |i| x.data()[n * 16 + i]);
            let fs = Tensor::from_fn(&[1, 1, 9, 4, 4], |i| field.tensor.data()[g * 9 * 16 + i]);
            let cfg1 = LsaConfig {
                group_size: 1,
                ..cfg.clone()
            };
            let ys = lsa_forward(&xs, &LsaKernelField::new(fs, 3).unwrap(), &cfg1).unwrap();
            for h in 0..4 {
                for w in 0..4 {
                    assert_eq!(ys.at(&[0, 0, h, w]), y.at(&[0, n, h, w]));
                }
            }
        }
    }

    #[test]
    fn zero_dy_gives_zero_grads() {
        let cfg = cfg_k3(1);
        let mut rng = Rng::new(7);
        let theta = init_lsa_predictor::<f64>(4, &cfg, &mut rng, false, false).unwrap();
        let x = randn(&[1, 4, 4, 4], &mut rng);
        let dy = Tensor::zeros(&[1, 4, 4, 4]);
        let (dx, dtheta) = lsa_vjp(&x, &theta, &cfg, BnMode::Batch, &dy).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        for sg in &dtheta.stages {
            assert!(sg.pw.data().iter().all(|&v| v == 0.0));
            if let Some(dw) = &sg.dw {
                assert!(dw.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn constant_field_collapses_to_static_conv_vjp() {
        // Zero predictor weights make the field constant (zero); dx must then
        // equal the apply-path gradient with that constant field.
        let cfg = cfg_k3(1);
        let mut rng = Rng::new(8);
        let mut theta = init_lsa_predictor::<f64>(4, &cfg, &mut rng, false, false).unwrap();
        for stage in &mut theta.stages {
            if let Some(dw) = &mut stage.dw {
                *dw = Tensor::zeros(dw.shape());
            }
            stage.pw = Tensor::zeros(stage.pw.shape());
        }
        let x = randn(&[1, 4, 4, 4], &mut rng);
        let dy = randn(&[1, 4, 4, 4], &mut rng);
        let (dx, _) = lsa_vjp(&x, &theta, &cfg, BnMode::Batch, &dy).unwrap();
        let field = lsa_predict(&x, &theta, &cfg, BnMode::Batch).unwrap();
        let (dx_apply, _) = lsa_apply_vjp(&x, &field, &cfg, &dy).unwrap();
        assert_eq!(dx, dx_apply);
    }

    #[test]
    fn stride_pooling_shapes() {
        let mut rng = Rng::new(9);
        let x = randn(&[1, 2, 5, 7], &mut rng);
        let pooled = avg_pool_by_stride(&x, 2).unwrap();
        assert_eq!(pooled.shape(), &[1, 2, 3, 4]);
        let x2 = randn(&[1, 2, 6, 6], &mut rng);
        let pooled2 = avg_pool_by_stride(&x2, 2).unwrap();
        assert_eq!(pooled2.shape(), &[1, 2, 3, 3]);
        assert_eq!(
            pooled2.at(&[0, 0, 0, 0]),
            (x2.at(&[0, 0, 0, 0]) + x2.at(&[0, 0, 0, 1]) + x2.at(&[0, 0, 1, 0]) + x2.at(&[0, 0, 1, 1]))
                / 4.0
        );
    }
}
