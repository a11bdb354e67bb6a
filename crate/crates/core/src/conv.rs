//! Static convolution: vanilla, depthwise, and pointwise, forward and VJP.
//!
//! The forward path lowers each `(sample, group)` slice to an im2col matrix
//! and multiplies. Column rows are ordered `(m, i, j)` with the within-group
//! input channel major, which makes the accumulation order per output element
//! identical to the direct-summation reference, so results agree bit for bit
//! in 64-bit mode.

use crate::error::{Error, Result};
use crate::offsets::KernelOffsets;
use crate::tensor::{matmul_abt_into, matmul_atb_into, matmul_into, pad_zero, Element, Tensor};
use rayon::prelude::*;

/// Static kernel + bias with stride, padding, and group count.
#[derive(Debug, Clone)]
pub struct ConvWeights<T: Element> {
    /// `[C_out, C_in/groups, k, k]`
    pub kernel: Tensor<T>,
    /// `[C_out]`
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Element> ConvWeights<T> {
    pub fn new(
        kernel: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if kernel.ndim() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv kernel must be 4-D, got {:?}",
                kernel.shape()
            )));
        }
        let k = kernel.shape()[2];
        if kernel.shape()[3] != k {
            return Err(Error::ShapeMismatch("non-square conv kernel".into()));
        }
        KernelOffsets::new(k)?; // odd k only
        if stride == 0 || groups == 0 {
            return Err(Error::Config("stride and groups must be >= 1".into()));
        }
        if kernel.shape()[0] % groups != 0 {
            return Err(Error::ShapeMismatch(format!(
                "C_out {} not divisible by groups {groups}",
                kernel.shape()[0]
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [kernel.shape()[0]] {
                return Err(Error::ShapeMismatch(format!(
                    "bias length {:?} vs C_out {}",
                    b.shape(),
                    kernel.shape()[0]
                )));
            }
        }
        Ok(ConvWeights {
            kernel,
            bias,
            stride,
            padding,
            groups,
        })
    }

    pub fn c_out(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.kernel.shape()[1] * self.groups
    }

    pub fn k(&self) -> usize {
        self.kernel.shape()[2]
    }
}

/// Output spatial extent: `floor((h + 2p - k)/s) + 1`; errors when the kernel
/// does not fit in the padded input.
pub fn conv_out_extent(h: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if h + 2 * padding < k {
        return Err(Error::ShapeMismatch(format!(
            "kernel {k} does not fit input extent {h} with padding {padding}"
        )));
    }
    Ok((h + 2 * padding - k) / stride + 1)
}

/// im2col over a padded single-sample, single-group slice.
///
/// Output is `[(c_in_g * k * k), ho * wo]`; row `(m*k + i)*k + j` holds the
/// tap at channel `m`, kernel offset `(i, j)`.
fn im2col<T: Element>(
    padded: &[T],
    hp: usize,
    wp: usize,
    c_in_g: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    debug_assert_eq!(col.len(), c_in_g * k * k * ho * wo);
    let hw = ho * wo;
    for m in 0..c_in_g {
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

/// Scatter-add the columns back into a padded gradient slice.
fn col2im<T: Element>(
    col: &[T],
    grad_padded: &mut [T],
    hp: usize,
    wp: usize,
    c_in_g: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) {
    let hw = ho * wo;
    for m in 0..c_in_g {
        let plane = &mut grad_padded[m * hp * wp..(m + 1) * hp * wp];
        for i in 0..k {
            for j in 0..k {
                let row = (m * k + i) * k + j;
                let src = &col[row * hw..(row + 1) * hw];
                for oh in 0..ho {
                    let dst = (oh * stride + i) * wp + j;
                    for ow in 0..wo {
                        plane[dst + ow * stride] = plane[dst + ow * stride] + src[oh * wo + ow];
                    }
                }
            }
        }
    }
}

/// Grouped 2-D convolution forward (im2col + matrix product).
pub fn conv2d_forward<T: Element>(x: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    let (bsz, c_in, h, wid) = x.dims4()?;
    if c_in != w.c_in() {
        return Err(Error::ShapeMismatch(format!(
            "input has {c_in} channels, weights expect {}",
            w.c_in()
        )));
    }
    if c_in % w.groups != 0 {
        return Err(Error::ShapeMismatch(format!(
            "C_in {c_in} not divisible by groups {}",
            w.groups
        )));
    }
    let k = w.k();
    let ho = conv_out_extent(h, k, w.stride, w.padding)?;
    let wo = conv_out_extent(wid, k, w.stride, w.padding)?;
    let padded = pad_zero(x, w.padding)?;
    let (hp, wp) = (h + 2 * w.padding, wid + 2 * w.padding);
    let c_in_g = c_in / w.groups;
    let c_out = w.c_out();
    let c_out_g = c_out / w.groups;
    let rows = c_in_g * k * k;
    let hw = ho * wo;

    let mut y = Tensor::zeros(&[bsz, c_out, ho, wo]);
    let kernel = w.kernel.data();
    let padded_data = padded.data();
    y.data_mut()
        .par_chunks_mut(c_out * hw)
        .enumerate()
        .for_each(|(b, y_b)| {
            let mut col = vec![T::zero(); rows * hw];
            for g in 0..w.groups {
                let slice =
                    &padded_data[(b * c_in + g * c_in_g) * hp * wp..(b * c_in + (g + 1) * c_in_g) * hp * wp];
                im2col(slice, hp, wp, c_in_g, k, w.stride, ho, wo, &mut col);
                let w_g = &kernel[g * c_out_g * rows..(g + 1) * c_out_g * rows];
                let out_g = &mut y_b[g * c_out_g * hw..(g + 1) * c_out_g * hw];
                matmul_into(w_g, &col, out_g, c_out_g, rows, hw);
            }
        });
    if let Some(bias) = &w.bias {
        let bd = bias.data();
        let yd = y.data_mut();
        for b in 0..bsz {
            for n in 0..c_out {
                let base = (b * c_out + n) * hw;
                let bv = bd[n];
                for v in &mut yd[base..base + hw] {
                    *v = *v + bv;
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel, and bias.
pub fn conv2d_vjp<T: Element>(
    x: &Tensor<T>,
    w: &ConvWeights<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (bsz, c_in, h, wid) = x.dims4()?;
    let k = w.k();
    let ho = conv_out_extent(h, k, w.stride, w.padding)?;
    let wo = conv_out_extent(wid, k, w.stride, w.padding)?;
    let c_out = w.c_out();
    if dy.shape() != [bsz, c_out, ho, wo] {
        return Err(Error::ShapeMismatch(format!(
            "dy shape {:?}, expected {:?}",
            dy.shape(),
            [bsz, c_out, ho, wo]
        )));
    }
    let padded = pad_zero(x, w.padding)?;
    let (hp, wp) = (h + 2 * w.padding, wid + 2 * w.padding);
    let c_in_g = c_in / w.groups;
    let c_out_g = c_out / w.groups;
    let rows = c_in_g * k * k;
    let hw = ho * wo;
    let kernel = w.kernel.data();
    let padded_data = padded.data();
    let dy_data = dy.data();

    // Per-sample padded input grads and per-sample kernel grads, combined in
    // ascending sample order so the result is thread-count independent.
    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..bsz)
        .into_par_iter()
        .map(|b| {
            let mut col = vec![T::zero(); rows * hw];
            let mut dcol = vec![T::zero(); rows * hw];
            let mut dpad = vec![T::zero(); c_in * hp * wp];
            let mut dkernel = vec![T::zero(); c_out * rows];
            for g in 0..w.groups {
                let slice = &padded_data
                    [(b * c_in + g * c_in_g) * hp * wp..(b * c_in + (g + 1) * c_in_g) * hp * wp];
                im2col(slice, hp, wp, c_in_g, k, w.stride, ho, wo, &mut col);
                let dy_g = &dy_data[(b * c_out + g * c_out_g) * hw..(b * c_out + (g + 1) * c_out_g) * hw];
                // dkernel_g += dy_g . col^T
                matmul_abt_into(
                    dy_g,
                    &col,
                    &mut dkernel[g * c_out_g * rows..(g + 1) * c_out_g * rows],
                    c_out_g,
                    hw,
                    rows,
                );
                // dcol = w_g^T . dy_g
                dcol.iter_mut().for_each(|v| *v = T::zero());
                let w_g = &kernel[g * c_out_g * rows..(g + 1) * c_out_g * rows];
                matmul_atb_into(w_g, dy_g, &mut dcol, c_out_g, rows, hw);
                col2im(
                    &dcol,
                    &mut dpad[g * c_in_g * hp * wp..(g + 1) * c_in_g * hp * wp],
                    hp,
                    wp,
                    c_in_g,
                    k,
                    w.stride,
                    ho,
                    wo,
                );
            }
            (dpad, dkernel)
        })
        .collect();

    let mut dkernel = Tensor::zeros(&[c_out, c_in_g, k, k]);
    for (_, dk_b) in &per_sample {
        let acc = dkernel.data_mut();
        for (a, &v) in acc.iter_mut().zip(dk_b.iter()) {
            *a = *a + v;
        }
    }

    let mut dx = Tensor::zeros(&[bsz, c_in, h, wid]);
    {
        let dxd = dx.data_mut();
        for (b, (dpad, _)) in per_sample.iter().enumerate() {
            for c in 0..c_in {
                for hi in 0..h {
                    let src = (c * hp + hi + w.padding) * wp + w.padding;
                    let dst = ((b * c_in + c) * h + hi) * wid;
                    for wi in 0..wid {
                        dxd[dst + wi] = dpad[src + wi];
                    }
                }
            }
        }
    }

    let dbias = w.bias.as_ref().map(|_| {
        let mut db = Tensor::zeros(&[c_out]);
        let dbd = db.data_mut();
        for b in 0..bsz {
            for n in 0..c_out {
                let base = (b * c_out + n) * hw;
                let mut acc = T::zero();
                for &v in &dy_data[base..base + hw] {
                    acc = acc + v;
                }
                dbd[n] = dbd[n] + acc;
            }
        }
        db
    });

    Ok((dx, dkernel, dbias))
}

/// Depthwise convolution: one k×k filter per channel (`groups = C_in = C_out`).
/// `kernel` has shape `[C, 1, k, k]`. Direct kernel, no im2col; accumulation
/// per element is `(i, j)` ascending, matching the grouped reference.
pub fn depthwise_forward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (bsz, c, h, wid) = x.dims4()?;
    if kernel.ndim() != 4 || kernel.shape()[0] != c || kernel.shape()[1] != 1 {
        return Err(Error::ShapeMismatch(format!(
            "depthwise kernel {:?} vs {c} channels",
            kernel.shape()
        )));
    }
    let k = kernel.shape()[2];
    KernelOffsets::new(k)?;
    let ho = conv_out_extent(h, k, stride, padding)?;
    let wo = conv_out_extent(wid, k, stride, padding)?;
    let padded = pad_zero(x, padding)?;
    let (hp, wp) = (h + 2 * padding, wid + 2 * padding);
    let mut y = Tensor::zeros(&[bsz, c, ho, wo]);
    let kd = kernel.data();
    let pd = padded.data();
    y.data_mut()
        .par_chunks_mut(ho * wo)
        .with_min_len(4)
        .enumerate()
        .for_each(|(bc, out_plane)| {
            let ci = bc % c;
            let plane = &pd[bc * hp * wp..(bc + 1) * hp * wp];
            let kern = &kd[ci * k * k..(ci + 1) * k * k];
            // Tap-major traversal; per-element accumulation order is still
            // (i, j) ascending.
            for i in 0..k {
                for j in 0..k {
                    let kv = kern[i * k + j];
                    for oh in 0..ho {
                        let in_row = (oh * stride + i) * wp + j;
                        let out_row = oh * wo;
                        if stride == 1 {
                            let src = &plane[in_row..in_row + wo];
                            let dst = &mut out_plane[out_row..out_row + wo];
                            for (o, &p) in dst.iter_mut().zip(src.iter()) {
                                *o = *o + p * kv;
                            }
                        } else {
                            for ow in 0..wo {
                                out_plane[out_row + ow] =
                                    out_plane[out_row + ow] + plane[in_row + ow * stride] * kv;
                            }
                        }
                    }
                }
            }
        });
    Ok(y)
}

/// Gradients of [`depthwise_forward`] with respect to input and kernel.
pub fn depthwise_vjp<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (bsz, c, h, wid) = x.dims4()?;
    let k = kernel.shape()[2];
    let ho = conv_out_extent(h, k, stride, padding)?;
    let wo = conv_out_extent(wid, k, stride, padding)?;
    if dy.shape() != [bsz, c, ho, wo] {
        return Err(Error::ShapeMismatch(format!(
            "depthwise dy {:?}, expected {:?}",
            dy.shape(),
            [bsz, c, ho, wo]
        )));
    }
    let padded = pad_zero(x, padding)?;
    let (hp, wp) = (h + 2 * padding, wid + 2 * padding);
    let kd = kernel.data();
    let pd = padded.data();
    let dyd = dy.data();

    let per_plane: Vec<(Vec<T>, Vec<T>)> = (0..bsz * c)
        .into_par_iter()
        .map(|bc| {
            let ci = bc % c;
            let plane = &pd[bc * hp * wp..(bc + 1) * hp * wp];
            let kern = &kd[ci * k * k..(ci + 1) * k * k];
            let dplane_out = &dyd[bc * ho * wo..(bc + 1) * ho * wo];
            let mut dpad = vec![T::zero(); hp * wp];
            let mut dk = vec![T::zero(); k * k];
            for i in 0..k {
                for j in 0..k {
                    let kv = kern[i * k + j];
                    let mut acc = T::zero();
                    for oh in 0..ho {
                        let in_row = (oh * stride + i) * wp + j;
                        let out_row = oh * wo;
                        for ow in 0..wo {
                            let g = dplane_out[out_row + ow];
                            dpad[in_row + ow * stride] = dpad[in_row + ow * stride] + kv * g;
                            acc = acc + plane[in_row + ow * stride] * g;
                        }
                    }
                    dk[i * k + j] = acc;
                }
            }
            (dpad, dk)
        })
        .collect();

    let mut dx = Tensor::zeros(&[bsz, c, h, wid]);
    let mut dkernel = Tensor::zeros(&[c, 1, k, k]);
    {
        let dxd = dx.data_mut();
        let dkd = dkernel.data_mut();
        for (bc, (dpad, dk)) in per_plane.iter().enumerate() {
            let ci = bc % c;
            for hi in 0..h {
                let src = (hi + padding) * wp + padding;
                let dst = (bc * h + hi) * wid;
                for wi in 0..wid {
                    dxd[dst + wi] = dpad[src + wi];
                }
            }
            for (a, &v) in dkd[ci * k * k..(ci + 1) * k * k].iter_mut().zip(dk.iter()) {
                *a = *a + v;
            }
        }
    }
    Ok((dx, dkernel))
}

/// Pointwise (1x1, groups=1) channel map: `weight [C_out, C_in]`, optional
/// stride subsampling. Runs as one matrix product per sample.
pub fn pointwise_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    let (bsz, c_in, h, wid) = x.dims4()?;
    if weight.ndim() != 2 || weight.shape()[1] != c_in {
        return Err(Error::ShapeMismatch(format!(
            "pointwise weight {:?} vs {c_in} input channels",
            weight.shape()
        )));
    }
    let c_out = weight.shape()[0];
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::ShapeMismatch("pointwise bias length".into()));
        }
    }
    let ho = conv_out_extent(h, 1, stride, 0)?;
    let wo = conv_out_extent(wid, 1, stride, 0)?;
    let hw = ho * wo;
    let sub = gather_strided(x, stride, ho, wo);
    let mut y = Tensor::zeros(&[bsz, c_out, ho, wo]);
    let wd = weight.data();
    y.data_mut()
        .par_chunks_mut(c_out * hw)
        .enumerate()
        .for_each(|(b, y_b)| {
            let x_b = &sub[b * c_in * hw..(b + 1) * c_in * hw];
            matmul_into(wd, x_b, y_b, c_out, c_in, hw);
        });
    if let Some(bias) = bias {
        let bd = bias.data();
        let yd = y.data_mut();
        for b in 0..bsz {
            for n in 0..c_out {
                let base = (b * c_out + n) * hw;
                for v in &mut yd[base..base + hw] {
                    *v = *v + bd[n];
                }
            }
        }
    }
    Ok(y)
}

fn gather_strided<'a, T: Element>(
    x: &'a Tensor<T>,
    stride: usize,
    ho: usize,
    wo: usize,
) -> std::borrow::Cow<'a, [T]> {
    let (bsz, c, _h, wid) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
    );
    if stride == 1 {
        return std::borrow::Cow::Borrowed(x.data());
    }
    let mut out = vec![T::zero(); bsz * c * ho * wo];
    let xd = x.data();
    for bc in 0..bsz * c {
        let plane = &xd[bc * x.shape()[2] * wid..];
        let dst = &mut out[bc * ho * wo..(bc + 1) * ho * wo];
        for oh in 0..ho {
            for ow in 0..wo {
                dst[oh * wo + ow] = plane[oh * stride * wid + ow * stride];
            }
        }
    }
    std::borrow::Cow::Owned(out)
}

/// Gradients of [`pointwise_forward`].
pub fn pointwise_vjp<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (bsz, c_in, h, wid) = x.dims4()?;
    let c_out = weight.shape()[0];
    let ho = conv_out_extent(h, 1, stride, 0)?;
    let wo = conv_out_extent(wid, 1, stride, 0)?;
    let hw = ho * wo;
    if dy.shape() != [bsz, c_out, ho, wo] {
        return Err(Error::ShapeMismatch(format!(
            "pointwise dy {:?}, expected {:?}",
            dy.shape(),
            [bsz, c_out, ho, wo]
        )));
    }
    let sub = gather_strided(x, stride, ho, wo);
    let wd = weight.data();
    let dyd = dy.data();

    let mut dweight = Tensor::zeros(&[c_out, c_in]);
    let mut dsub = vec![T::zero(); bsz * c_in * hw];
    // dsub_b = W^T dy_b (parallel over samples); dW accumulated sample-ascending.
    dsub.par_chunks_mut(c_in * hw)
        .enumerate()
        .for_each(|(b, dsub_b)| {
            let dy_b = &dyd[b * c_out * hw..(b + 1) * c_out * hw];
            matmul_atb_into(wd, dy_b, dsub_b, c_out, c_in, hw);
        });
    for b in 0..bsz {
        let dy_b = &dyd[b * c_out * hw..(b + 1) * c_out * hw];
        let x_b = &sub[b * c_in * hw..(b + 1) * c_in * hw];
        matmul_abt_into(dy_b, x_b, dweight.data_mut(), c_out, hw, c_in);
    }

    let mut dx = Tensor::zeros(&[bsz, c_in, h, wid]);
    {
        let dxd = dx.data_mut();
        if stride == 1 {
            dxd.copy_from_slice(&dsub);
        } else {
            for bc in 0..bsz * c_in {
                let src = &dsub[bc * hw..(bc + 1) * hw];
                let dst = &mut dxd[bc * h * wid..(bc + 1) * h * wid];
                for oh in 0..ho {
                    for ow in 0..wo {
                        dst[oh * stride * wid + ow * stride] = src[oh * wo + ow];
                    }
                }
            }
        }
    }

    let dbias = if has_bias {
        let mut db = Tensor::zeros(&[c_out]);
        let dbd = db.data_mut();
        for b in 0..bsz {
            for n in 0..c_out {
                let base = (b * c_out + n) * hw;
                let mut acc = T::zero();
                for &v in &dyd[base..base + hw] {
                    acc = acc + v;
                }
                dbd[n] = dbd[n] + acc;
            }
        }
        Some(db)
    } else {
        None
    };

    Ok((dx, dweight, dbias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::rng::Rng;
    use crate::verify::{rel_err, vjp_matches_fd_conv};

    fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.next_standard_normal())
    }

    #[test]
    fn conv_sum_window() {
        // 3x3 input 1..9 with an all-ones 3x3 kernel, same padding.
        let x = Tensor::new(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let w = ConvWeights::new(Tensor::full(&[1, 1, 3, 3], 1.0), None, 1, 1, 1).unwrap();
        let y = conv2d_forward(&x, &w).unwrap();
        assert_eq!(y.at(&[0, 0, 1, 1]), 45.0);
        assert_eq!(y.at(&[0, 0, 0, 0]), 12.0);
    }

    #[test]
    fn conv_1x1_identity() {
        let mut rng = Rng::new(1);
        let x = randn(&[2, 3, 4, 4], &mut rng);
        let mut kernel = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            kernel.set(&[c, c, 0, 0], 1.0);
        }
        let w = ConvWeights::new(kernel, None, 1, 0, 1).unwrap();
        let y = conv2d_forward(&x, &w).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn conv_matches_oracle_exactly() {
        let mut rng = Rng::new(2);
        let x = randn(&[2, 3, 5, 5], &mut rng);
        let kernel = randn(&[4, 3, 3, 3], &mut rng);
        let bias = randn(&[4], &mut rng);
        let w = ConvWeights::new(kernel.clone(), Some(bias.clone()), 1, 1, 1).unwrap();
        let fast = conv2d_forward(&x, &w).unwrap();
        let reference = oracle::conv2d_oracle(&x, &kernel, Some(&bias), 1, 1, 1);
        assert_eq!(fast.shape(), reference.shape());
        for (a, b) in fast.data().iter().zip(reference.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn conv_grouped_and_strided_matches_oracle() {
        let mut rng = Rng::new(3);
        for &(groups, stride, pad) in &[(2usize, 1usize, 1usize), (1, 2, 1), (3, 2, 0)] {
            let c_in = 6;
            let c_out = 6;
            let x = randn(&[2, c_in, 7, 6], &mut rng);
            let kernel = randn(&[c_out, c_in / groups, 3, 3], &mut rng);
            let w = ConvWeights::new(kernel.clone(), None, stride, pad, groups).unwrap();
            let fast = conv2d_forward(&x, &w).unwrap();
            let reference = oracle::conv2d_oracle(&x, &kernel, None, stride, pad, groups);
            assert_eq!(fast, reference, "groups={groups} stride={stride} pad={pad}");
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = ConvWeights::new(Tensor::zeros(&[2, 4, 3, 3]), None, 1, 1, 1).unwrap();
        assert!(conv2d_forward(&x, &w).is_err());
        // Kernel larger than padded input.
        let w2 = ConvWeights::new(Tensor::zeros(&[2, 3, 7, 7]), None, 1, 0, 1).unwrap();
        assert!(conv2d_forward(&x, &w2).is_err());
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(ConvWeights::new(Tensor::<f64>::zeros(&[2, 3, 2, 2]), None, 1, 0, 1).is_err());
    }

    #[test]
    fn vjp_zero_dy_gives_zero_grads() {
        let mut rng = Rng::new(4);
        let x = randn(&[1, 2, 4, 4], &mut rng);
        let w = ConvWeights::new(randn(&[3, 2, 3, 3], &mut rng), Some(randn(&[3], &mut rng)), 1, 1, 1)
            .unwrap();
        let dy = Tensor::zeros(&[1, 3, 4, 4]);
        let (dx, dk, db) = conv2d_vjp(&x, &w, &dy).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dk.data().iter().all(|&v| v == 0.0));
        assert!(db.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vjp_identity_kernel_chain_rule() {
        // k=1 identity kernel: dx = dy and dW[0,0] = sum(x * dy).
        let mut rng = Rng::new(5);
        let x = randn(&[1, 1, 3, 3], &mut rng);
        let w = ConvWeights::new(Tensor::full(&[1, 1, 1, 1], 1.0), None, 1, 0, 1).unwrap();
        let dy = randn(&[1, 1, 3, 3], &mut rng);
        let (dx, dk, _) = conv2d_vjp(&x, &w, &dy).unwrap();
        assert_eq!(dx, dy);
        let expect: f64 = x.data().iter().zip(dy.data().iter()).map(|(a, b)| a * b).sum();
        assert!((dk.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        vjp_matches_fd_conv(11, 1e-6);
    }

    #[test]
    fn depthwise_window_count() {
        let x = Tensor::full(&[1, 1, 4, 4], 1.0f64);
        let kernel = Tensor::full(&[1, 1, 3, 3], 1.0f64);
        let y = depthwise_forward(&x, &kernel, 1, 1).unwrap();
        assert_eq!(y.at(&[0, 0, 1, 1]), 9.0); // interior
        assert_eq!(y.at(&[0, 0, 0, 0]), 4.0); // corner
    }

    #[test]
    fn pointwise_identity() {
        let mut rng = Rng::new(6);
        let x = randn(&[2, 3, 4, 4], &mut rng);
        let mut eye = Tensor::zeros(&[3, 3]);
        for c in 0..3 {
            eye.set(&[c, c], 1.0);
        }
        let y = pointwise_forward(&x, &eye, None, 1).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn depthwise_matches_grouped_conv_oracle() {
        let mut rng = Rng::new(7);
        let x = randn(&[2, 4, 5, 6], &mut rng);
        let kernel = randn(&[4, 1, 3, 3], &mut rng);
        for stride in [1, 2] {
            let fast = depthwise_forward(&x, &kernel, stride, 1).unwrap();
            let reference = oracle::conv2d_oracle(&x, &kernel, None, stride, 1, 4);
            assert_eq!(fast, reference);
        }
    }

    #[test]
    fn pointwise_matches_conv_oracle() {
        let mut rng = Rng::new(8);
        let x = randn(&[2, 3, 5, 5], &mut rng);
        let weight = randn(&[4, 3], &mut rng);
        let bias = randn(&[4], &mut rng);
        let kernel4 = weight.clone().reshape(&[4, 3, 1, 1]).unwrap();
        for stride in [1, 2] {
            let fast = pointwise_forward(&x, &weight, Some(&bias), stride).unwrap();
            let reference = oracle::conv2d_oracle(&x, &kernel4, Some(&bias), stride, 0, 1);
            assert_eq!(fast, reference);
        }
    }

    #[test]
    fn translation_equivariance_interior() {
        // Shift the input one pixel down-right; the valid interior of the
        // output shifts identically (stride 1).
        let mut rng = Rng::new(9);
        let x = randn(&[1, 2, 6, 6], &mut rng);
        let kernel = randn(&[3, 2, 3, 3], &mut rng);
        let w = ConvWeights::new(kernel, None, 1, 1, 1).unwrap();
        let mut shifted = Tensor::zeros(&[1, 2, 6, 6]);
        for c in 0..2 {
            for h in 0..5 {
                for wdx in 0..5 {
                    let v = x.at(&[0, c, h, wdx]);
                    shifted.set(&[0, c, h + 1, wdx + 1], v);
                }
            }
        }
        let y = conv2d_forward(&x, &w).unwrap();
        let ys = conv2d_forward(&shifted, &w).unwrap();
        // Interior avoids both borders plus the kernel radius.
        for n in 0..3 {
            for h in 2..5 {
                for wdx in 2..5 {
                    assert_eq!(ys.at(&[0, n, h, wdx]), y.at(&[0, n, h - 1, wdx - 1]));
                }
            }
        }
    }

    #[test]
    fn linearity_in_input_and_weights() {
        let mut rng = Rng::new(10);
        let x1 = randn(&[1, 2, 4, 4], &mut rng);
        let x2 = randn(&[1, 2, 4, 4], &mut rng);
        let kernel = randn(&[2, 2, 3, 3], &mut rng);
        let w = ConvWeights::new(kernel.clone(), None, 1, 1, 1).unwrap();
        let (a, b) = (0.7, -1.3);
        let combo = x1.scale(a).add(&x2.scale(b)).unwrap();
        let y_combo = conv2d_forward(&combo, &w).unwrap();
        let y1 = conv2d_forward(&x1, &w).unwrap();
        let y2 = conv2d_forward(&x2, &w).unwrap();
        let expect = y1.scale(a).add(&y2.scale(b)).unwrap();
        for (u, v) in y_combo.data().iter().zip(expect.data().iter()) {
            assert!(rel_err(*u, *v) <= 1e-12);
        }
        // Linearity in the kernel.
        let k2 = randn(&[2, 2, 3, 3], &mut rng);
        let wk = ConvWeights::new(kernel.scale(a).add(&k2.scale(b)).unwrap(), None, 1, 1, 1).unwrap();
        let w2 = ConvWeights::new(k2, None, 1, 1, 1).unwrap();
        let lhs = conv2d_forward(&x1, &wk).unwrap();
        let rhs = conv2d_forward(&x1, &w)
            .unwrap()
            .scale(a)
            .add(&conv2d_forward(&x1, &w2).unwrap().scale(b))
            .unwrap();
        for (u, v) in lhs.data().iter().zip(rhs.data().iter()) {
            assert!(rel_err(*u, *v) <= 1e-12);
        }
    }
}
