//! Layer implementations for the reverse-mode graph.

use super::{Cache, Layer, LayerCost, Param, ParamMutRef, Phase};
use crate::conv::{
    conv2d_forward, conv2d_vjp, conv_out_extent, depthwise_forward, depthwise_vjp,
    pointwise_forward, pointwise_vjp, ConvWeights,
};
use crate::dynamic::dcdc::{dcdc_forward_cached, dcdc_vjp_cached};
use crate::dynamic::gsi::{gsi_forward_cached, gsi_vjp_cached, GsiConfig, GsiGrads, GsiWeights};
use crate::dynamic::lsa::{
    lsa_forward_cached, lsa_vjp_cached, LsaConfig, LsaPredictorGrads, LsaPredictorWeights,
};
use crate::error::{Error, Result};
use crate::norm::{self, BnMode};
use crate::tensor::{global_avg_pool, matmul_abt_into, matmul_atb_into, matmul_into, Element, Tensor};

fn expect_one<'a, T: Element>(inputs: &[&'a Tensor<T>]) -> Result<&'a Tensor<T>> {
    if inputs.len() != 1 {
        return Err(Error::Graph(format!("expected 1 input, got {}", inputs.len())));
    }
    Ok(inputs[0])
}

/// Identity placeholder occupying node 0.
pub struct InputLayer;

impl<T: Element> Layer<T> for InputLayer {
    fn kind(&self) -> &'static str {
        "input"
    }

    fn forward(&self, inputs: &[&Tensor<T>], _phase: Phase) -> Result<(Tensor<T>, Cache<T>)> {
        Ok((expect_one(inputs)?.clone(), Cache::None))
    }

    fn vjp(
        &self,
        _inputs: &[&Tensor<T>],
        _cache: &Cache<T>,
        dy: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        Ok((vec![dy.clone()], vec![]))
    }

    fn out_shape(&self, in_shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
        Ok(in_shapes[0].clone())
    }
}

/// Static grouped convolution.
pub struct ConvLayer<T: Element> {
    pub w: ConvWeights<T>,
}

impl<T: Element> Layer<T> for ConvLayer<T> {
    fn kind(&self) -> &'static str {
        "conv"
    }

    fn forward(&self, inputs: &[&Tensor<T>], _phase: Phase) -> Result<(Tensor<T>, Cache<T>)> {
        Ok((conv2d_forward(expect_one(inputs)?, &self.w)?, Cache::None))
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        _cache: &Cache<T>,
        dy: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let (dx, dk, db) = conv2d_vjp(expect_one(inputs)?, &self.w, dy)?;
        let mut grads = vec![dk];
        if let Some(db) = db {
            grads.push(db);
        }
        Ok((vec![dx], grads))
    }

    fn params(&self) -> Vec<Param<'_, T>> {
        let mut out = vec![Param {
            name: "weight".into(),
            tensor: &self.w.kernel,
            decay: true,
        }];
        if let Some(b) = &self.w.bias {
            out.push(Param {
                name: "bias".into(),
                tensor: b,
                decay: true,
            });
        }
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMutRef<'_, T>> {
        let mut out = vec![ParamMutRef {
            name: "weight".into(),
            tensor: &mut self.w.kernel,
            decay: true,
        }];
        if let Some(b) = &mut self.w.bias {
            out.push(ParamMutRef {
                name: "bias".into(),
                tensor: b,
                decay: true,
            });
        }
        out
    }

    fn out_shape(&self, in_shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
        let s = &in_shapes[0];
        let ho = conv_out_extent(s[2], self.w.k(), self.w.stride, self.w.padding)?;
        let wo = conv_out_extent(s[3], self.w.k(), self.w.stride, self.w.padding)?;
        Ok(vec![s[0], self.w.c_out(), ho, wo])
    }

    fn cost(&self, in_shapes: &[Vec<usize>]) -> Result<LayerCost> {
        let s = &in_shapes[0];
        let ho = conv_out_extent(s[2], self.w.k(), self.w.stride, self.w.padding)?;
        let wo = conv_out_extent(s[3], self.w.k(), self.w.stride, self.w.padding)?;
        let k = self.w.k();
        let macs =
            (self.w.c_out() * (self.w.c_in() / self.w.groups) * k * k * ho * wo) as u64;
        Ok(LayerCost {
            spatial_macs: macs,
            fixed_macs: 0,
        })
    }
}

/// One k×k filter per channel.
pub struct DepthwiseLayer<T: Element> {
    pub kernel: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> Layer<T> for DepthwiseLayer<T> {
    fn kind(&self) -> &'static str {
        "depthwise"
    }

    fn forward(&self, inputs: &[&Tensor<T>], _phase: Phase) -> Result<(Tensor<T>, Cache<T>)> {
        Ok((
            depthwise_forward(expect_one(inputs)?, &self.kernel, self.stride, self.padding)?,
            Cache::None,
        ))
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        _cache: &Cache<T>,
        dy: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let (dx, dk) =
            depthwise_vjp(expect_one(inputs)?, &self.kernel, self.stride, self.padding, dy)?;
        Ok((vec![dx], vec![dk]))
    }

    fn params(&self) -> Vec<Param<'_, T>> {
        vec![Param {
            name: "weight".into(),
            tensor: &self.kernel,
            decay: true,
        }]
    }

    fn params_mut(&mut self) -> Vec<ParamMutRef<'_, T>> {
        vec![ParamMutRef {
            name: "weight".into(),
            tensor: &mut self.kernel,
            decay: true,
        }]
    }

    fn out_shape(&self, in_shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
        let s = &in_shapes[0];
        let k = self.kernel.shape()[2];
        let ho = conv_out_extent(s[2], k, self.stride, self.padding)?;
        let wo = conv_out_extent(s[3], k, self.stride, self.padding)?;
        Ok(vec![s[0], s[1], ho, wo])
    }

    fn cost(&self, in_shapes: &[Vec<usize>]) -> Result<LayerCost> {
        let s = &in_shapes[0];
        let k = self.kernel.shape()[2];
        let ho = conv_out_extent(s[2], k, self.stride, self.padding)?;
        let wo = conv_out_extent(s[3], k, self.stride, self.padding)?;
        Ok(LayerCost {
            spatial_macs: (s[1] * k * k * ho * wo) as u64,
            fixed_macs: 0,
        })
    }
}

/// 1×1 channel map.
pub struct PointwiseLayer<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
}

impl<T: Element> Layer<T> for PointwiseLayer<T> {
    fn kind(&self) -> &'static str {
        "pointwise"
    }

    fn forward(&self, inputs: &[&Tensor<T>], _phase: Phase) -> Result<(Tensor<T>, Cache<T>)> {
        Ok((
            pointwise_forward(expect_one(inputs)?, &self.weight, self.bias.as_ref(), self.stride)?,
            Cache::None,
        ))
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        _cache: &Cache<T>,
        dy: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let (dx, dw, db) = pointwise_vjp(
            expect_one(inputs)?,
            &self.weight,
            self.bias.is_some(),
            self.stride,
            dy,
        )?;
        let mut grads = vec![dw];
        if let Some(db) = db {
            grads.push(db);
        }
        Ok((vec![dx], grads))
    }

    fn params(&self) -> Vec<Param<'_, T>> {
        let mut out = vec![Param {
            name: "weight".into(),
            tensor: &self.weight,
            decay: true,
        }];
        if let Some(b) = &self.bias {
            out.push(Param {
                name: "bias".into(),
                tensor: b,
                decay: true,
            });
        }
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMutRef<'_, T>> {
        let mut out = vec![ParamMutRef {
            name: "weight".into(),
            tensor: &mut self.weight,
            decay: true,
        }];
        if let Some(b) = &mut self.bias {
            out.push(ParamMutRef {
                name: "bias".into(),
                tensor: b,
                decay: true,
            });
        }
        out
    }

    fn out_shape(&self, in_shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
        let s = &in_shapes[0];
        let ho = conv_out_extent(s[2], 1, self.stride, 0)?;
        let wo = conv_out_extent(s[3], 1, self.stride, 0)?;
        Ok(vec![s[0], self.weight.shape()[0], ho, wo])
    }

    fn cost(&self, in_shapes: &[Vec<usize>]) -> Result<LayerCost> {
        let s = &in_shapes[0];
        let ho = conv_out_extent(s[2], 1, self.stride, 0)?;
        let wo = conv_out_extent(s[3], 1, self.stride, 0)?;
        Ok(LayerCost {
            spatial_macs: (self.weight.shape()[0] * s[1] * ho * wo) as u64,
            fixed_macs: 0,
        })
    }
}

/// Per-channel batch normalisation with running statistics.
pub struct BatchNormLayer<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Element> BatchNormLayer<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

impl<T: Element> Layer<T> for BatchNormLayer<T> {
    fn kind(&self) -> &'static str {
        "batchnorm"
    }

    fn forward(&self, inputs: &[&Tensor<T>], phase: Phase) -> Result<(Tensor<T>, Cache<T>)> {
        let x = expect_one(inputs)?;
        match phase {
            Phase::Train => {
                let (y, cache) = norm::forward_batch(x, &self.gamma, &self.beta, self.eps)?;
                Ok((y, Cache::Bn(cache)))
            }
            Phase::Eval => {
                let y = norm::forward_running(
                    x,
                    &self.gamma,
                    &self.beta,
                    &self.running_mean,
                    &self.running_var,
                    self.eps,
                )?;
                Ok((y, Cache::None))
            }
        }
    }

    fn update_state(&mut self, cache: &Cache<T>) {
        if let Cache::Bn(c) = cache {
            norm::update_running(&mut self.running_mean, &mut self.running_var, c, self.momentum);
        }
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        cache: &Cache<T>,
        dy: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let x = expect_one(inputs)?;
        let (dx, dgamma, dbeta) = match cache {
            Cache::Bn(c) => norm::vjp_batch(x, &self.gamma, c, dy)?,
            _ => norm::vjp_running(
                x,
                &self.gamma,
                &self.running_mean,
                &self.running_var,
                self.eps,
                dy,
            )?,
        };
        Ok((vec![dx], vec![dgamma, dbeta]))
    }

    fn params(&self) -> Vec<Param<'_, T>> {
        vec![
            Param {
                name: "gamma".into(),
                tensor: &self.gamma,
                decay: false,
            },
            Param {
                name: "beta".into(),
                tensor: &self.beta,
                decay: false,
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMutRef<'_, T>> {
        vec![
            ParamMutRef {
                name: "gamma".into(),
                tensor: &mut self.gamma,
                decay: false,
            },
            ParamMutRef {
                name: "beta".into(),
                tensor: &mut self.beta,
                decay: false,
            },
        ]
    }

    fn buffers(&self) -> Vec<Param<'_, T>> {
        vec![
            Param {
                name: "running_mean".into(),
                tensor: &self.running_mean,
                decay: false,
            },
            Param {
                name: "running_var".into(),
                tensor: &self.running_var,
                decay: false,
            },
        ]
    }

    fn buffers_mut(&mut self) -> Vec<ParamMutRef<'_, T>> {
        vec![
            ParamMutRef {
                name: "running_mean".into(),
                tensor: &mut self.running_mean,
                decay: false,
            },
            ParamMutRef {
                name: "running_var".into(),
                tensor: &mut self.running_var,
                decay: false,
            },
        ]
    }

    fn out_shape(&self, in_shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
        Ok(in_shapes[0].clone())
    }
}

pub struct ReluLayer;

impl<T: Element> Layer<T> for ReluLayer {
    fn kind(&self) -> &'static str {
        "relu"
    }

    fn forward(&self, inputs: &[&Tensor<T>], _phase: Phase) -> Result<(Tensor<T>, Cache<T>)> {
        let x = expect_one(inputs)?;
        Ok((
            x.map(|v| if v > T::zero() { v } else { T::zero() }),
            Cache::None,
        ))
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        _cache: &Cache<T>,
        dy: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let x = expect_one(inputs)?;
        let mut dx = dy.clone();
        for (d, &v) in dx.data_mut().iter_mut().zip(x.data().iter()) {
            if v <= T::zero() {
                *d = T::zero();
            }
        }
        Ok((vec![dx], vec![]))
    }

    fn out_shape(&self, in_shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
        Ok(in_shapes[0].clone())
    }
}

/// Elementwise sum of two parents (residual join).
pub struct AddLayer;

impl<T: Element> Layer<T> for AddLayer {
    fn kind(&self) -> &'static str {
        "add"
    }

    fn forward(&self, inputs: &[&Tensor<T>], _phase: Phase) -> Result<(Tensor<T>, Cache<T>)> {
        if inputs.len() != 2 {
            return Err(Error::Graph("add expects 2 inputs".into()));
        }
        Ok((inputs[0].add(inputs[1])?, Cache::None))
    }

    fn vjp(
        &self,
        _inputs: &[&Tensor<T>],
        _cache: &Cache<T>,
        dy: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        Ok((vec![dy.clone(), dy.clone()], vec![]))
    }

    fn out_shape(&self, in_shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
        if in_shapes[0] != in_shapes[1] {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                in_shapes[0], in_shapes[1]
            )));
        }
        Ok(in_shapes[0].clone())
    }
}

/// Max pooling (ties break to the first maximum in scan order).
pub struct MaxPoolLayer {
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> Layer<T> for MaxPoolLayer {
    fn kind(&self) -> &'static str {
        "maxpool"
    }

    fn forward(&self, inputs: &[&Tensor<T>], _phase: Phase) -> Result<(Tensor<T>, Cache<T>)> {
        let x = expect_one(inputs)?;
        let (b, c, h, w) = x.dims4()?;
        let ho = conv_out_extent(h, self.k, self.stride, self.padding)?;
        let wo = conv_out_extent(w, self.k, self.stride, self.padding)?;
        let mut y = Tensor::zeros(&[b, c, ho, wo]);
        let mut argmax = vec![0usize; b * c * ho * wo];
        let xd = x.data();
        let yd = y.data_mut();
        for bc in 0..b * c {
            let plane = &xd[bc * h * w..(bc + 1) * h * w];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for i in 0..self.k {
                        let row = (oh * self.stride + i) as isize - self.padding as isize;
                        if row < 0 || row >= h as isize {
                            continue;
                        }
                        for j in 0..self.k {
                            let col = (ow * self.stride + j) as isize - self.padding as isize;
                            if col < 0 || col >= w as isize {
                                continue;
                            }
                            let idx = row as usize * w + col as usize;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = bc * ho * wo + oh * wo + ow;
                    yd[o] = best;
                    argmax[o] = bc * h * w + best_idx;
                }
            }
        }
        Ok((y, Cache::Indices(argmax)))
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        cache: &Cache<T>,
        dy: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let x = expect_one(inputs)?;
        let argmax = match cache {
            Cache::Indices(v) => v,
            _ => return Err(Error::Graph("maxpool vjp without index cache".into())),
        };
        let mut dx = Tensor::zeros(x.shape());
        let dxd = dx.data_mut();
        for (o, &src) in argmax.iter().enumerate() {
            dxd[src] = dxd[src] + dy.data()[o];
        }
        Ok((vec![dx], vec![]))
    }

    fn out_shape(&self, in_shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
        let s = &in_shapes[0];
        let ho = conv_out_extent(s[2], self.k, self.stride, self.padding)?;
        let wo = conv_out_extent(s[3], self.k, self.stride, self.padding)?;
        Ok(vec![s[0], s[1], ho, wo])
    }
}

/// Global average pooling to `[B, C, 1, 1]`.
pub struct GlobalPoolLayer;

impl<T: Element> Layer<T> for GlobalPoolLayer {
    fn kind(&self) -> &'static str {
        "global-pool"
    }

    fn forward(&self, inputs: &[&Tensor<T>], _phase: Phase) -> Result<(Tensor<T>, Cache<T>)> {
        Ok((global_avg_pool(expect_one(inputs)?)?, Cache::None))
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        _cache: &Cache<T>,
        dy: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let x = expect_one(inputs)?;
        let (b, c, h, w) = x.dims4()?;
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let mut dx = Tensor::zeros(x.shape());
        let dxd = dx.data_mut();
        for bc in 0..b * c {
            let g = dy.data()[bc] * inv;
            for v in &mut dxd[bc * h * w..(bc + 1) * h * w] {
                *v = g;
            }
        }
        Ok((vec![dx], vec![]))
    }

    fn out_shape(&self, in_shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
        let s = &in_shapes[0];
        Ok(vec![s[0], s[1], 1, 1])
    }

    fn cost(&self, in_shapes: &[Vec<usize>]) -> Result<LayerCost> {
        let s = &in_shapes[0];
        Ok(LayerCost {
            spatial_macs: (s[1] * s[2] * s[3]) as u64,
            fixed_macs: 0,
        })
    }
}

/// Fully connected classifier head: accepts `[B, C]` or `[B, C, 1, 1]`.
pub struct LinearLayer<T: Element> {
    pub weight: Tensor<T>, // [K, C]
    pub bias: Tensor<T>,   // [K]
}

fn flatten_2d<T: Element>(x: &Tensor<T>) -> Result<(usize, usize)> {
    let s = x.shape();
    match s.len() {
        2 => Ok((s[0], s[1])),
        4 if s[2] == 1 && s[3] == 1 => Ok((s[0], s[1])),
        _ => Err(Error::ShapeMismatch(format!(
            "linear expects [B, C] or [B, C, 1, 1], got {s:?}"
        ))),
    }
}

impl<T: Element> Layer<T> for LinearLayer<T> {
    fn kind(&self) -> &'static str {
        "linear"
    }

    fn forward(&self, inputs: &[&Tensor<T>], _phase: Phase) -> Result<(Tensor<T>, Cache<T>)> {
        let x = expect_one(inputs)?;
        let (b, c) = flatten_2d(x)?;
        if c != self.weight.shape()[1] {
            return Err(Error::ShapeMismatch(format!(
                "linear weight {:?} vs {c} features",
                self.weight.shape()
            )));
        }
        let k = self.weight.shape()[0];
        let mut y = Tensor::zeros(&[b, k]);
        matmul_abt_into(x.data(), self.weight.data(), y.data_mut(), b, c, k);
        let yd = y.data_mut();
        for bi in 0..b {
            for ki in 0..k {
                yd[bi * k + ki] = yd[bi * k + ki] + self.bias.data()[ki];
            }
        }
        Ok((y, Cache::None))
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        _cache: &Cache<T>,
        dy: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let x = expect_one(inputs)?;
        let (b, c) = flatten_2d(x)?;
        let k = self.weight.shape()[0];
        // dx = dy . W
        let mut dx_flat = vec![T::zero(); b * c];
        matmul_into(dy.data(), self.weight.data(), &mut dx_flat, b, k, c);
        let dx = Tensor::new(x.shape(), dx_flat)?;
        // dW = dy^T . x
        let mut dw = Tensor::zeros(&[k, c]);
        matmul_atb_into(dy.data(), x.data(), dw.data_mut(), b, k, c);
        let mut db = Tensor::zeros(&[k]);
        for bi in 0..b {
            for ki in 0..k {
                db.data_mut()[ki] = db.data_mut()[ki] + dy.data()[bi * k + ki];
            }
        }
        Ok((vec![dx], vec![dw, db]))
    }

    fn params(&self) -> Vec<Param<'_, T>> {
        vec![
            Param {
                name: "weight".into(),
                tensor: &self.weight,
                decay: true,
            },
            Param {
                name: "bias".into(),
                tensor: &self.bias,
                decay: true,
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMutRef<'_, T>> {
        vec![
            ParamMutRef {
                name: "weight".into(),
                tensor: &mut self.weight,
                decay: true,
            },
            ParamMutRef {
                name: "bias".into(),
                tensor: &mut self.bias,
                decay: true,
            },
        ]
    }

    fn out_shape(&self, in_shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
        let s = &in_shapes[0];
        Ok(vec![s[0], self.weight.shape()[0]])
    }

    fn cost(&self, _in_shapes: &[Vec<usize>]) -> Result<LayerCost> {
        Ok(LayerCost {
            spatial_macs: 0,
            fixed_macs: (self.weight.shape()[0] * self.weight.shape()[1]) as u64,
        })
    }
}

fn phase_mode(phase: Phase) -> BnMode {
    match phase {
        Phase::Train => BnMode::Batch,
        Phase::Eval => BnMode::Running,
    }
}

fn lsa_params<'a, T: Element>(theta: &'a LsaPredictorWeights<T>, prefix: &str) -> Vec<Param<'a, T>> {
    let mut out = Vec::new();
    for (i, stage) in theta.stages.iter().enumerate() {
        let n = i + 1;
        if let Some(dw) = &stage.dw {
            out.push(Param {
                name: format!("{prefix}dw{n}.weight"),
                tensor: dw,
                decay: true,
            });
        }
        out.push(Param {
            name: format!("{prefix}pw{n}.weight"),
            tensor: &stage.pw,
            decay: true,
        });
        if let Some(bn) = &stage.bn {
            out.push(Param {
                name: format!("{prefix}bn{n}.gamma"),
                tensor: &bn.gamma,
                decay: false,
            });
            out.push(Param {
                name: format!("{prefix}bn{n}.beta"),
                tensor: &bn.beta,
                decay: false,
            });
        }
    }
    out
}

fn lsa_params_mut<'a, T: Element>(
    theta: &'a mut LsaPredictorWeights<T>,
    prefix: &str,
) -> Vec<ParamMutRef<'a, T>> {
    let mut out = Vec::new();
    for (i, stage) in theta.stages.iter_mut().enumerate() {
        let n = i + 1;
        if let Some(dw) = &mut stage.dw {
            out.push(ParamMutRef {
                name: format!("{prefix}dw{n}.weight"),
                tensor: dw,
                decay: true,
            });
        }
        out.push(ParamMutRef {
            name: format!("{prefix}pw{n}.weight"),
            tensor: &mut stage.pw,
            decay: true,
        });
        if let Some(bn) = &mut stage.bn {
            out.push(ParamMutRef {
                name: format!("{prefix}bn{n}.gamma"),
                tensor: &mut bn.gamma,
                decay: false,
            });
            out.push(ParamMutRef {
                name: format!("{prefix}bn{n}.beta"),
                tensor: &mut bn.beta,
                decay: false,
            });
        }
    }
    out
}

fn lsa_buffers<'a, T: Element>(theta: &'a LsaPredictorWeights<T>, prefix: &str) -> Vec<Param<'a, T>> {
    let mut out = Vec::new();
    for (i, stage) in theta.stages.iter().enumerate() {
        if let Some(bn) = &stage.bn {
            let n = i + 1;
            out.push(Param {
                name: format!("{prefix}bn{n}.running_mean"),
                tensor: &bn.running_mean,
                decay: false,
            });
            out.push(Param {
                name: format!("{prefix}bn{n}.running_var"),
                tensor: &bn.running_var,
                decay: false,
            });
        }
    }
    out
}

fn lsa_buffers_mut<'a, T: Element>(
    theta: &'a mut LsaPredictorWeights<T>,
    prefix: &str,
) -> Vec<ParamMutRef<'a, T>> {
    let mut out = Vec::new();
    for (i, stage) in theta.stages.iter_mut().enumerate() {
        if let Some(bn) = &mut stage.bn {
            let n = i + 1;
            out.push(ParamMutRef {
                name: format!("{prefix}bn{n}.running_mean"),
                tensor: &mut bn.running_mean,
                decay: false,
            });
            out.push(ParamMutRef {
                name: format!("{prefix}bn{n}.running_var"),
                tensor: &mut bn.running_var,
                decay: false,
            });
        }
    }
    out
}

fn lsa_grads_flat<T: Element>(grads: LsaPredictorGrads<T>) -> Vec<Tensor<T>> {
    let mut out = Vec::new();
    for stage in grads.stages {
        if let Some(dw) = stage.dw {
            out.push(dw);
        }
        out.push(stage.pw);
        if let Some((dgamma, dbeta)) = stage.bn {
            out.push(dgamma);
            out.push(dbeta);
        }
    }
    out
}

fn lsa_update_state<T: Element>(
    theta: &mut LsaPredictorWeights<T>,
    caches: &[Option<crate::norm::BnCache<T>>],
) {
    for (stage, cache) in theta.stages.iter_mut().zip(caches.iter()) {
        if let (Some(bn), Some(c)) = (&mut stage.bn, cache) {
            if c.n > 0 {
                norm::update_running(&mut bn.running_mean, &mut bn.running_var, c, 0.1);
            }
        }
    }
}

fn lsa_cost<T: Element>(
    theta: &LsaPredictorWeights<T>,
    cfg: &LsaConfig,
    in_shape: &[usize],
) -> Result<LayerCost> {
    let (c, h, w) = (in_shape[1], in_shape[2], in_shape[3]);
    let pad = cfg.k_lsa / 2;
    let ho = conv_out_extent(h, cfg.k_lsa, cfg.stride, pad)?;
    let wo = conv_out_extent(w, cfg.k_lsa, cfg.stride, pad)?;
    let mut spatial = 0u64;
    // Pooling of the predictor input counts as adds, like GAP.
    if cfg.stride > 1 {
        spatial += (c * h * w) as u64;
    }
    let (mut hc, mut wc) = (ho, wo);
    if cfg.stride == 1 {
        hc = h;
        wc = w;
    }
    for stage in &theta.stages {
        let c_in = stage.pw.shape()[1];
        let c_out = stage.pw.shape()[0];
        if stage.dw.is_some() {
            spatial += (c_in * cfg.k_dw * cfg.k_dw * hc * wc) as u64;
        }
        spatial += (c_out * c_in * hc * wc) as u64;
    }
    // Apply: channel-shared kernel, one MAC per tap per channel.
    spatial += (c * cfg.k_lsa * cfg.k_lsa * ho * wo) as u64;
    Ok(LayerCost {
        spatial_macs: spatial,
        fixed_macs: 0,
    })
}

/// Local spatial-adaptive operator as a graph layer.
pub struct LsaLayer<T: Element> {
    pub theta: LsaPredictorWeights<T>,
    pub cfg: LsaConfig,
}

impl<T: Element> Layer<T> for LsaLayer<T> {
    fn kind(&self) -> &'static str {
        "lsa"
    }

    fn forward(&self, inputs: &[&Tensor<T>], phase: Phase) -> Result<(Tensor<T>, Cache<T>)> {
        let x = expect_one(inputs)?;
        let (y, cache) = lsa_forward_cached(x, &self.theta, &self.cfg, phase_mode(phase))?;
        Ok((y, Cache::Lsa(Box::new(cache))))
    }

    fn update_state(&mut self, cache: &Cache<T>) {
        if let Cache::Lsa(c) = cache {
            lsa_update_state(&mut self.theta, &c.predict.bn_caches);
        }
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        cache: &Cache<T>,
        dy: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let x = expect_one(inputs)?;
        let cache = match cache {
            Cache::Lsa(c) => c,
            _ => return Err(Error::Graph("lsa vjp without cache".into())),
        };
        let (dx, dtheta) = lsa_vjp_cached(x, &self.theta, &self.cfg, cache, dy)?;
        Ok((vec![dx], lsa_grads_flat(dtheta)))
    }

    fn params(&self) -> Vec<Param<'_, T>> {
        lsa_params(&self.theta, "")
    }

    fn params_mut(&mut self) -> Vec<ParamMutRef<'_, T>> {
        lsa_params_mut(&mut self.theta, "")
    }

    fn buffers(&self) -> Vec<Param<'_, T>> {
        lsa_buffers(&self.theta, "")
    }

    fn buffers_mut(&mut self) -> Vec<ParamMutRef<'_, T>> {
        lsa_buffers_mut(&mut self.theta, "")
    }

    fn out_shape(&self, in_shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
        let s = &in_shapes[0];
        let pad = self.cfg.k_lsa / 2;
        let ho = conv_out_extent(s[2], self.cfg.k_lsa, self.cfg.stride, pad)?;
        let wo = conv_out_extent(s[3], self.cfg.k_lsa, self.cfg.stride, pad)?;
        Ok(vec![s[0], s[1], ho, wo])
    }

    fn cost(&self, in_shapes: &[Vec<usize>]) -> Result<LayerCost> {
        lsa_cost(&self.theta, &self.cfg, &in_shapes[0])
    }

    fn dynamic_kernels(&self, input: &Tensor<T>) -> Option<Result<super::DynamicKernels<T>>> {
        Some(
            crate::dynamic::lsa_predict(input, &self.theta, &self.cfg, BnMode::Running).map(
                |field| super::DynamicKernels {
                    lsa: Some(field),
                    gsi: None,
                },
            ),
        )
    }
}

fn gsi_params<'a, T: Element>(gamma: &'a GsiWeights<T>, prefix: &str) -> Vec<Param<'a, T>> {
    let names = ["pw1.weight", "pw1.bias", "pw2.weight", "pw2.bias", "pw3.weight", "pw3.bias"];
    let tensors = [
        &gamma.pw1_w,
        &gamma.pw1_b,
        &gamma.pw2_w,
        &gamma.pw2_b,
        &gamma.pw3_w,
        &gamma.pw3_b,
    ];
    names
        .iter()
        .zip(tensors)
        .map(|(n, t)| Param {
            name: format!("{prefix}{n}"),
            tensor: t,
            decay: true,
        })
        .collect()
}

fn gsi_params_mut<'a, T: Element>(
    gamma: &'a mut GsiWeights<T>,
    prefix: &str,
) -> Vec<ParamMutRef<'a, T>> {
    let GsiWeights {
        pw1_w,
        pw1_b,
        pw2_w,
        pw2_b,
        pw3_w,
        pw3_b,
    } = gamma;
    [
        ("pw1.weight", pw1_w),
        ("pw1.bias", pw1_b),
        ("pw2.weight", pw2_w),
        ("pw2.bias", pw2_b),
        ("pw3.weight", pw3_w),
        ("pw3.bias", pw3_b),
    ]
    .into_iter()
    .map(|(n, t)| ParamMutRef {
        name: format!("{prefix}{n}"),
        tensor: t,
        decay: true,
    })
    .collect()
}

fn gsi_grads_flat<T: Element>(g: GsiGrads<T>) -> Vec<Tensor<T>> {
    vec![g.pw1_w, g.pw1_b, g.pw2_w, g.pw2_b, g.pw3_w, g.pw3_b]
}

fn gsi_cost<T: Element>(gamma: &GsiWeights<T>, cfg: &GsiConfig, in_shape: &[usize]) -> Result<LayerCost> {
    let (c, h, w) = (in_shape[1], in_shape[2], in_shape[3]);
    let m = gamma.reduced_width();
    let k = cfg.k_gsi;
    let pad = k / 2;
    let ho = conv_out_extent(h, k, cfg.stride, pad)?;
    let wo = conv_out_extent(w, k, cfg.stride, pad)?;
    let mut spatial = 0u64;
    spatial += (m * c * h * w) as u64; // pw1 at input resolution
    spatial += (m * h * w) as u64; // GAP adds
    spatial += (m * m * k * k * ho * wo) as u64; // dynamic conv apply
    spatial += (c * m * ho * wo) as u64; // pw3 at output resolution
    let fixed = (m * m * k * k * m) as u64; // kernel prediction from pooled vector
    Ok(LayerCost {
        spatial_macs: spatial,
        fixed_macs: fixed,
    })
}

/// Global shift-invariant operator as a graph layer.
pub struct GsiLayer<T: Element> {
    pub gamma: GsiWeights<T>,
    pub cfg: GsiConfig,
}

impl<T: Element> Layer<T> for GsiLayer<T> {
    fn kind(&self) -> &'static str {
        "gsi"
    }

    fn forward(&self, inputs: &[&Tensor<T>], _phase: Phase) -> Result<(Tensor<T>, Cache<T>)> {
        let x = expect_one(inputs)?;
        let (y, cache) = gsi_forward_cached(x, &self.gamma, &self.cfg)?;
        Ok((y, Cache::Gsi(Box::new(cache))))
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        cache: &Cache<T>,
        dy: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let x = expect_one(inputs)?;
        let cache = match cache {
            Cache::Gsi(c) => c,
            _ => return Err(Error::Graph("gsi vjp without cache".into())),
        };
        let (dx, dgamma) = gsi_vjp_cached(x, &self.gamma, &self.cfg, cache, dy)?;
        Ok((vec![dx], gsi_grads_flat(dgamma)))
    }

    fn params(&self) -> Vec<Param<'_, T>> {
        gsi_params(&self.gamma, "")
    }

    fn params_mut(&mut self) -> Vec<ParamMutRef<'_, T>> {
        gsi_params_mut(&mut self.gamma, "")
    }

    fn out_shape(&self, in_shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
        let s = &in_shapes[0];
        let pad = self.cfg.k_gsi / 2;
        let ho = conv_out_extent(s[2], self.cfg.k_gsi, self.cfg.stride, pad)?;
        let wo = conv_out_extent(s[3], self.cfg.k_gsi, self.cfg.stride, pad)?;
        Ok(vec![s[0], s[1], ho, wo])
    }

    fn cost(&self, in_shapes: &[Vec<usize>]) -> Result<LayerCost> {
        gsi_cost(&self.gamma, &self.cfg, &in_shapes[0])
    }

    fn dynamic_kernels(&self, input: &Tensor<T>) -> Option<Result<super::DynamicKernels<T>>> {
        Some(
            crate::dynamic::gsi_predict(input, &self.gamma, &self.cfg).map(|kernels| {
                super::DynamicKernels {
                    lsa: None,
                    gsi: Some(kernels),
                }
            }),
        )
    }
}

/// Combined operator: LSA + GSI as one layer.
pub struct DcdcLayer<T: Element> {
    pub theta: LsaPredictorWeights<T>,
    pub gamma: GsiWeights<T>,
    pub lsa_cfg: LsaConfig,
    pub gsi_cfg: GsiConfig,
}

impl<T: Element> Layer<T> for DcdcLayer<T> {
    fn kind(&self) -> &'static str {
        "dcdc"
    }

    fn forward(&self, inputs: &[&Tensor<T>], phase: Phase) -> Result<(Tensor<T>, Cache<T>)> {
        let x = expect_one(inputs)?;
        let (y, cache) = dcdc_forward_cached(
            x,
            &self.theta,
            &self.gamma,
            &self.lsa_cfg,
            &self.gsi_cfg,
            phase_mode(phase),
        )?;
        Ok((y, Cache::Dcdc(Box::new(cache))))
    }

    fn update_state(&mut self, cache: &Cache<T>) {
        if let Cache::Dcdc(c) = cache {
            lsa_update_state(&mut self.theta, &c.lsa.predict.bn_caches);
        }
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        cache: &Cache<T>,
        dy: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let x = expect_one(inputs)?;
        let cache = match cache {
            Cache::Dcdc(c) => c,
            _ => return Err(Error::Graph("dcdc vjp without cache".into())),
        };
        let (dx, dtheta, dgamma) = dcdc_vjp_cached(
            x,
            &self.theta,
            &self.gamma,
            &self.lsa_cfg,
            &self.gsi_cfg,
            cache,
            dy,
        )?;
        let mut grads = lsa_grads_flat(dtheta);
        grads.extend(gsi_grads_flat(dgamma));
        Ok((vec![dx], grads))
    }

    fn params(&self) -> Vec<Param<'_, T>> {
        let mut out = lsa_params(&self.theta, "lsa.");
        out.extend(gsi_params(&self.gamma, "gsi."));
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMutRef<'_, T>> {
        let mut out = lsa_params_mut(&mut self.theta, "lsa.");
        out.extend(gsi_params_mut(&mut self.gamma, "gsi."));
        out
    }

    fn buffers(&self) -> Vec<Param<'_, T>> {
        lsa_buffers(&self.theta, "lsa.")
    }

    fn buffers_mut(&mut self) -> Vec<ParamMutRef<'_, T>> {
        lsa_buffers_mut(&mut self.theta, "lsa.")
    }

    fn out_shape(&self, in_shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
        let s = &in_shapes[0];
        let pad = self.lsa_cfg.k_lsa / 2;
        let ho = conv_out_extent(s[2], self.lsa_cfg.k_lsa, self.lsa_cfg.stride, pad)?;
        let wo = conv_out_extent(s[3], self.lsa_cfg.k_lsa, self.lsa_cfg.stride, pad)?;
        Ok(vec![s[0], s[1], ho, wo])
    }

    fn cost(&self, in_shapes: &[Vec<usize>]) -> Result<LayerCost> {
        let a = lsa_cost(&self.theta, &self.lsa_cfg, &in_shapes[0])?;
        let b = gsi_cost(&self.gamma, &self.gsi_cfg, &in_shapes[0])?;
        Ok(LayerCost {
            spatial_macs: a.spatial_macs + b.spatial_macs,
            fixed_macs: a.fixed_macs + b.fixed_macs,
        })
    }

    fn dynamic_kernels(&self, input: &Tensor<T>) -> Option<Result<super::DynamicKernels<T>>> {
        let field =
            match crate::dynamic::lsa_predict(input, &self.theta, &self.lsa_cfg, BnMode::Running) {
                Ok(f) => f,
                Err(e) => return Some(Err(e)),
            };
        let kernels = match crate::dynamic::gsi_predict(input, &self.gamma, &self.gsi_cfg) {
            Ok(k) => k,
            Err(e) => return Some(Err(e)),
        };
        Some(Ok(super::DynamicKernels {
            lsa: Some(field),
            gsi: Some(kernels),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{GraphBuilder, Phase};
    use crate::rng::Rng;
    use crate::verify::{dot, fd_grad, max_rel_err, randn, FD_EPS};

    #[test]
    fn identity_graph_is_identity() {
        let b = GraphBuilder::<f64>::new();
        let g = b.finish(0).unwrap();
        let x = randn(&[1, 2, 3, 3], &mut Rng::new(1));
        let (y, _) = g.forward(&x, Phase::Eval).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn two_pointwise_layers_compose_like_matrices() {
        let mut rng = Rng::new(2);
        let w1 = randn(&[3, 2], &mut rng);
        let w2 = randn(&[4, 3], &mut rng);
        let mut b = GraphBuilder::<f64>::new();
        let p1 = b.add(
            "pw1",
            PointwiseLayer {
                weight: w1.clone(),
                bias: None,
                stride: 1,
            },
            &[b.input()],
        );
        let p2 = b.add(
            "pw2",
            PointwiseLayer {
                weight: w2.clone(),
                bias: None,
                stride: 1,
            },
            &[p1],
        );
        let g = b.finish(p2).unwrap();
        let x = randn(&[1, 2, 2, 2], &mut rng);
        let (y, _) = g.forward(&x, Phase::Eval).unwrap();
        // Oracle: composed matrix applied per pixel.
        let w21 = crate::tensor::matmul(&w2, &w1).unwrap();
        let expect = crate::oracle::pointwise_oracle(&x, &w21, None);
        for (a, e) in y.data().iter().zip(expect.data().iter()) {
            assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
        }
    }

    #[test]
    fn residual_add_of_zero_branch_is_identity() {
        let mut b = GraphBuilder::<f64>::new();
        let zero_branch = b.add(
            "zero",
            PointwiseLayer {
                weight: Tensor::zeros(&[2, 2]),
                bias: None,
                stride: 1,
            },
            &[b.input()],
        );
        let sum = b.add("add", AddLayer, &[b.input(), zero_branch]);
        let g = b.finish(sum).unwrap();
        let x = randn(&[1, 2, 3, 3], &mut Rng::new(3));
        let (y, _) = g.forward(&x, Phase::Eval).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn zero_dy_gives_zero_grads() {
        let mut rng = Rng::new(4);
        let mut b = GraphBuilder::<f64>::new();
        let p = b.add(
            "pw",
            PointwiseLayer {
                weight: randn(&[2, 2], &mut rng),
                bias: Some(randn(&[2], &mut rng)),
                stride: 1,
            },
            &[b.input()],
        );
        let g = b.finish(p).unwrap();
        let x = randn(&[1, 2, 2, 2], &mut rng);
        let (_, tape) = g.forward(&x, Phase::Eval).unwrap();
        let grads = g.backward(tape, &Tensor::zeros(&[1, 2, 2, 2])).unwrap();
        for (_, t) in grads.iter() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_graph_analytic_grads() {
        // y = w * x + b on flattened features; closed-form gradients.
        let mut b = GraphBuilder::<f64>::new();
        let pool = b.add("pool", GlobalPoolLayer, &[b.input()]);
        let lin = b.add(
            "fc",
            LinearLayer {
                weight: Tensor::new(&[1, 2], vec![2.0, -1.0]).unwrap(),
                bias: Tensor::new(&[1], vec![0.5]).unwrap(),
            },
            &[pool],
        );
        let g = b.finish(lin).unwrap();
        let x = Tensor::new(&[1, 2, 1, 1], vec![3.0, 4.0]).unwrap();
        let (y, tape) = g.forward(&x, Phase::Eval).unwrap();
        assert_eq!(y.data(), &[2.0 * 3.0 - 4.0 + 0.5]);
        let grads = g.backward(tape, &Tensor::new(&[1, 1], vec![1.0]).unwrap()).unwrap();
        assert_eq!(grads.get("fc.weight").unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.get("fc.bias").unwrap().data(), &[1.0]);
        assert_eq!(grads.input.data(), &[2.0, -1.0]);
    }

    #[test]
    fn relu_values() {
        let layer = ReluLayer;
        let x = Tensor::new(&[1, 1, 1, 2], vec![-1.0, 2.0]).unwrap();
        let (y, _) = Layer::<f64>::forward(&layer, &[&x], Phase::Eval).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn relu_and_maxpool_fd() {
        let mut rng = Rng::new(5);
        // Keep values away from kinks/ties.
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| {
            let v = rng.next_standard_normal();
            let v = if v.abs() < 0.1 { v + 0.2 } else { v };
            v + i as f64 * 1e-3
        });
        let dy_relu = randn(&[1, 2, 4, 4], &mut rng);
        let relu = ReluLayer;
        let (_, cache) = Layer::<f64>::forward(&relu, &[&x], Phase::Eval).unwrap();
        let (dxs, _) = relu.vjp(&[&x], &cache, &dy_relu).unwrap();
        let loss = |v: &[f64]| {
            let xt = Tensor::new(x.shape(), v.to_vec()).unwrap();
            let (y, _) = Layer::<f64>::forward(&relu, &[&xt], Phase::Eval).unwrap();
            dot(dy_relu.data(), y.data())
        };
        assert!(max_rel_err(dxs[0].data(), &fd_grad(loss, x.data(), FD_EPS)) <= 1e-6);

        let pool = MaxPoolLayer {
            k: 3,
            stride: 2,
            padding: 1,
        };
        let (y, cache) = Layer::<f64>::forward(&pool, &[&x], Phase::Eval).unwrap();
        let dy = randn(y.shape(), &mut rng);
        let (dxs, _) = pool.vjp(&[&x], &cache, &dy).unwrap();
        let loss = |v: &[f64]| {
            let xt = Tensor::new(x.shape(), v.to_vec()).unwrap();
            let (y, _) = Layer::<f64>::forward(&pool, &[&xt], Phase::Eval).unwrap();
            dot(dy.data(), y.data())
        };
        assert!(max_rel_err(dxs[0].data(), &fd_grad(loss, x.data(), FD_EPS)) <= 1e-6);
    }

    #[test]
    fn backward_accumulates_fan_out() {
        // x feeds two branches; input grad is the sum of both.
        let mut b = GraphBuilder::<f64>::new();
        let s1 = b.add(
            "scale2",
            PointwiseLayer {
                weight: Tensor::new(&[1, 1], vec![2.0]).unwrap(),
                bias: None,
                stride: 1,
            },
            &[b.input()],
        );
        let s2 = b.add(
            "scale3",
            PointwiseLayer {
                weight: Tensor::new(&[1, 1], vec![3.0]).unwrap(),
                bias: None,
                stride: 1,
            },
            &[b.input()],
        );
        let sum = b.add("add", AddLayer, &[s1, s2]);
        let g = b.finish(sum).unwrap();
        let x = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let (y, tape) = g.forward(&x, Phase::Eval).unwrap();
        assert_eq!(y.data(), &[5.0]);
        let grads = g
            .backward(tape, &Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap())
            .unwrap();
        assert_eq!(grads.input.data(), &[5.0]);
    }

    #[test]
    fn forward_backward_rerun_is_bit_identical() {
        let mut rng = Rng::new(6);
        let mut b = GraphBuilder::<f64>::new();
        let conv = b.add(
            "conv",
            ConvLayer {
                w: ConvWeights::new(randn(&[2, 2, 3, 3], &mut rng), None, 1, 1, 1).unwrap(),
            },
            &[b.input()],
        );
        let bn = b.add("bn", BatchNormLayer::new(2), &[conv]);
        let relu = b.add("relu", ReluLayer, &[bn]);
        let g = b.finish(relu).unwrap();
        let x = randn(&[2, 2, 4, 4], &mut rng);
        let dy = randn(&[2, 2, 4, 4], &mut rng);
        let (y1, t1) = g.forward(&x, Phase::Train).unwrap();
        let g1 = g.backward(t1, &dy).unwrap();
        let (y2, t2) = g.forward(&x, Phase::Train).unwrap();
        let g2 = g.backward(t2, &dy).unwrap();
        assert_eq!(y1, y2);
        for ((_, a), (_, b)) in g1.iter().zip(g2.iter()) {
            for (u, v) in a.data().iter().zip(b.data().iter()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_via_graph() {
        let mut rng = Rng::new(7);
        let build = |rng: &mut Rng| {
            let mut b = GraphBuilder::<f64>::new();
            let conv = b.add(
                "conv",
                ConvLayer {
                    w: ConvWeights::new(randn(&[2, 2, 3, 3], rng), None, 1, 1, 1).unwrap(),
                },
                &[b.input()],
            );
            let bn = b.add("bn", BatchNormLayer::new(2), &[conv]);
            b.finish(bn).unwrap()
        };
        let g1 = build(&mut rng);
        let mut g2 = build(&mut rng); // different weights
        let bytes = g1.checkpoint_bytes();
        g2.load_checkpoint_bytes(&bytes).unwrap();
        let x = randn(&[1, 2, 3, 3], &mut rng);
        let (y1, _) = g1.forward(&x, Phase::Eval).unwrap();
        let (y2, _) = g2.forward(&x, Phase::Eval).unwrap();
        assert_eq!(y1, y2);
        // Graph param count equals manifest enumeration (params only).
        let entries = crate::io::read_checkpoint_bytes::<f64>(&bytes).unwrap();
        let manifest_params: usize = entries
            .iter()
            .filter(|(m, _)| !m.name.contains("running_"))
            .map(|(_, t)| t.numel())
            .sum();
        assert_eq!(manifest_params, g1.param_count());
    }

    #[test]
    fn bn_update_state_changes_running_stats() {
        let mut rng = Rng::new(8);
        let mut b = GraphBuilder::<f64>::new();
        let bn = b.add("bn", BatchNormLayer::new(2), &[b.input()]);
        let mut g = b.finish(bn).unwrap();
        let x = Tensor::from_fn(&[4, 2, 3, 3], |_| 1.0 + rng.next_standard_normal());
        let before: Vec<f64> = g.named_buffers().iter().map(|(_, t)| t.data()[0]).collect();
        g.forward_train(&x).unwrap();
        let after: Vec<f64> = g.named_buffers().iter().map(|(_, t)| t.data()[0]).collect();
        assert_ne!(before, after);
    }
}
