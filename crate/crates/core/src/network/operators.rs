//! 3×3-site operator strategies and their registry.
//!
//! A site operator builds the channel-preserving subgraph occupying a 3×3
//! convolution site. Variants are registered by name and resolved at build
//! time from the model config's `operator` key:
//!
//! * `vanilla`       — static 3×3 convolution
//! * `involution`    — LSA with a single-pixel predictor (no depthwise layers)
//! * `lsa`           — LSA branch alone
//! * `lsa+conv_small` — LSA plus a reduced-width static-conv branch
//!                      (pw down, 3×3 conv, pw up; the dynamic core replaced)
//! * `lsa+conv_large` — LSA plus a full-width static 3×3 conv branch
//! * `dcdc`          — LSA plus GSI (the full operator)
//!
//! Inside the stem (no residual skip) composite operators place only their
//! LSA component, and the final predictor layer keeps its random init; inside
//! residual blocks the final predictor layer and the GSI kernel layer start
//! at zero so every block begins as an identity-plus-shortcut map.

use super::kaiming_conv;
use crate::autodiff::layers::{AddLayer, ConvLayer, DcdcLayer, LsaLayer, PointwiseLayer};
use crate::autodiff::{GraphBuilder, NodeId};
use crate::conv::ConvWeights;
use crate::dynamic::{init_gsi_weights, init_lsa_predictor, GsiConfig, LsaConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};
use std::collections::BTreeMap;

/// Site-construction context shared by all operators.
pub struct SiteCtx<'a> {
    pub lsa: &'a LsaConfig,
    pub gsi: &'a GsiConfig,
    /// Stem sites have no residual skip; composite operators degrade to
    /// their LSA component there and skip zero-initialisation.
    pub in_stem: bool,
}

/// Strategy occupying one 3×3 site. Implementations must preserve the
/// channel count and honour the requested stride.
pub trait SiteOperator<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    #[allow(clippy::too_many_arguments)]
    fn build_site(
        &self,
        b: &mut GraphBuilder<T>,
        input: NodeId,
        prefix: &str,
        channels: usize,
        stride: usize,
        ctx: &SiteCtx,
        rng: &mut Rng,
    ) -> Result<NodeId>;
}

/// Name → operator lookup. Populated with the six built-in variants via
/// [`OperatorRegistry::with_defaults`]; additional strategies can be
/// registered at runtime.
pub struct OperatorRegistry<T: Element> {
    map: BTreeMap<&'static str, Box<dyn SiteOperator<T>>>,
}

impl<T: Element> OperatorRegistry<T> {
    pub fn new() -> Self {
        OperatorRegistry {
            map: BTreeMap::new(),
        }
    }

    pub fn with_defaults() -> Self {
        let mut r = Self::new();
        r.register(VanillaOp);
        r.register(InvolutionOp);
        r.register(LsaOp);
        r.register(ConvSmallOp);
        r.register(ConvLargeOp);
        r.register(DcdcOp);
        r
    }

    pub fn register(&mut self, op: impl SiteOperator<T> + 'static) {
        self.map.insert(op.name(), Box::new(op));
    }

    pub fn get(&self, name: &str) -> Result<&dyn SiteOperator<T>> {
        self.map
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown operator {name:?}; registered: {}",
                    self.names().join(", ")
                ))
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.map.keys().copied().collect()
    }
}

impl<T: Element> Default for OperatorRegistry<T> {
    fn default() -> Self {
        Self::with_defaults()
    }
}

fn lsa_site_cfg(ctx: &SiteCtx, stride: usize) -> LsaConfig {
    LsaConfig {
        stride,
        ..ctx.lsa.clone()
    }
}

fn gsi_site_cfg(ctx: &SiteCtx, stride: usize) -> GsiConfig {
    GsiConfig {
        stride,
        ..ctx.gsi.clone()
    }
}

fn lsa_node<T: Element>(
    b: &mut GraphBuilder<T>,
    input: NodeId,
    prefix: &str,
    channels: usize,
    stride: usize,
    ctx: &SiteCtx,
    rng: &mut Rng,
    single_pixel: bool,
) -> Result<NodeId> {
    let cfg = lsa_site_cfg(ctx, stride);
    let theta = init_lsa_predictor::<T>(channels, &cfg, rng, single_pixel, !ctx.in_stem)?;
    Ok(b.add(format!("{prefix}.lsa"), LsaLayer { theta, cfg }, &[input]))
}

/// Static 3×3 convolution, no bias (batch norm follows every site).
pub struct VanillaOp;

impl<T: Element> SiteOperator<T> for VanillaOp {
    fn name(&self) -> &'static str {
        "vanilla"
    }

    fn build_site(
        &self,
        b: &mut GraphBuilder<T>,
        input: NodeId,
        prefix: &str,
        channels: usize,
        stride: usize,
        _ctx: &SiteCtx,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let kernel = kaiming_conv(&[channels, channels, 3, 3], channels * 9, rng);
        Ok(b.add(
            format!("{prefix}.conv"),
            ConvLayer {
                w: ConvWeights::new(kernel, None, stride, 1, 1)?,
            },
            &[input],
        ))
    }
}

/// LSA with a single-pixel predictor: kernels are predicted from the centre
/// pixel alone (two pointwise layers, no depthwise).
pub struct InvolutionOp;

impl<T: Element> SiteOperator<T> for InvolutionOp {
    fn name(&self) -> &'static str {
        "involution"
    }

    fn build_site(
        &self,
        b: &mut GraphBuilder<T>,
        input: NodeId,
        prefix: &str,
        channels: usize,
        stride: usize,
        ctx: &SiteCtx,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        lsa_node(b, input, prefix, channels, stride, ctx, rng, true)
    }
}

/// LSA branch alone.
pub struct LsaOp;

impl<T: Element> SiteOperator<T> for LsaOp {
    fn name(&self) -> &'static str {
        "lsa"
    }

    fn build_site(
        &self,
        b: &mut GraphBuilder<T>,
        input: NodeId,
        prefix: &str,
        channels: usize,
        stride: usize,
        ctx: &SiteCtx,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        lsa_node(b, input, prefix, channels, stride, ctx, rng, false)
    }
}

/// LSA plus a reduced-width static branch: pw down to `m`, static 3×3 conv,
/// pw back to `C` — the GSI pipeline with its dynamic core made static.
pub struct ConvSmallOp;

impl<T: Element> SiteOperator<T> for ConvSmallOp {
    fn name(&self) -> &'static str {
        "lsa+conv_small"
    }

    fn build_site(
        &self,
        b: &mut GraphBuilder<T>,
        input: NodeId,
        prefix: &str,
        channels: usize,
        stride: usize,
        ctx: &SiteCtx,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let lsa = lsa_node(b, input, prefix, channels, stride, ctx, rng, false)?;
        if ctx.in_stem {
            return Ok(lsa);
        }
        let m = ctx.gsi.reduced_width(channels);
        let pw1 = b.add(
            format!("{prefix}.small.pw1"),
            PointwiseLayer {
                weight: kaiming_conv(&[m, channels], channels, rng),
                bias: Some(Tensor::zeros(&[m])),
                stride: 1,
            },
            &[input],
        );
        let core = b.add(
            format!("{prefix}.small.conv"),
            ConvLayer {
                w: ConvWeights::new(
                    kaiming_conv(&[m, m, 3, 3], m * 9, rng),
                    Some(Tensor::zeros(&[m])),
                    stride,
                    1,
                    1,
                )?,
            },
            &[pw1],
        );
        let pw3 = b.add(
            format!("{prefix}.small.pw3"),
            PointwiseLayer {
                weight: kaiming_conv(&[channels, m], m, rng),
                bias: Some(Tensor::zeros(&[channels])),
                stride: 1,
            },
            &[core],
        );
        Ok(b.add(format!("{prefix}.sum"), AddLayer, &[lsa, pw3]))
    }
}

/// LSA plus a full-width static 3×3 conv branch.
pub struct ConvLargeOp;

impl<T: Element> SiteOperator<T> for ConvLargeOp {
    fn name(&self) -> &'static str {
        "lsa+conv_large"
    }

    fn build_site(
        &self,
        b: &mut GraphBuilder<T>,
        input: NodeId,
        prefix: &str,
        channels: usize,
        stride: usize,
        ctx: &SiteCtx,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let lsa = lsa_node(b, input, prefix, channels, stride, ctx, rng, false)?;
        if ctx.in_stem {
            return Ok(lsa);
        }
        let conv = b.add(
            format!("{prefix}.large.conv"),
            ConvLayer {
                w: ConvWeights::new(
                    kaiming_conv(&[channels, channels, 3, 3], channels * 9, rng),
                    Some(Tensor::zeros(&[channels])),
                    stride,
                    1,
                    1,
                )?,
            },
            &[input],
        );
        Ok(b.add(format!("{prefix}.sum"), AddLayer, &[lsa, conv]))
    }
}

/// The full two-branch operator.
pub struct DcdcOp;

impl<T: Element> SiteOperator<T> for DcdcOp {
    fn name(&self) -> &'static str {
        "dcdc"
    }

    fn build_site(
        &self,
        b: &mut GraphBuilder<T>,
        input: NodeId,
        prefix: &str,
        channels: usize,
        stride: usize,
        ctx: &SiteCtx,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        if ctx.in_stem {
            return lsa_node(b, input, prefix, channels, stride, ctx, rng, false);
        }
        let lsa_cfg = lsa_site_cfg(ctx, stride);
        let gsi_cfg = gsi_site_cfg(ctx, stride);
        let theta = init_lsa_predictor::<T>(channels, &lsa_cfg, rng, false, true)?;
        let gamma = init_gsi_weights::<T>(channels, &gsi_cfg, rng, true)?;
        Ok(b.add(
            format!("{prefix}.dcdc"),
            DcdcLayer {
                theta,
                gamma,
                lsa_cfg,
                gsi_cfg,
            },
            &[input],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lists_builtins() {
        let r = OperatorRegistry::<f64>::with_defaults();
        let names = r.names();
        for expected in [
            "dcdc",
            "involution",
            "lsa",
            "lsa+conv_large",
            "lsa+conv_small",
            "vanilla",
        ] {
            assert!(names.contains(&expected), "missing {expected}");
        }
        assert!(r.get("vanilla").is_ok());
        assert!(r.get("nope").is_err());
    }

    #[test]
    fn custom_registration() {
        struct Custom;
        impl<T: Element> SiteOperator<T> for Custom {
            fn name(&self) -> &'static str {
                "custom"
            }
            fn build_site(
                &self,
                b: &mut GraphBuilder<T>,
                input: NodeId,
                prefix: &str,
                channels: usize,
                stride: usize,
                _ctx: &SiteCtx,
                rng: &mut Rng,
            ) -> Result<NodeId> {
                let kernel = kaiming_conv(&[channels, channels, 3, 3], channels * 9, rng);
                Ok(b.add(
                    format!("{prefix}.conv"),
                    ConvLayer {
                        w: ConvWeights::new(kernel, None, stride, 1, 1)?,
                    },
                    &[input],
                ))
            }
        }
        let mut r = OperatorRegistry::<f64>::with_defaults();
        r.register(Custom);
        assert!(r.get("custom").is_ok());
    }
}
