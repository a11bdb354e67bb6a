//! Compact residual nets for the desk-scale training harness.

use super::operators::{OperatorRegistry, SiteCtx};
use super::{bottleneck, conv_bn_relu, ModelSpec};
use crate::autodiff::layers::{GlobalPoolLayer, LinearLayer};
use crate::autodiff::{GraphBuilder, LayerGraph};
use crate::dynamic::{GsiConfig, LsaConfig};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// One stage of the small net: (mid width, out width, blocks, first stride).
pub type SmallStage = (usize, usize, usize, usize);

#[derive(Debug, Clone)]
pub struct SmallNetSpec {
    pub operator: String,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stages: Vec<SmallStage>,
    pub lsa: LsaConfig,
    pub gsi: GsiConfig,
    pub num_classes: usize,
    pub input_channels: usize,
}

impl SmallNetSpec {
    /// Six-block net used by the training harness (32×32 inputs). The LSA
    /// group size is 8 so the narrow widths still form several groups.
    pub fn small(operator: &str, num_classes: usize, input_channels: usize) -> Self {
        SmallNetSpec {
            operator: operator.to_string(),
            stem_channels: 16,
            stem_stride: 2,
            stages: vec![(16, 32, 2, 1), (32, 64, 2, 2), (32, 64, 2, 2)],
            lsa: LsaConfig {
                group_size: 8,
                ..LsaConfig::default()
            },
            gsi: GsiConfig::default(),
            num_classes,
            input_channels,
        }
    }

    /// Static-conv counterpart of [`SmallNetSpec::small`] with reduced widths
    /// chosen so the parameter totals match within a few per cent.
    pub fn small_conv_matched(num_classes: usize, input_channels: usize) -> Self {
        SmallNetSpec {
            operator: "vanilla".to_string(),
            stem_channels: 16,
            stem_stride: 2,
            stages: vec![(12, 32, 2, 1), (22, 64, 2, 2), (22, 64, 2, 2)],
            lsa: LsaConfig::default(),
            gsi: GsiConfig::default(),
            num_classes,
            input_channels,
        }
    }

    pub fn from_model_spec(spec: &ModelSpec) -> Self {
        let mut s = Self::small(&spec.operator, spec.num_classes, spec.input_channels);
        s.lsa = LsaConfig {
            group_size: 8,
            ..spec.lsa.clone()
        };
        s.gsi = spec.gsi.clone();
        s
    }
}

/// Builds the small net: stride-`stem_stride` 3×3 stem conv, bottleneck
/// stages with the chosen operator at every 3×3 site, global pooling, linear
/// head.
pub fn build_small_model<T: Element>(spec: &SmallNetSpec, rng: &mut Rng) -> Result<LayerGraph<T>> {
    let registry = OperatorRegistry::<T>::with_defaults();
    let op = registry.get(&spec.operator)?;
    let ctx = SiteCtx {
        lsa: &spec.lsa,
        gsi: &spec.gsi,
        in_stem: false,
    };
    let mut b = GraphBuilder::<T>::new();
    let mut cur = conv_bn_relu(
        &mut b,
        0,
        "stem",
        spec.input_channels,
        spec.stem_channels,
        3,
        spec.stem_stride,
        rng,
    )?;
    let mut c_in = spec.stem_channels;
    for (stage, &(mid, out, blocks, first_stride)) in spec.stages.iter().enumerate() {
        for block in 0..blocks {
            let stride = if block == 0 { first_stride } else { 1 };
            let prefix = format!("stage{}.block{}", stage + 1, block);
            cur = bottleneck(&mut b, cur, &prefix, c_in, mid, out, stride, op, &ctx, rng)?;
            c_in = out;
        }
    }
    let pool = b.add("head.pool", GlobalPoolLayer, &[cur]);
    let std = (1.0 / c_in as f64).sqrt();
    let weight = Tensor::from_fn(&[spec.num_classes, c_in], |_| {
        T::from_f64(std * rng.next_standard_normal())
    });
    let fc = b.add(
        "head.fc",
        LinearLayer {
            weight,
            bias: Tensor::zeros(&[spec.num_classes]),
        },
        &[pool],
    );
    b.finish(fc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Phase;
    use crate::rng::Rng;
    use crate::verify::randn;

    #[test]
    fn small_net_forward_shape() {
        let spec = SmallNetSpec::small("dcdc", 3, 3);
        let g = build_small_model::<f64>(&spec, &mut Rng::new(1)).unwrap();
        let x = randn(&[2, 3, 32, 32], &mut Rng::new(2));
        let (y, _) = g.forward(&x, Phase::Eval).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
    }

    #[test]
    fn conv_matched_widths_are_parameter_matched() {
        let dcdc = build_small_model::<f64>(&SmallNetSpec::small("dcdc", 3, 3), &mut Rng::new(1))
            .unwrap()
            .param_count() as f64;
        let conv = build_small_model::<f64>(
            &SmallNetSpec::small_conv_matched(3, 3),
            &mut Rng::new(1),
        )
        .unwrap()
        .param_count() as f64;
        let rel = (dcdc - conv).abs() / dcdc;
        assert!(rel < 0.10, "dcdc {dcdc} vs conv {conv} ({rel:.3})");
    }

    #[test]
    fn block_count_is_six() {
        let spec = SmallNetSpec::small("dcdc", 3, 3);
        let blocks: usize = spec.stages.iter().map(|s| s.2).sum();
        assert_eq!(blocks, 6);
    }
}
