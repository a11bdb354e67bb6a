//! Residual network builder with pluggable 3×3-site operators.
//!
//! Every 3×3 convolution site in the stem and bottleneck blocks is built by a
//! [`SiteOperator`] strategy looked up by name in an [`OperatorRegistry`], so
//! the operator family (static convolution, involution, LSA, DCDC, and the
//! two static-branch ablations) is selected at runtime from config or CLI.

pub mod operators;
pub mod small;

use crate::autodiff::layers::{
    AddLayer, BatchNormLayer, ConvLayer, GlobalPoolLayer, LinearLayer, MaxPoolLayer,
    PointwiseLayer, ReluLayer,
};
use crate::autodiff::{GraphBuilder, LayerGraph, NodeId};
use crate::conv::ConvWeights;
use crate::dynamic::{GsiConfig, LsaConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};
pub use operators::{OperatorRegistry, SiteCtx, SiteOperator};
use std::collections::BTreeMap;

/// Residual model description. `depth` selects the stage block counts;
/// `operator` names the registered 3×3-site strategy.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub depth: u32,
    pub operator: String,
    pub lsa: LsaConfig,
    pub gsi: GsiConfig,
    pub num_classes: usize,
    pub input_channels: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            depth: 26,
            operator: "dcdc".to_string(),
            lsa: LsaConfig::default(),
            gsi: GsiConfig::default(),
            num_classes: 1000,
            input_channels: 3,
        }
    }
}

/// Stage block counts per depth.
pub fn stage_blocks(depth: u32) -> Result<[usize; 4]> {
    match depth {
        26 => Ok([1, 2, 4, 1]),
        38 => Ok([2, 3, 5, 2]),
        50 => Ok([3, 4, 6, 3]),
        101 => Ok([3, 4, 23, 3]),
        other => Err(Error::Config(format!(
            "unsupported depth {other}; choose one of 26, 38, 50, 101"
        ))),
    }
}

const STEM_WIDTH: usize = 64;
const STAGE_MID: [usize; 4] = [64, 128, 256, 512];
const EXPANSION: usize = 4;

pub(crate) fn kaiming_conv<T: Element>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut Rng,
) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(std * rng.next_standard_normal()))
}

/// conv + BN + ReLU helper.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_bn_relu<T: Element>(
    b: &mut GraphBuilder<T>,
    input: NodeId,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    rng: &mut Rng,
) -> Result<NodeId> {
    let kernel = kaiming_conv(&[c_out, c_in, k, k], c_in * k * k, rng);
    let conv = b.add(
        format!("{prefix}.conv"),
        ConvLayer {
            w: ConvWeights::new(kernel, None, stride, k / 2, 1)?,
        },
        &[input],
    );
    let bn = b.add(format!("{prefix}.bn"), BatchNormLayer::new(c_out), &[conv]);
    Ok(b.add(format!("{prefix}.relu"), ReluLayer, &[bn]))
}

pub(crate) fn pointwise_bn<T: Element>(
    b: &mut GraphBuilder<T>,
    input: NodeId,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    stride: usize,
    rng: &mut Rng,
) -> Result<NodeId> {
    let weight = kaiming_conv(&[c_out, c_in], c_in, rng);
    let pw = b.add(
        format!("{prefix}.pw"),
        PointwiseLayer {
            weight,
            bias: None,
            stride,
        },
        &[input],
    );
    Ok(b.add(format!("{prefix}.bn"), BatchNormLayer::new(c_out), &[pw]))
}

/// Bottleneck block: 1×1 reduce, operator site, 1×1 expand, residual join.
/// Stride (when present) sits on the operator site; the shortcut is a strided
/// 1×1 conv + BN whenever the shape changes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bottleneck<T: Element>(
    b: &mut GraphBuilder<T>,
    input: NodeId,
    prefix: &str,
    c_in: usize,
    c_mid: usize,
    c_out: usize,
    stride: usize,
    op: &dyn SiteOperator<T>,
    ctx: &SiteCtx,
    rng: &mut Rng,
) -> Result<NodeId> {
    let reduce = pointwise_bn(b, input, &format!("{prefix}.reduce"), c_in, c_mid, 1, rng)?;
    let reduce = b.add(format!("{prefix}.reduce.relu"), ReluLayer, &[reduce]);
    let site = op.build_site(b, reduce, &format!("{prefix}.op"), c_mid, stride, ctx, rng)?;
    let site_bn = b.add(format!("{prefix}.op_bn"), BatchNormLayer::new(c_mid), &[site]);
    let site_relu = b.add(format!("{prefix}.op_relu"), ReluLayer, &[site_bn]);
    let expand = pointwise_bn(b, site_relu, &format!("{prefix}.expand"), c_mid, c_out, 1, rng)?;
    let shortcut = if stride != 1 || c_in != c_out {
        pointwise_bn(b, input, &format!("{prefix}.down"), c_in, c_out, stride, rng)?
    } else {
        input
    };
    let sum = b.add(format!("{prefix}.add"), AddLayer, &[expand, shortcut]);
    Ok(b.add(format!("{prefix}.relu"), ReluLayer, &[sum]))
}

/// Builds the full residual classifier for a [`ModelSpec`].
///
/// Stem: 3×3 conv (stride 2) to half stem width, an operator site carrying
/// the LSA component of the chosen operator, a 3×3 conv to stem width, then
/// 3×3 max-pool stride 2. Four bottleneck stages follow (stride-2 first
/// blocks in stages 2–4), then global average pooling and the linear head.
pub fn build_model<T: Element>(spec: &ModelSpec, rng: &mut Rng) -> Result<LayerGraph<T>> {
    let registry = OperatorRegistry::<T>::with_defaults();
    build_model_with(spec, &registry, rng)
}

pub fn build_model_with<T: Element>(
    spec: &ModelSpec,
    registry: &OperatorRegistry<T>,
    rng: &mut Rng,
) -> Result<LayerGraph<T>> {
    spec.lsa.validate()?;
    spec.gsi.validate()?;
    let blocks = stage_blocks(spec.depth)?;
    let op = registry.get(&spec.operator)?;
    let mut b = GraphBuilder::<T>::new();

    // Stem.
    let half = STEM_WIDTH / 2;
    let ctx_stem = SiteCtx {
        lsa: &spec.lsa,
        gsi: &spec.gsi,
        in_stem: true,
    };
    let ctx_block = SiteCtx {
        lsa: &spec.lsa,
        gsi: &spec.gsi,
        in_stem: false,
    };
    let s1 = conv_bn_relu(&mut b, 0, "stem.conv1", spec.input_channels, half, 3, 2, rng)?;
    let site = op.build_site(&mut b, s1, "stem.op", half, 1, &ctx_stem, rng)?;
    let site_bn = b.add("stem.op_bn", BatchNormLayer::new(half), &[site]);
    let site_relu = b.add("stem.op_relu", ReluLayer, &[site_bn]);
    let s3 = conv_bn_relu(&mut b, site_relu, "stem.conv3", half, STEM_WIDTH, 3, 1, rng)?;
    let mut cur = b.add(
        "stem.pool",
        MaxPoolLayer {
            k: 3,
            stride: 2,
            padding: 1,
        },
        &[s3],
    );

    // Stages.
    let mut c_in = STEM_WIDTH;
    for (stage, &count) in blocks.iter().enumerate() {
        let c_mid = STAGE_MID[stage];
        let c_out = c_mid * EXPANSION;
        for block in 0..count {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let prefix = format!("stage{}.block{}", stage + 1, block);
            cur = bottleneck(
                &mut b, cur, &prefix, c_in, c_mid, c_out, stride, op, &ctx_block, rng,
            )?;
            c_in = c_out;
        }
    }

    // Head.
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

/// Ablation rows: which branch accompanies the LSA branch at each site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationRow {
    LsaOnly,
    ConvSmall,
    ConvLarge,
    FullDcdc,
}

impl AblationRow {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lsa" | "lsa-only" => Ok(AblationRow::LsaOnly),
            "conv_small" | "conv-small" => Ok(AblationRow::ConvSmall),
            "conv_large" | "conv-large" => Ok(AblationRow::ConvLarge),
            "dcdc" | "full" => Ok(AblationRow::FullDcdc),
            other => Err(Error::Config(format!("unknown ablation row {other}"))),
        }
    }
}

/// Returns the spec matching an ablation row.
pub fn ablation_variant(spec: &ModelSpec, row: AblationRow) -> ModelSpec {
    let operator = match row {
        AblationRow::LsaOnly => "lsa",
        AblationRow::ConvSmall => "lsa+conv_small",
        AblationRow::ConvLarge => "lsa+conv_large",
        AblationRow::FullDcdc => "dcdc",
    };
    ModelSpec {
        operator: operator.to_string(),
        ..spec.clone()
    }
}

/// Parses the UTF-8 `key = value` model config grammar. Recognised keys:
/// depth, operator, k_lsa, k_lsa_dw, k_gsi, lambda, alpha, group_size,
/// n_pairs, num_classes. Lines starting with `#` and blank lines are
/// ignored; unknown keys are rejected.
pub fn parse_model_config(text: &str) -> Result<ModelSpec> {
    let kv = parse_kv(text)?;
    let mut spec = ModelSpec::default();
    apply_model_keys(&mut spec, &kv, true)?;
    Ok(spec)
}

/// Splits config text into an ordered key/value map.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value, got {line:?}", lineno + 1))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

pub const MODEL_KEYS: [&str; 10] = [
    "depth",
    "operator",
    "k_lsa",
    "k_lsa_dw",
    "k_gsi",
    "lambda",
    "alpha",
    "group_size",
    "n_pairs",
    "num_classes",
];

/// Applies model keys from a parsed map. With `strict` set, any key outside
/// the documented model grammar is an error.
pub fn apply_model_keys(
    spec: &mut ModelSpec,
    kv: &BTreeMap<String, String>,
    strict: bool,
) -> Result<()> {
    for (key, value) in kv {
        let unknown = || Error::Config(format!("unknown key {key}"));
        let bad = |what: &str| Error::Config(format!("bad {what} value {value:?}"));
        match key.as_str() {
            "depth" => spec.depth = value.parse().map_err(|_| bad("depth"))?,
            "operator" => spec.operator = value.clone(),
            "k_lsa" => spec.lsa.k_lsa = value.parse().map_err(|_| bad("k_lsa"))?,
            "k_lsa_dw" => spec.lsa.k_dw = value.parse().map_err(|_| bad("k_lsa_dw"))?,
            "k_gsi" => spec.gsi.k_gsi = value.parse().map_err(|_| bad("k_gsi"))?,
            "lambda" => spec.gsi.lambda = value.parse().map_err(|_| bad("lambda"))?,
            "alpha" => spec.lsa.alpha = value.parse().map_err(|_| bad("alpha"))?,
            "group_size" => spec.lsa.group_size = value.parse().map_err(|_| bad("group_size"))?,
            "n_pairs" => spec.lsa.n_pairs = value.parse().map_err(|_| bad("n_pairs"))?,
            "num_classes" => spec.num_classes = value.parse().map_err(|_| bad("num_classes"))?,
            _ => {
                if strict {
                    return Err(unknown());
                }
            }
        }
    }
    stage_blocks(spec.depth)?;
    Ok(())
}

impl ModelSpec {
    /// Resolved config in the same grammar the parser accepts.
    pub fn to_config_string(&self) -> String {
        format!(
            "depth = {}\noperator = {}\nk_lsa = {}\nk_lsa_dw = {}\nk_gsi = {}\nlambda = {}\nalpha = {}\ngroup_size = {}\nn_pairs = {}\nnum_classes = {}\n",
            self.depth,
            self.operator,
            self.lsa.k_lsa,
            self.lsa.k_dw,
            self.gsi.k_gsi,
            self.gsi.lambda,
            self.lsa.alpha,
            self.lsa.group_size,
            self.lsa.n_pairs,
            self.num_classes
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Phase;

    #[test]
    fn depth_table() {
        assert_eq!(stage_blocks(26).unwrap(), [1, 2, 4, 1]);
        assert_eq!(stage_blocks(38).unwrap(), [2, 3, 5, 2]);
        assert_eq!(stage_blocks(50).unwrap(), [3, 4, 6, 3]);
        assert_eq!(stage_blocks(101).unwrap(), [3, 4, 23, 3]);
        assert!(stage_blocks(18).is_err());
    }

    #[test]
    fn vanilla_26_param_count_near_reference() {
        let spec = ModelSpec {
            operator: "vanilla".into(),
            ..Default::default()
        };
        let g = build_model::<f64>(&spec, &mut Rng::new(1)).unwrap();
        let params = g.param_count() as f64;
        let target = 13.7e6;
        assert!(
            (params - target).abs() / target < 0.15,
            "vanilla-26 params {params}"
        );
    }

    #[test]
    fn dcdc_26_param_count_near_reference() {
        let spec = ModelSpec::default();
        let g = build_model::<f64>(&spec, &mut Rng::new(1)).unwrap();
        let params = g.param_count() as f64;
        let target = 9.36e6;
        assert!(
            (params - target).abs() / target < 0.15,
            "dcdc-26 params {params}"
        );
    }

    #[test]
    fn forward_shape_contract() {
        let spec = ModelSpec {
            num_classes: 2,
            ..Default::default()
        };
        let g = build_model::<f64>(&spec, &mut Rng::new(2)).unwrap();
        let x = crate::verify::randn(&[2, 3, 32, 32], &mut Rng::new(3));
        let (y, _) = g.forward(&x, Phase::Eval).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        let x64 = crate::verify::randn(&[1, 3, 64, 64], &mut Rng::new(4));
        let (y64, _) = g.forward(&x64, Phase::Eval).unwrap();
        assert_eq!(y64.shape(), &[1, 2]);
    }

    #[test]
    fn ablation_param_ordering() {
        let base = ModelSpec::default();
        let mut rng = || Rng::new(7);
        let count = |row| {
            let spec = ablation_variant(&base, row);
            build_model::<f64>(&spec, &mut rng()).unwrap().param_count()
        };
        let lsa = count(AblationRow::LsaOnly);
        let small = count(AblationRow::ConvSmall);
        let full = count(AblationRow::FullDcdc);
        let large = count(AblationRow::ConvLarge);
        assert!(lsa < small, "{lsa} !< {small}");
        assert!(small < full, "{small} !< {full}");
        assert!(full < large, "{full} !< {large}");
        // Row targets (reference scale: 9.26, 9.34, 9.36, 14.32 million).
        for (count, target) in [
            (lsa, 9.26e6),
            (small, 9.34e6),
            (full, 9.36e6),
            (large, 14.32e6),
        ] {
            assert!(
                (count as f64 - target).abs() / target < 0.15,
                "{count} vs {target}"
            );
        }
    }

    #[test]
    fn deterministic_build() {
        let spec = ModelSpec {
            num_classes: 10,
            ..Default::default()
        };
        let g1 = build_model::<f64>(&spec, &mut Rng::new(9)).unwrap();
        let g2 = build_model::<f64>(&spec, &mut Rng::new(9)).unwrap();
        let p1 = g1.named_params();
        let p2 = g2.named_params();
        assert_eq!(p1.len(), p2.len());
        for ((n1, t1, _), (n2, t2, _)) in p1.iter().zip(p2.iter()) {
            assert_eq!(n1, n2);
            for (a, b) in t1.data().iter().zip(t2.data().iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn config_roundtrip_and_unknown_key() {
        let text = "depth = 38\noperator = lsa\nk_lsa = 5\nnum_classes = 10\n";
        let spec = parse_model_config(text).unwrap();
        assert_eq!(spec.depth, 38);
        assert_eq!(spec.operator, "lsa");
        assert_eq!(spec.lsa.k_lsa, 5);
        assert_eq!(spec.num_classes, 10);
        let reparsed = parse_model_config(&spec.to_config_string()).unwrap();
        assert_eq!(reparsed.depth, spec.depth);
        assert!(parse_model_config("frobnicate = 3\n").is_err());
        assert!(parse_model_config("depth: 26\n").is_err());
    }

    #[test]
    fn unknown_operator_rejected() {
        let spec = ModelSpec {
            operator: "wavelet".into(),
            ..Default::default()
        };
        assert!(build_model::<f64>(&spec, &mut Rng::new(1)).is_err());
    }
}
