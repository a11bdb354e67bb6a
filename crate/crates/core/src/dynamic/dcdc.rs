//! The combined operator: sum of the LSA and GSI branch outputs.

use super::gsi::{gsi_forward_cached, gsi_vjp_cached, GsiCache, GsiConfig, GsiGrads, GsiWeights};
use super::lsa::{
    lsa_forward_cached, lsa_vjp_cached, LsaCache, LsaConfig, LsaPredictorGrads,
    LsaPredictorWeights,
};
use crate::error::{Error, Result};
use crate::norm::BnMode;
use crate::tensor::{Element, Tensor};

pub struct DcdcCache<T: Element> {
    pub lsa: LsaCache<T>,
    pub gsi: GsiCache<T>,
}

/// `y = lsa(x) + gsi(x)`. Both branches must be configured with the same
/// stride so their output extents match.
pub fn dcdc_forward<T: Element>(
    x: &Tensor<T>,
    theta: &LsaPredictorWeights<T>,
    gamma: &GsiWeights<T>,
    lsa_cfg: &LsaConfig,
    gsi_cfg: &GsiConfig,
    mode: BnMode,
) -> Result<Tensor<T>> {
    let (y, _) = dcdc_forward_cached(x, theta, gamma, lsa_cfg, gsi_cfg, mode)?;
    Ok(y)
}

pub fn dcdc_forward_cached<T: Element>(
    x: &Tensor<T>,
    theta: &LsaPredictorWeights<T>,
    gamma: &GsiWeights<T>,
    lsa_cfg: &LsaConfig,
    gsi_cfg: &GsiConfig,
    mode: BnMode,
) -> Result<(Tensor<T>, DcdcCache<T>)> {
    if lsa_cfg.stride != gsi_cfg.stride {
        return Err(Error::Config(format!(
            "branch strides differ: lsa {} vs gsi {}",
            lsa_cfg.stride, gsi_cfg.stride
        )));
    }
    let (y_lsa, lsa_cache) = lsa_forward_cached(x, theta, lsa_cfg, mode)?;
    let (y_gsi, gsi_cache) = gsi_forward_cached(x, gamma, gsi_cfg)?;
    if y_lsa.shape() != y_gsi.shape() {
        return Err(Error::ShapeMismatch(format!(
            "branch outputs differ: lsa {:?} vs gsi {:?}",
            y_lsa.shape(),
            y_gsi.shape()
        )));
    }
    let y = y_lsa.add(&y_gsi)?;
    Ok((
        y,
        DcdcCache {
            lsa: lsa_cache,
            gsi: gsi_cache,
        },
    ))
}

/// Gradients of the sum: the input gradient is the sum of both branch input
/// gradients; parameter gradients stay per branch.
pub fn dcdc_vjp<T: Element>(
    x: &Tensor<T>,
    theta: &LsaPredictorWeights<T>,
    gamma: &GsiWeights<T>,
    lsa_cfg: &LsaConfig,
    gsi_cfg: &GsiConfig,
    mode: BnMode,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, LsaPredictorGrads<T>, GsiGrads<T>)> {
    let (_, cache) = dcdc_forward_cached(x, theta, gamma, lsa_cfg, gsi_cfg, mode)?;
    dcdc_vjp_cached(x, theta, gamma, lsa_cfg, gsi_cfg, &cache, dy)
}

pub fn dcdc_vjp_cached<T: Element>(
    x: &Tensor<T>,
    theta: &LsaPredictorWeights<T>,
    gamma: &GsiWeights<T>,
    lsa_cfg: &LsaConfig,
    gsi_cfg: &GsiConfig,
    cache: &DcdcCache<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, LsaPredictorGrads<T>, GsiGrads<T>)> {
    let (dx_lsa, dtheta) = lsa_vjp_cached(x, theta, lsa_cfg, &cache.lsa, dy)?;
    let (dx_gsi, dgamma) = gsi_vjp_cached(x, gamma, gsi_cfg, &cache.gsi, dy)?;
    Ok((dx_lsa.add(&dx_gsi)?, dtheta, dgamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamic::gsi::init_gsi_weights;
    use crate::dynamic::lsa::{init_lsa_predictor, lsa_op_forward};
    use crate::dynamic::gsi::gsi_forward;
    use crate::rng::Rng;
    use crate::verify::randn;

    fn small_cfgs(stride: usize) -> (LsaConfig, GsiConfig) {
        (
            LsaConfig {
                k_lsa: 3,
                k_dw: 3,
                n_pairs: 2,
                alpha: 0.25,
                group_size: 2,
                stride,
            },
            GsiConfig {
                k_gsi: 1,
                lambda: 1.0,
                stride,
            },
        )
    }

    #[test]
    fn zero_gsi_collapses_to_lsa_branch() {
        let (lsa_cfg, gsi_cfg) = small_cfgs(1);
        let mut rng = Rng::new(41);
        let theta = init_lsa_predictor::<f64>(4, &lsa_cfg, &mut rng, false, false).unwrap();
        let gamma = init_gsi_weights::<f64>(4, &gsi_cfg, &mut rng, true).unwrap();
        let x = randn(&[1, 4, 4, 4], &mut rng);
        let y = dcdc_forward(&x, &theta, &gamma, &lsa_cfg, &gsi_cfg, BnMode::Batch).unwrap();
        let y_lsa = lsa_op_forward(&x, &theta, &lsa_cfg, BnMode::Batch).unwrap();
        assert_eq!(y, y_lsa);
    }

    #[test]
    fn zero_lsa_collapses_to_gsi_branch() {
        let (lsa_cfg, gsi_cfg) = small_cfgs(1);
        let mut rng = Rng::new(42);
        let theta = init_lsa_predictor::<f64>(4, &lsa_cfg, &mut rng, false, true).unwrap();
        let gamma = init_gsi_weights::<f64>(4, &gsi_cfg, &mut rng, false).unwrap();
        let x = randn(&[1, 4, 4, 4], &mut rng);
        let y = dcdc_forward(&x, &theta, &gamma, &lsa_cfg, &gsi_cfg, BnMode::Batch).unwrap();
        let y_gsi = gsi_forward(&x, &gamma, &gsi_cfg).unwrap();
        assert_eq!(y, y_gsi);
    }

    #[test]
    fn sum_of_branches_exact() {
        for stride in [1usize, 2] {
            let (lsa_cfg, gsi_cfg) = small_cfgs(stride);
            let mut rng = Rng::new(43);
            let theta = init_lsa_predictor::<f64>(4, &lsa_cfg, &mut rng, false, false).unwrap();
            let gamma = init_gsi_weights::<f64>(4, &gsi_cfg, &mut rng, false).unwrap();
            let x = randn(&[2, 4, 5, 5], &mut rng);
            let y = dcdc_forward(&x, &theta, &gamma, &lsa_cfg, &gsi_cfg, BnMode::Batch).unwrap();
            let y_lsa = lsa_op_forward(&x, &theta, &lsa_cfg, BnMode::Batch).unwrap();
            let y_gsi = gsi_forward(&x, &gamma, &gsi_cfg).unwrap();
            let expect = y_lsa.add(&y_gsi).unwrap();
            assert_eq!(y, expect, "stride {stride}");
        }
    }

    #[test]
    fn mismatched_strides_rejected() {
        let (lsa_cfg, _) = small_cfgs(1);
        let (_, gsi_cfg) = small_cfgs(2);
        let mut rng = Rng::new(44);
        let theta = init_lsa_predictor::<f64>(4, &lsa_cfg, &mut rng, false, false).unwrap();
        let gamma = init_gsi_weights::<f64>(4, &gsi_cfg, &mut rng, false).unwrap();
        let x = randn(&[1, 4, 4, 4], &mut rng);
        assert!(dcdc_forward(&x, &theta, &gamma, &lsa_cfg, &gsi_cfg, BnMode::Batch).is_err());
    }

    #[test]
    fn zero_dy_gives_zero_grads() {
        let (lsa_cfg, gsi_cfg) = small_cfgs(1);
        let mut rng = Rng::new(45);
        let theta = init_lsa_predictor::<f64>(4, &lsa_cfg, &mut rng, false, false).unwrap();
        let gamma = init_gsi_weights::<f64>(4, &gsi_cfg, &mut rng, false).unwrap();
        let x = randn(&[1, 4, 4, 4], &mut rng);
        let dy = crate::tensor::Tensor::zeros(&[1, 4, 4, 4]);
        let (dx, dtheta, dgamma) =
            dcdc_vjp(&x, &theta, &gamma, &lsa_cfg, &gsi_cfg, BnMode::Batch, &dy).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dtheta.stages[0].pw.data().iter().all(|&v| v == 0.0));
        assert!(dgamma.pw2_w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sample_specificity_of_predicted_kernels() {
        // Generic inputs under generic weights give different kernels.
        let (lsa_cfg, gsi_cfg) = small_cfgs(1);
        let mut rng = Rng::new(46);
        let theta = init_lsa_predictor::<f64>(4, &lsa_cfg, &mut rng, false, false).unwrap();
        let gamma = init_gsi_weights::<f64>(4, &gsi_cfg, &mut rng, false).unwrap();
        let x1 = randn(&[1, 4, 4, 4], &mut rng);
        let x2 = randn(&[1, 4, 4, 4], &mut rng);
        let f1 = crate::dynamic::lsa_predict(&x1, &theta, &lsa_cfg, BnMode::Batch).unwrap();
        let f2 = crate::dynamic::lsa_predict(&x2, &theta, &lsa_cfg, BnMode::Batch).unwrap();
        let max_diff = f1
            .tensor
            .data()
            .iter()
            .zip(f2.tensor.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-6);
        let k1 = crate::dynamic::gsi_predict(&x1, &gamma, &gsi_cfg).unwrap();
        let k2 = crate::dynamic::gsi_predict(&x2, &gamma, &gsi_cfg).unwrap();
        let max_diff = k1
            .tensor
            .data()
            .iter()
            .zip(k2.tensor.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-6);
    }
}
