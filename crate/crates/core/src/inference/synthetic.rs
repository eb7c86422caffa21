//! Data simulated directly from the smoothing model, for calibration checks.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{AreaDesign, FitData};
use crate::design::NegBinomial;
use crate::error::Result;
use crate::rng::SimRng;
use crate::spatial::{Bym2Params, ScaledIcar};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub beta: Vec<f64>,
    pub gamma: f64,
    pub eta: Vec<f64>,
    pub theta: Vec<f64>,
    pub sigma2: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub beta: Vec<f64>,
    pub gamma: f64,
    pub eta: Vec<f64>,
    pub sd_b: f64,
    pub phi_b: f64,
    pub sd_e: f64,
    /// Range of sampled clusters per area (inclusive).
    pub clusters: (usize, usize),
    pub cluster_size: NegBinomial,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            beta: crate::frame::BETA_TRUE.to_vec(),
            gamma: 1.0,
            eta: crate::frame::ETA_TRUE.to_vec(),
            sd_b: crate::frame::SD_B_TRUE,
            phi_b: crate::frame::PHI_TRUE,
            sd_e: crate::frame::SD_E_TRUE,
            clusters: (4, 20),
            cluster_size: NegBinomial { size: 4.0, mean: 11.0 },
        }
    }
}

/// Draws covariates, latent effects and direct estimates from the
/// simple-distribution model with an unstructured variance effect:
/// `theta_hat ~ N(theta, sigma2/n)`, `V_hat ~ sigma2/(n d) chi2_d`, `d = m - 1`.
pub fn simulate_simple_unstruct(icar: &ScaledIcar, config: &SyntheticConfig, rng: &mut SimRng) -> Result<(FitData, SyntheticTruth)> {
    let k = icar.len();
    let px = config.beta.len();
    let pz = config.eta.len();
    let n01 = |rng: &mut SimRng| -> f64 { rng.sample(StandardNormal) };
    let x = DMatrix::from_fn(k, px, |_, c| if c == 0 { 1.0 } else { n01(rng) });
    let z = DMatrix::from_fn(k, pz, |_, c| if c == 0 { 1.0 } else { n01(rng) });
    let urban: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
    let b = Bym2Params::draw(icar, config.sd_b.powi(-2), config.phi_b, rng).effect();
    let mut theta = Vec::with_capacity(k);
    let mut sigma2 = Vec::with_capacity(k);
    let mut theta_hat = Vec::with_capacity(k);
    let mut v_hat = Vec::with_capacity(k);
    let mut design = Vec::with_capacity(k);
    for i in 0..k {
        let xb: f64 = (0..px).map(|j| x[(i, j)] * config.beta[j]).sum();
        let t = xb + urban[i] * config.gamma + b[i];
        let zeta: f64 = (0..pz).map(|j| z[(i, j)] * config.eta[j]).sum();
        let s2 = (zeta + config.sd_e * n01(rng)).exp();
        let m = rng.random_range(config.clusters.0..=config.clusters.1);
        let n_total: f64 = (0..m)
            .map(|_| loop {
                let n = config.cluster_size.sample(rng);
                if n > 0 {
                    break n as f64;
                }
            })
            .sum();
        let d = (m - 1) as f64;
        theta_hat.push(t + (s2 / n_total).sqrt() * n01(rng));
        let chi = ChiSquared::new(d).expect("positive df").sample(rng);
        v_hat.push(s2 / (n_total * d) * chi);
        theta.push(t);
        sigma2.push(s2);
        design.push(Some(AreaDesign { n_total, simple_df: Some(d), eig: None }));
    }
    let data = FitData {
        theta_hat,
        v_hat,
        estimable: vec![true; k],
        x,
        urban_prop: urban,
        z,
        icar: icar.clone(),
        design,
        empirical_variance: None,
    };
    let truth = SyntheticTruth { beta: config.beta.clone(), gamma: config.gamma, eta: config.eta.clone(), theta, sigma2 };
    Ok((data, truth))
}
