use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{ModelVariant, PriorConfig, SamplingDist, VarianceLatent};
use crate::design::AreaSample;
use crate::distributions::{sasw_eigensystem, simple_scale_df, SaswEigensystem, SimpleDf};
use crate::error::{Error, Result};
use crate::estimators::DesignEstimate;
use crate::numeric::{normal_logpdf, scaled_chi2_logpdf};
use crate::spatial::{bym2_effect, bym2_logdensity, BetaPrior, PcPrecPrior, ScaledIcar};

/// Design information needed by the variance likelihoods of one area.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AreaDesign {
    /// Total number of sampled individuals.
    pub n_total: f64,
    /// Simple-distribution degrees of freedom; `None` when zero.
    pub simple_df: Option<f64>,
    /// SASW eigensystem; `None` when it has no nonzero eigenvalue.
    pub eig: Option<SaswEigensystem>,
}

impl AreaDesign {
    pub fn from_sample(area: &AreaSample, mode: SimpleDf) -> Result<Self> {
        let n_total = area.clusters().map(|c| c.n as f64).sum();
        let simple_df = simple_scale_df(area, mode).ok().map(|(_, d)| d);
        let eig = match sasw_eigensystem(area) {
            Ok(e) if e.rank() > 0 => Some(e),
            Ok(_) | Err(Error::EmptyDomain(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self { n_total, simple_df, eig })
    }

    /// Theoretical design variance `v_i(sigma2)` for a sampling distribution.
    pub fn plug_in_variance(&self, dist: SamplingDist, sigma2: f64) -> Option<f64> {
        match dist {
            SamplingDist::Simple => (self.n_total > 0.0).then(|| sigma2 / self.n_total),
            SamplingDist::Sasw => self.eig.as_ref().map(|e| e.v_star(sigma2)),
        }
    }
}

/// Log density of `V_hat` under the configured sampling distribution.
/// Returns `None` when the area carries no variance information.
pub fn area_variance_loglik(
    dist: SamplingDist,
    design: &AreaDesign,
    v_hat: f64,
    gamma: f64,
    sigma2: f64,
) -> Option<f64> {
    if !(v_hat > 0.0) {
        return None;
    }
    match dist {
        SamplingDist::Simple => {
            let d = design.simple_df?;
            Some(scaled_chi2_logpdf(v_hat, sigma2 / (design.n_total * d), d))
        }
        SamplingDist::Sasw => {
            let e = design.eig.as_ref()?;
            let g2 = gamma * gamma / sigma2;
            let (mut q1, mut q2) = (0.0, 0.0);
            for (q, a) in e.q.iter().zip(&e.a) {
                let d = g2 * a;
                q1 += q * (1.0 + d);
                q2 += q * q * (1.0 + 2.0 * d);
            }
            q2 *= 2.0;
            let scale = q2 * sigma2 / (2.0 * q1 * e.sum_wstar * e.sum_wstar);
            Some(scaled_chi2_logpdf(v_hat, scale, 2.0 * q1 * q1 / q2))
        }
    }
}

/// Everything a fit needs. `x` and `z` include a leading intercept column.
#[derive(Debug, Clone)]
pub struct FitData {
    pub theta_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub estimable: Vec<bool>,
    pub x: DMatrix<f64>,
    pub urban_prop: Vec<f64>,
    pub z: DMatrix<f64>,
    pub icar: ScaledIcar,
    pub design: Vec<Option<AreaDesign>>,
    pub empirical_variance: Option<Vec<Option<f64>>>,
}

impl FitData {
    pub fn new(
        estimates: &[DesignEstimate],
        x: DMatrix<f64>,
        urban_prop: Vec<f64>,
        z: DMatrix<f64>,
        icar: ScaledIcar,
    ) -> Result<Self> {
        let k = estimates.len();
        for (i, e) in estimates.iter().enumerate() {
            if e.area != i {
                return Err(Error::ModelData(format!("estimate row {i} is for area {}", e.area)));
            }
        }
        let data = Self {
            theta_hat: estimates.iter().map(|e| e.theta_hat).collect(),
            v_hat: estimates.iter().map(|e| e.v_hat).collect(),
            estimable: estimates.iter().map(|e| e.estimable).collect(),
            x,
            urban_prop,
            z,
            icar,
            design: vec![None; k],
            empirical_variance: None,
        };
        data.check_dims()?;
        Ok(data)
    }

    pub fn with_design(mut self, areas: &[AreaSample], mode: SimpleDf) -> Result<Self> {
        if areas.len() != self.n_areas() {
            return Err(Error::ModelData(format!("{} area samples for {} areas", areas.len(), self.n_areas())));
        }
        self.design = areas
            .iter()
            .map(|a| if a.m_dot() == 0 { Ok(None) } else { AreaDesign::from_sample(a, mode).map(Some) })
            .collect::<Result<_>>()?;
        Ok(self)
    }

    pub fn with_empirical_variance(mut self, v: Vec<Option<f64>>) -> Self {
        self.empirical_variance = Some(v);
        self
    }

    pub fn n_areas(&self) -> usize {
        self.theta_hat.len()
    }

    /// Columns of the mean-model design: covariates then the urban share.
    pub fn n_mean_coef(&self) -> usize {
        self.x.ncols() + 1
    }

    fn check_dims(&self) -> Result<()> {
        let k = self.n_areas();
        let bad = self.v_hat.len() != k
            || self.estimable.len() != k
            || self.x.nrows() != k
            || self.z.nrows() != k
            || self.urban_prop.len() != k
            || self.icar.len() != k;
        if bad {
            return Err(Error::ModelData(format!(
                "inconsistent dimensions: K = {k}, X {}x{}, Z {}x{}, urban {}, graph {}",
                self.x.nrows(),
                self.x.ncols(),
                self.z.nrows(),
                self.z.ncols(),
                self.urban_prop.len(),
                self.icar.len()
            )));
        }
        if self.x.ncols() == 0 || self.z.ncols() == 0 {
            return Err(Error::ModelData("design matrices need an intercept column".into()));
        }
        if self.x.iter().chain(self.z.iter()).chain(self.urban_prop.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariates".into()));
        }
        Ok(())
    }

    pub fn validate(&self, variant: ModelVariant) -> Result<()> {
        self.check_dims()?;
        if self.design.len() != self.n_areas() {
            return Err(Error::ModelData("design information length mismatch".into()));
        }
        for (i, d) in self.design.iter().enumerate() {
            if let Some(e) = d.as_ref().and_then(|d| d.eig.as_ref()) {
                if e.area != i {
                    return Err(Error::ModelData(format!("eigensystem for area {} stored at {i}", e.area)));
                }
            }
        }
        match variant {
            ModelVariant::Oracle => match &self.empirical_variance {
                Some(v) if v.len() == self.n_areas() => {}
                _ => return Err(Error::ModelData("oracle model needs empirical variances".into())),
            },
            ModelVariant::Smooth { .. } => {
                if let Some(i) = (0..self.n_areas()).find(|&i| self.estimable[i] && self.design[i].is_none()) {
                    return Err(Error::ModelData(format!(
                        "smoothing model needs cluster-level design information (area {i})"
                    )));
                }
            }
            ModelVariant::Standard => {}
        }
        if self.mean_obs(variant).is_empty() {
            return Err(Error::ModelData("no area contributes to the likelihood".into()));
        }
        Ok(())
    }

    /// Areas entering the mean likelihood.
    pub fn mean_obs(&self, variant: ModelVariant) -> Vec<usize> {
        (0..self.n_areas())
            .filter(|&i| self.estimable[i] && self.theta_hat[i].is_finite())
            .filter(|&i| match variant {
                ModelVariant::Standard => self.v_hat[i] > 0.0,
                ModelVariant::Oracle => self
                    .empirical_variance
                    .as_ref()
                    .and_then(|v| v[i])
                    .is_some_and(|v| v > 0.0),
                ModelVariant::Smooth { dist, .. } => self.design[i]
                    .as_ref()
                    .and_then(|d| d.plug_in_variance(dist, 1.0))
                    .is_some(),
            })
            .collect()
    }

    /// Mean-likelihood variance for fixed-variance models.
    pub fn fixed_variance(&self, variant: ModelVariant, i: usize) -> Option<f64> {
        match variant {
            ModelVariant::Standard => Some(self.v_hat[i]),
            ModelVariant::Oracle => self.empirical_variance.as_ref().and_then(|v| v[i]),
            ModelVariant::Smooth { .. } => None,
        }
    }

    /// Mean plus variance log likelihood of a smooth-model area.
    pub fn smooth_area_loglik(&self, dist: SamplingDist, i: usize, theta: f64, sigma2: f64, gamma: f64) -> f64 {
        let Some(design) = self.design[i].as_ref() else { return 0.0 };
        let Some(v) = design.plug_in_variance(dist, sigma2) else { return 0.0 };
        let mut ll = normal_logpdf(self.theta_hat[i], theta, v);
        if let Some(lv) = area_variance_loglik(dist, design, self.v_hat[i], gamma, sigma2) {
            ll += lv;
        }
        ll
    }

    pub fn mean_design(&self) -> DMatrix<f64> {
        let (k, p) = (self.n_areas(), self.x.ncols());
        DMatrix::from_fn(k, p + 1, |r, c| if c < p { self.x[(r, c)] } else { self.urban_prop[r] })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceLatentParams {
    pub eta: Vec<f64>,
    /// Standard-normal coordinates of the structured field (empty when
    /// unstructured).
    pub z_e: Vec<f64>,
    pub v_e: Vec<f64>,
    pub tau_e: f64,
    pub phi_e: f64,
}

impl VarianceLatentParams {
    pub fn effect(&self, icar: &ScaledIcar, latent: VarianceLatent) -> Vec<f64> {
        match latent {
            VarianceLatent::Structured => {
                bym2_effect(&icar.field_from_coords(&self.z_e), &self.v_e, self.tau_e, self.phi_e)
            }
            VarianceLatent::Unstructured => self.v_e.iter().map(|v| v / self.tau_e.sqrt()).collect(),
        }
    }

    pub fn log_sigma2(&self, data: &FitData, latent: VarianceLatent) -> Vec<f64> {
        let e = self.effect(&data.icar, latent);
        (0..data.n_areas())
            .map(|i| (0..data.z.ncols()).map(|j| data.z[(i, j)] * self.eta[j]).sum::<f64>() + e[i])
            .collect()
    }
}

/// Parameters on their natural scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: Vec<f64>,
    pub gamma: f64,
    /// Structured mean-model field (sum to zero).
    pub u_b: Vec<f64>,
    pub v_b: Vec<f64>,
    pub tau_b: f64,
    pub phi_b: f64,
    pub variance: Option<VarianceLatentParams>,
}

impl ModelParams {
    pub fn b(&self) -> Vec<f64> {
        bym2_effect(&self.u_b, &self.v_b, self.tau_b, self.phi_b)
    }

    pub fn theta(&self, data: &FitData) -> Vec<f64> {
        let b = self.b();
        (0..data.n_areas())
            .map(|i| {
                (0..data.x.ncols()).map(|j| data.x[(i, j)] * self.beta[j]).sum::<f64>()
                    + data.urban_prop[i] * self.gamma
                    + b[i]
            })
            .collect()
    }
}

fn hyper_logprior(tau: f64, phi: Option<f64>, prior: &PriorConfig) -> f64 {
    let pc = PcPrecPrior { u: prior.pc_u, alpha: prior.pc_alpha };
    // log-scale Jacobian for tau, logit-scale Jacobian for phi
    let mut lp = pc.logdensity(tau) + tau.ln();
    if let Some(phi) = phi {
        lp += BetaPrior { a: prior.phi_a, b: prior.phi_b }.logdensity(phi) + phi.ln() + (1.0 - phi).ln();
    }
    lp
}

/// Unnormalised log posterior on the sampling scale (log precisions,
/// logit mixing parameters). Non-estimable areas contribute only through
/// their latent effects.
pub fn log_posterior(variant: ModelVariant, data: &FitData, prior: &PriorConfig, params: &ModelParams) -> Result<f64> {
    let k = data.n_areas();
    if params.beta.len() != data.x.ncols() || params.u_b.len() != k || params.v_b.len() != k {
        return Err(Error::ModelData("parameter dimensions do not match the data".into()));
    }
    let theta = params.theta(data);
    let mut lp = 0.0;
    let obs = data.mean_obs(variant);
    match variant {
        ModelVariant::Standard | ModelVariant::Oracle => {
            for &i in &obs {
                let v = data.fixed_variance(variant, i).expect("observed area has a variance");
                lp += normal_logpdf(data.theta_hat[i], theta[i], v);
            }
        }
        ModelVariant::Smooth { dist, latent } => {
            let var = params
                .variance
                .as_ref()
                .ok_or_else(|| Error::ModelData("smoothing model needs variance parameters".into()))?;
            if var.eta.len() != data.z.ncols() || var.v_e.len() != k {
                return Err(Error::ModelData("variance parameter dimensions do not match".into()));
            }
            let log_s2 = var.log_sigma2(data, latent);
            for &i in &obs {
                lp += data.smooth_area_loglik(dist, i, theta[i], log_s2[i].exp(), params.gamma);
            }
            lp += normal_logpdf(var.eta[0], prior.eta_intercept_mean, prior.eta_intercept_sd.powi(2));
            for &eta in &var.eta[1..] {
                lp += normal_logpdf(eta, 0.0, prior.regression_sd.powi(2));
            }
            lp += var.v_e.iter().map(|v| normal_logpdf(*v, 0.0, 1.0)).sum::<f64>();
            match latent {
                VarianceLatent::Structured => {
                    if var.z_e.len() != k - 1 {
                        return Err(Error::ModelData("structured coordinates must have length K-1".into()));
                    }
                    lp += var.z_e.iter().map(|z| normal_logpdf(*z, 0.0, 1.0)).sum::<f64>();
                    lp += hyper_logprior(var.tau_e, Some(var.phi_e), prior);
                }
                VarianceLatent::Unstructured => lp += hyper_logprior(var.tau_e, None, prior),
            }
        }
    }
    let sd2 = prior.regression_sd.powi(2);
    lp += params.beta.iter().map(|b| normal_logpdf(*b, 0.0, sd2)).sum::<f64>();
    lp += normal_logpdf(params.gamma, 0.0, sd2);
    lp += bym2_logdensity(&params.u_b, &params.v_b, params.tau_b, params.phi_b, &data.icar)?;
    lp += hyper_logprior(params.tau_b, Some(params.phi_b), prior);
    if lp.is_finite() {
        Ok(lp)
    } else {
        Err(Error::NonFinite("log posterior".into()))
    }
}
