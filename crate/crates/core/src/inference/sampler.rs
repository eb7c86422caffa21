//! Blocked Metropolis-within-Gibbs sampler.
//!
//! Mean block: given the hyperparameters and the mean-likelihood variances,
//! `(beta, gamma, u_b, v_b)` is Gaussian and drawn exactly by conditioning a
//! joint prior draw on the data. `(tau_b, phi_b)` move jointly with a fresh
//! mean-block draw, accepted on the marginal likelihood. For SASW the
//! variance likelihood also depends on `gamma`; it enters as an extra
//! Metropolis-Hastings factor on the mean-block draws.
//!
//! Variance block (smoothing models): non-centred `log sigma2 = Z eta + e`,
//! updated one coordinate at a time with adaptive random-walk proposals.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::diagnostics::Diagnostics;
use super::model::FitData;
use super::{ModelVariant, PriorConfig, SamplingDist, VarianceLatent};
use crate::error::{Error, Result};
use crate::numeric::{inv_logit, normal_logpdf};
use crate::rng::{stage_rng, SimRng, Stage};
use crate::spatial::{BetaPrior, PcPrecPrior};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub thin: usize,
    pub rhat_threshold: f64,
    pub ess_threshold: f64,
    pub parallel_chains: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 1000,
            draws: 1000,
            thin: 1,
            rhat_threshold: 1.05,
            ess_threshold: 100.0,
            parallel_chains: true,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.draws == 0 || self.thin == 0 {
            return Err(Error::McmcConfig(format!(
                "chains, draws and thin must be positive ({} / {} / {})",
                self.chains, self.draws, self.thin
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub variant: ModelVariant,
    pub n_areas: usize,
    pub names: Vec<String>,
    /// Per chain, draws stored row-major: `[iteration * n_params + param]`.
    pub chains: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
    /// Post-warmup acceptance rate per move type.
    pub acceptance: BTreeMap<String, f64>,
}

impl PosteriorDraws {
    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn draws_per_chain(&self) -> usize {
        self.chains.first().map_or(0, |c| c.len() / self.n_params().max(1))
    }

    pub fn n_draws(&self) -> usize {
        self.n_chains() * self.draws_per_chain()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn chain_draws(&self, param: usize) -> Vec<Vec<f64>> {
        let p = self.n_params();
        self.chains.iter().map(|c| c.iter().skip(param).step_by(p).copied().collect()).collect()
    }

    pub fn pooled_index(&self, param: usize) -> Vec<f64> {
        self.chain_draws(param).concat()
    }

    pub fn pooled(&self, name: &str) -> Result<Vec<f64>> {
        self.index_of(name)
            .map(|i| self.pooled_index(i))
            .ok_or_else(|| Error::McmcConfig(format!("no parameter named {name}")))
    }

    /// All draws of an indexed block such as `theta`, as `[draw][area]`.
    pub fn block(&self, prefix: &str) -> Vec<Vec<f64>> {
        let idx: Vec<usize> = (0..self.n_areas).filter_map(|i| self.index_of(&format!("{prefix}[{i}]"))).collect();
        let p = self.n_params();
        self.chains
            .iter()
            .flat_map(|c| c.chunks(p).map(|row| idx.iter().map(|&j| row[j]).collect::<Vec<f64>>()))
            .collect()
    }

    /// Writes every `every`-th stored draw of each chain.
    pub fn write_csv(&self, path: &std::path::Path, every: usize) -> Result<()> {
        let every = every.max(1);
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["chain".to_string(), "iteration".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        let p = self.n_params();
        for (c, chain) in self.chains.iter().enumerate() {
            for (it, row) in chain.chunks(p).enumerate().step_by(every) {
                let mut rec = vec![c.to_string(), it.to_string()];
                rec.extend(row.iter().map(|x| x.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Robbins-Monro adaptation of a log step size toward a target acceptance.
#[derive(Debug, Clone)]
struct Step {
    log_size: f64,
    target: f64,
    tries: usize,
    accepts: usize,
}

impl Step {
    fn new(size: f64, target: f64) -> Self {
        Self { log_size: size.ln(), target, tries: 0, accepts: 0 }
    }

    fn size(&self) -> f64 {
        self.log_size.exp()
    }

    fn record(&mut self, accepted: bool, iter: usize, adapt: bool) {
        if adapt {
            let rate = 1.0 / ((iter + 1) as f64).powf(0.6);
            self.log_size += rate * (f64::from(u8::from(accepted)) - self.target);
            self.log_size = self.log_size.clamp(-12.0, 4.0);
        } else {
            self.tries += 1;
            self.accepts += usize::from(accepted);
        }
    }
}

const VAR_LOCAL_SWEEPS: usize = 3;

/// Running covariance of a two-dimensional chain, used to shape proposals.
#[derive(Debug, Clone, Default)]
struct Shape2 {
    n: usize,
    mean: [f64; 2],
    m2: [[f64; 2]; 2],
}

impl Shape2 {
    fn update(&mut self, x: [f64; 2]) {
        self.n += 1;
        let d = [x[0] - self.mean[0], x[1] - self.mean[1]];
        for a in 0..2 {
            self.mean[a] += d[a] / self.n as f64;
        }
        for a in 0..2 {
            for b in 0..2 {
                self.m2[a][b] += d[a] * (x[b] - self.mean[b]);
            }
        }
    }

    /// Lower Cholesky factor of the regularised covariance (identity early on).
    fn factor(&self) -> [[f64; 2]; 2] {
        if self.n < 50 {
            return [[1.0, 0.0], [0.0, 1.0]];
        }
        let c = |a: usize, b: usize| self.m2[a][b] / (self.n - 1) as f64 + if a == b { 1e-3 } else { 0.0 };
        let l00 = c(0, 0).sqrt();
        let l10 = c(1, 0) / l00;
        let l11 = (c(1, 1) - l10 * l10).max(1e-6).sqrt();
        [[l00, 0.0], [l10, l11]]
    }
}

fn accept(rng: &mut SimRng, log_ratio: f64) -> bool {
    log_ratio.is_finite() && (log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio)
}

/// One univariate slice-sampling update (stepping out, then shrinkage).
fn slice_1d(rng: &mut SimRng, x0: f64, width: f64, logf: impl Fn(f64) -> f64) -> f64 {
    let level = logf(x0) + rng.random::<f64>().ln();
    let mut lo = x0 - width * rng.random::<f64>();
    let mut hi = lo + width;
    for _ in 0..50 {
        if logf(lo) <= level {
            break;
        }
        lo -= width;
    }
    for _ in 0..50 {
        if logf(hi) <= level {
            break;
        }
        hi += width;
    }
    for _ in 0..200 {
        let x = lo + (hi - lo) * rng.random::<f64>();
        if logf(x) > level {
            return x;
        }
        if x < x0 {
            lo = x;
        } else {
            hi = x;
        }
    }
    x0
}

fn normal(rng: &mut SimRng) -> f64 {
    rng.sample(StandardNormal)
}

/// Precomputed pieces of the Gaussian mean block. With `fixed_gamma` the
/// urban coefficient (last column) is held out of the block and handled by
/// its own update.
struct MeanBlock<'a> {
    data: &'a FitData,
    obs: Vec<usize>,
    y: DVector<f64>,
    f: DMatrix<f64>,
    f_obs: DMatrix<f64>,
    prior_var: f64,
    fsf: DMatrix<f64>,
    g_oo: DMatrix<f64>,
    g_ko: DMatrix<f64>,
    fixed_gamma: bool,
    /// Columns integrated in the block.
    nf: usize,
    x_gamma: DVector<f64>,
}

struct MeanDraw {
    alpha: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl<'a> MeanBlock<'a> {
    fn new(data: &'a FitData, obs: Vec<usize>, prior: &PriorConfig, fixed_gamma: bool) -> Self {
        let f = data.mean_design();
        let p = f.ncols();
        let nf = if fixed_gamma { p - 1 } else { p };
        let o = obs.len();
        let f_obs = DMatrix::from_fn(o, p, |r, c| f[(obs[r], c)]);
        let prior_var = prior.regression_sd.powi(2);
        let fo = f_obs.columns(0, nf);
        let fsf = fo * fo.transpose() * prior_var;
        let x_gamma = f_obs.column(p - 1).into_owned();
        let g = &data.icar.ginv;
        let g_oo = DMatrix::from_fn(o, o, |r, c| g[(obs[r], obs[c])]);
        let g_ko = DMatrix::from_fn(g.nrows(), o, |r, c| g[(r, obs[c])]);
        let y = DVector::from_iterator(o, obs.iter().map(|&i| data.theta_hat[i]));
        Self { data, obs, y, f, f_obs, prior_var, fsf, g_oo, g_ko, fixed_gamma, nf, x_gamma }
    }

    /// Response with the held-out urban term removed.
    fn response(&self, gamma: f64) -> DVector<f64> {
        if self.fixed_gamma {
            &self.y - &self.x_gamma * gamma
        } else {
            self.y.clone()
        }
    }

    fn factor(&self, tau: f64, phi: f64, d: &[f64]) -> Option<Cholesky<f64, Dyn>> {
        let mut c = &self.fsf + &self.g_oo * (phi / tau);
        for (r, dr) in d.iter().enumerate() {
            c[(r, r)] += (1.0 - phi) / tau + dr;
        }
        Cholesky::new(c)
    }

    fn marginal(&self, chol: &Cholesky<f64, Dyn>, y: &DVector<f64>) -> f64 {
        let l = chol.l_dirty();
        let log_det: f64 = (0..y.len()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
        let sol = chol.solve(y);
        -0.5 * (log_det + y.dot(&sol))
    }

    /// Exact conditional draw by perturbing a joint prior draw. `gamma` is
    /// only used (and kept) when the block holds it fixed.
    #[allow(clippy::too_many_arguments)]
    fn draw(
        &self,
        chol: &Cholesky<f64, Dyn>,
        tau: f64,
        phi: f64,
        d: &[f64],
        gamma: f64,
        rng: &mut SimRng,
    ) -> MeanDraw {
        let nf = self.nf;
        let k = self.data.n_areas();
        let sd = self.prior_var.sqrt();
        let y = self.response(gamma);
        let alpha0: Vec<f64> = (0..nf).map(|_| sd * normal(rng)).collect();
        let u0 = self.data.icar.draw_field(rng);
        let v0: Vec<f64> = (0..k).map(|_| normal(rng)).collect();
        let (a, c, s) = ((1.0 - phi).sqrt(), phi.sqrt(), 1.0 / tau.sqrt());
        let resid = DVector::from_iterator(
            self.obs.len(),
            self.obs.iter().enumerate().map(|(r, &i)| {
                let fa: f64 = (0..nf).map(|j| self.f_obs[(r, j)] * alpha0[j]).sum();
                let b = s * (a * v0[i] + c * u0[i]);
                y[r] - (fa + b + d[r].sqrt() * normal(rng))
            }),
        );
        let w = chol.solve(&resid);
        let fw = self.f_obs.columns(0, nf).transpose() * &w;
        let gw = &self.g_ko * &w;
        let mut alpha: Vec<f64> = (0..nf).map(|j| alpha0[j] + self.prior_var * fw[j]).collect();
        if self.fixed_gamma {
            alpha.push(gamma);
        }
        let u = (0..k).map(|i| u0[i] + c * s * gw[i]).collect();
        let mut v = v0;
        for (r, &i) in self.obs.iter().enumerate() {
            v[i] += a * s * w[r];
        }
        MeanDraw { alpha, u, v }
    }

    fn theta(&self, m: &MeanDraw, tau: f64, phi: f64) -> Vec<f64> {
        let (a, c, s) = ((1.0 - phi).sqrt(), phi.sqrt(), 1.0 / tau.sqrt());
        (0..self.data.n_areas())
            .map(|i| {
                let fa: f64 = (0..self.f.ncols()).map(|j| self.f[(i, j)] * m.alpha[j]).sum();
                fa + s * (a * m.v[i] + c * m.u[i])
            })
            .collect()
    }
}

struct VarState {
    eta: Vec<f64>,
    z: Vec<f64>,
    v: Vec<f64>,
    log_tau: f64,
    logit_phi: f64,
    /// Unscaled structured field `u_e` implied by `z`.
    u: Vec<f64>,
    /// `Z eta`.
    lin: Vec<f64>,
    log_s2: Vec<f64>,
    /// Per-area log likelihood at the current state.
    ll: Vec<f64>,
}

struct Chain<'a> {
    variant: ModelVariant,
    data: &'a FitData,
    prior: &'a PriorConfig,
    block: &'a MeanBlock<'a>,
    var_obs: Vec<bool>,
    rng: SimRng,
    mean: MeanDraw,
    theta: Vec<f64>,
    log_tau_b: f64,
    logit_phi_b: f64,
    var: Option<VarState>,
    steps: BTreeMap<&'static str, Step>,
    hyper_shape: Shape2,
    eta_steps: Vec<Step>,
    z_steps: Vec<Step>,
    v_steps: Vec<Step>,
}

fn hyper_prior(log_tau: f64, logit_phi: Option<f64>, prior: &PriorConfig) -> f64 {
    let tau = log_tau.exp();
    let mut lp = PcPrecPrior { u: prior.pc_u, alpha: prior.pc_alpha }.logdensity(tau) + log_tau;
    if let Some(x) = logit_phi {
        let phi = inv_logit(x);
        lp += BetaPrior { a: prior.phi_a, b: prior.phi_b }.logdensity(phi) + phi.ln() + (1.0 - phi).ln();
    }
    lp
}

impl<'a> Chain<'a> {
    fn latent(&self) -> Option<VarianceLatent> {
        self.variant.latent()
    }

    fn dist(&self) -> Option<SamplingDist> {
        self.variant.dist()
    }

    fn gamma(&self) -> f64 {
        *self.mean.alpha.last().unwrap()
    }

    /// Mean-likelihood variances for the observed areas.
    fn obs_variance(&self) -> Vec<f64> {
        match (self.dist(), &self.var) {
            (Some(dist), Some(var)) => self
                .block
                .obs
                .iter()
                .map(|&i| {
                    let design = self.data.design[i].as_ref().unwrap();
                    design.plug_in_variance(dist, var.log_s2[i].exp()).unwrap()
                })
                .collect(),
            _ => self.block.obs.iter().map(|&i| self.data.fixed_variance(self.variant, i).unwrap()).collect(),
        }
    }

    /// Sum of SASW variance log likelihoods as a function of `gamma`.
    fn gamma_loglik(&self, gamma: f64) -> f64 {
        let (Some(SamplingDist::Sasw), Some(var)) = (self.dist(), &self.var) else { return 0.0 };
        self.block
            .obs
            .iter()
            .filter(|&&i| self.var_obs[i])
            .map(|&i| {
                super::model::area_variance_loglik(
                    SamplingDist::Sasw,
                    self.data.design[i].as_ref().unwrap(),
                    self.data.v_hat[i],
                    gamma,
                    var.log_s2[i].exp(),
                )
                .unwrap_or(0.0)
            })
            .sum()
    }

    fn area_ll(&self, i: usize, log_s2: f64) -> f64 {
        match self.dist() {
            Some(dist) if self.var_obs_or_mean(i) => {
                self.data.smooth_area_loglik(dist, i, self.theta[i], log_s2.exp(), self.gamma())
            }
            _ => 0.0,
        }
    }

    fn var_obs_or_mean(&self, i: usize) -> bool {
        self.block.obs.binary_search(&i).is_ok()
    }

    fn refresh_ll(&mut self) {
        if let Some(var) = self.var.take() {
            let ll = (0..self.data.n_areas()).map(|i| self.area_ll(i, var.log_s2[i])).collect();
            self.var = Some(VarState { ll, ..var });
        }
    }

    fn mean_step(&mut self, iter: usize, adapt: bool) -> Result<()> {
        let d = self.obs_variance();
        let (tau, phi) = (self.log_tau_b.exp(), inv_logit(self.logit_phi_b));
        let chol = self
            .block
            .factor(tau, phi, &d)
            .ok_or_else(|| Error::NonFinite("mean-block covariance not positive definite".into()))?;
        let fixed = self.block.fixed_gamma;
        let y = self.block.response(self.gamma());
        let mut current = self.block.marginal(&chol, &y) + hyper_prior(self.log_tau_b, Some(self.logit_phi_b), self.prior);
        if !fixed {
            current += self.gamma_loglik(self.gamma());
        }

        // joint move of (tau_b, phi_b); a fresh block draw goes with it unless
        // gamma is held out, in which case the block is redrawn below anyway
        let step = self.steps["mean_hyper"].size();
        let l = self.hyper_shape.factor();
        let (e0, e1) = (normal(&mut self.rng), normal(&mut self.rng));
        let lt = self.log_tau_b + step * l[0][0] * e0;
        let lp = self.logit_phi_b + step * (l[1][0] * e0 + l[1][1] * e1);
        let (tau_p, phi_p) = (lt.exp(), inv_logit(lp));
        let mut accepted = false;
        if let Some(chol_p) = self.block.factor(tau_p, phi_p, &d) {
            let mut proposed = self.block.marginal(&chol_p, &y) + hyper_prior(lt, Some(lp), self.prior);
            let draw = (!fixed).then(|| self.block.draw(&chol_p, tau_p, phi_p, &d, 0.0, &mut self.rng));
            if let Some(dr) = &draw {
                proposed += self.gamma_loglik(*dr.alpha.last().unwrap());
            }
            if accept(&mut self.rng, proposed - current) {
                self.log_tau_b = lt;
                self.logit_phi_b = lp;
                if let Some(dr) = draw {
                    self.theta = self.block.theta(&dr, tau_p, phi_p);
                    self.mean = dr;
                }
                accepted = true;
            }
        }
        self.steps.get_mut("mean_hyper").unwrap().record(accepted, iter, adapt);
        if adapt {
            self.hyper_shape.update([self.log_tau_b, self.logit_phi_b]);
        }

        let (tau, phi) = (self.log_tau_b.exp(), inv_logit(self.logit_phi_b));
        let chol = self.block.factor(tau, phi, &d).expect("factorised above");
        if fixed {
            // gamma given the hyperparameters, everything else integrated out
            let cx = chol.solve(&self.block.x_gamma);
            let width = 2.0 / (self.block.x_gamma.dot(&cx) + 1.0 / self.block.prior_var).sqrt();
            let g0 = self.gamma();
            let mut rng = self.rng.clone();
            let g = slice_1d(&mut rng, g0, width, |g| {
                self.block.marginal(&chol, &self.block.response(g)) - 0.5 * g * g / self.block.prior_var
                    + self.gamma_loglik(g)
            });
            self.rng = rng;
            let draw = self.block.draw(&chol, tau, phi, &d, g, &mut self.rng);
            self.theta = self.block.theta(&draw, tau, phi);
            self.mean = draw;
            self.steps.get_mut("mean_redraw").unwrap().record(true, iter, false);
        } else {
            // fixed-hyperparameter redraw
            let draw = self.block.draw(&chol, tau, phi, &d, 0.0, &mut self.rng);
            let ratio = self.gamma_loglik(*draw.alpha.last().unwrap()) - self.gamma_loglik(self.gamma());
            let ok = accept(&mut self.rng, ratio);
            if ok {
                self.theta = self.block.theta(&draw, tau, phi);
                self.mean = draw;
            }
            self.steps.get_mut("mean_redraw").unwrap().record(ok, iter, false);
        }
        self.refresh_ll();
        Ok(())
    }

    /// Effect of a variance-state change on every area; returns the
    /// proposed per-area log variances and log likelihoods.
    fn try_var(&self, log_s2: Vec<f64>) -> (Vec<f64>, Vec<f64>, f64) {
        let var = self.var.as_ref().unwrap();
        let ll: Vec<f64> = (0..log_s2.len()).map(|i| self.area_ll(i, log_s2[i])).collect();
        let delta = ll.iter().sum::<f64>() - var.ll.iter().sum::<f64>();
        (log_s2, ll, delta)
    }

    fn effect(&self, v: &[f64], u: &[f64], log_tau: f64, logit_phi: f64) -> Vec<f64> {
        let s = (-0.5 * log_tau).exp();
        match self.latent().unwrap() {
            VarianceLatent::Structured => {
                let phi = inv_logit(logit_phi);
                let (a, c) = ((1.0 - phi).sqrt(), phi.sqrt());
                v.iter().zip(u).map(|(vi, ui)| s * (a * vi + c * ui)).collect()
            }
            VarianceLatent::Unstructured => v.iter().map(|vi| s * vi).collect(),
        }
    }

    fn variance_step(&mut self, iter: usize, adapt: bool) {
        let Some(latent) = self.latent() else { return };
        let k = self.data.n_areas();
        let pz = self.data.z.ncols();
        let structured = latent == VarianceLatent::Structured;

        // eta, one coefficient at a time
        for j in 0..pz {
            let var = self.var.as_ref().unwrap();
            let step = self.eta_steps[j].size();
            let delta = step * normal(&mut self.rng);
            let new_eta = var.eta[j] + delta;
            let log_s2: Vec<f64> = (0..k).map(|i| var.log_s2[i] + self.data.z[(i, j)] * delta).collect();
            let (mean, sd) = if j == 0 {
                (self.prior.eta_intercept_mean, self.prior.eta_intercept_sd)
            } else {
                (0.0, self.prior.regression_sd)
            };
            let prior = normal_logpdf(new_eta, mean, sd * sd) - normal_logpdf(var.eta[j], mean, sd * sd);
            let (log_s2, ll, d) = self.try_var(log_s2);
            let ok = accept(&mut self.rng, d + prior);
            if ok {
                let var = self.var.as_mut().unwrap();
                var.eta[j] = new_eta;
                for i in 0..k {
                    var.lin[i] += self.data.z[(i, j)] * delta;
                }
                var.log_s2 = log_s2;
                var.ll = ll;
            }
            self.eta_steps[j].record(ok, iter, adapt);
        }

        // structured coordinates
        if structured {
            for c in 0..k - 1 {
                let var = self.var.as_ref().unwrap();
                let delta = self.z_steps[c].size() * normal(&mut self.rng);
                let znew = var.z[c] + delta;
                let phi = inv_logit(var.logit_phi);
                let coef = delta / self.data.icar.eigenvalues[c].sqrt();
                let scale = (phi / var.log_tau.exp()).sqrt();
                let log_s2: Vec<f64> = (0..k)
                    .map(|i| var.log_s2[i] + scale * coef * self.data.icar.eigenvectors[(i, c)])
                    .collect();
                let prior = -0.5 * (znew * znew - var.z[c] * var.z[c]);
                let (log_s2, ll, d) = self.try_var(log_s2);
                let ok = accept(&mut self.rng, d + prior);
                if ok {
                    let var = self.var.as_mut().unwrap();
                    var.z[c] = znew;
                    for i in 0..k {
                        var.u[i] += coef * self.data.icar.eigenvectors[(i, c)];
                    }
                    var.log_s2 = log_s2;
                    var.ll = ll;
                }
                self.z_steps[c].record(ok, iter, adapt);
            }
        }

        // unstructured components, local effect only; cheap, so swept
        // several times per iteration
        for i in (0..VAR_LOCAL_SWEEPS).flat_map(|_| 0..k) {
            let var = self.var.as_ref().unwrap();
            let delta = self.v_steps[i].size() * normal(&mut self.rng);
            let vnew = var.v[i] + delta;
            let mult = if structured { (1.0 - inv_logit(var.logit_phi)).sqrt() } else { 1.0 };
            let ls = var.log_s2[i] + mult * (-0.5 * var.log_tau).exp() * delta;
            let ll = self.area_ll(i, ls);
            let ratio = ll - var.ll[i] - 0.5 * (vnew * vnew - var.v[i] * var.v[i]);
            let ok = accept(&mut self.rng, ratio);
            if ok {
                let var = self.var.as_mut().unwrap();
                var.v[i] = vnew;
                var.log_s2[i] = ls;
                var.ll[i] = ll;
            }
            self.v_steps[i].record(ok, iter, adapt);
        }

        // hyperparameters
        let mut moves = vec![("var_tau", true)];
        if structured {
            moves.push(("var_phi", false));
        }
        for (name, is_tau) in moves {
            let var = self.var.as_ref().unwrap();
            let step = self.steps[name].size() * normal(&mut self.rng);
            let (lt, lp) = if is_tau { (var.log_tau + step, var.logit_phi) } else { (var.log_tau, var.logit_phi + step) };
            let e = self.effect(&var.v, &var.u, lt, lp);
            let log_s2: Vec<f64> = (0..k).map(|i| var.lin[i] + e[i]).collect();
            let phi_arg = |x: f64| if structured { Some(x) } else { None };
            let prior = hyper_prior(lt, phi_arg(lp), self.prior) - hyper_prior(var.log_tau, phi_arg(var.logit_phi), self.prior);
            let (log_s2, ll, d) = self.try_var(log_s2);
            let ok = accept(&mut self.rng, d + prior);
            if ok {
                let var = self.var.as_mut().unwrap();
                var.log_tau = lt;
                var.logit_phi = lp;
                var.log_s2 = log_s2;
                var.ll = ll;
            }
            self.steps.get_mut(name).unwrap().record(ok, iter, adapt);
        }

        // rescale tau_e holding the effect e fixed: the standardised
        // components absorb the change, the likelihood is untouched, so
        // the conditional is one-dimensional and slice sampled exactly
        let var = self.var.as_ref().unwrap();
        let sq = |xs: &[f64]| xs.iter().map(|x| x * x).sum::<f64>();
        let dims = (var.v.len() + var.z.len()) as f64;
        let ss = sq(&var.v) + sq(&var.z);
        let (lt0, lp) = (var.log_tau, var.logit_phi);
        let prior = self.prior;
        let logf = |delta: f64| {
            -0.5 * ss * delta.exp() + 0.5 * dims * delta + hyper_prior(lt0 + delta, structured.then_some(lp), prior)
        };
        let delta = slice_1d(&mut self.rng, 0.0, 1.0, logf);
        let factor = (0.5 * delta).exp();
        let var = self.var.as_mut().unwrap();
        var.log_tau += delta;
        var.v.iter_mut().for_each(|x| *x *= factor);
        var.z.iter_mut().for_each(|x| *x *= factor);
        var.u.iter_mut().for_each(|x| *x *= factor);

        // trade the intercept against the unstructured effect, leaving
        // log sigma2 unchanged
        if self.data.z.ncols() > 0 {
            let var = self.var.as_ref().unwrap();
            let delta = self.steps["var_shift"].size() * normal(&mut self.rng);
            let mult = if structured { (1.0 - inv_logit(var.logit_phi)).sqrt() } else { 1.0 };
            let dv = -delta * (0.5 * var.log_tau).exp() / mult;
            let (mean, sd) = (self.prior.eta_intercept_mean, self.prior.eta_intercept_sd);
            let z0: Vec<f64> = (0..k).map(|i| self.data.z[(i, 0)]).collect();
            let ratio = normal_logpdf(var.eta[0] + delta, mean, sd * sd) - normal_logpdf(var.eta[0], mean, sd * sd)
                - 0.5 * var
                    .v
                    .iter()
                    .zip(&z0)
                    .map(|(v, z)| (v + dv * z).powi(2) - v * v)
                    .sum::<f64>();
            let ok = accept(&mut self.rng, ratio);
            if ok {
                let var = self.var.as_mut().unwrap();
                var.eta[0] += delta;
                for i in 0..k {
                    var.v[i] += dv * z0[i];
                    var.lin[i] += delta * z0[i];
                }
            }
            self.steps.get_mut("var_shift").unwrap().record(ok, iter, adapt);
        }
    }

    fn record(&self, out: &mut Vec<f64>) {
        let k = self.data.n_areas();
        let px = self.data.x.ncols();
        out.extend_from_slice(&self.mean.alpha[..px]);
        out.push(self.gamma());
        let (tau_b, phi_b) = (self.log_tau_b.exp(), inv_logit(self.logit_phi_b));
        out.push(tau_b);
        out.push(phi_b);
        if let (Some(var), Some(latent)) = (&self.var, self.latent()) {
            out.extend_from_slice(&var.eta);
            out.push(var.log_tau.exp());
            if latent == VarianceLatent::Structured {
                out.push(inv_logit(var.logit_phi));
            }
        }
        out.extend_from_slice(&self.theta);
        if let Some(var) = &self.var {
            out.extend(var.log_s2.iter().map(|x| x.exp()));
        }
        let (a, c, s) = ((1.0 - phi_b).sqrt(), phi_b.sqrt(), 1.0 / tau_b.sqrt());
        out.extend((0..k).map(|i| s * (a * self.mean.v[i] + c * self.mean.u[i])));
        out.extend_from_slice(&self.mean.u);
        out.extend_from_slice(&self.mean.v);
        if let Some(var) = &self.var {
            out.extend((0..k).map(|i| var.log_s2[i] - var.lin[i]));
        }
    }
}

fn parameter_names(variant: ModelVariant, data: &FitData) -> Vec<String> {
    let k = data.n_areas();
    let mut names: Vec<String> = (0..data.x.ncols()).map(|j| format!("beta[{j}]")).collect();
    names.extend(["gamma".to_string(), "tau_b".to_string(), "phi_b".to_string()]);
    if let Some(latent) = variant.latent() {
        names.extend((0..data.z.ncols()).map(|j| format!("eta[{j}]")));
        names.push("tau_e".into());
        if latent == VarianceLatent::Structured {
            names.push("phi_e".into());
        }
    }
    let mut blocks = vec!["theta"];
    if variant.is_smooth() {
        blocks.push("sigma2");
    }
    blocks.extend(["b", "u", "v"]);
    if variant.is_smooth() {
        blocks.push("e");
    }
    for b in blocks {
        names.extend((0..k).map(|i| format!("{b}[{i}]")));
    }
    names
}

fn init_chain<'a>(
    variant: ModelVariant,
    data: &'a FitData,
    prior: &'a PriorConfig,
    block: &'a MeanBlock<'a>,
    seed: u64,
    chain: usize,
) -> Chain<'a> {
    let k = data.n_areas();
    let mut init = stage_rng(seed, Stage::Init, &[chain as u64]);
    let ys: Vec<f64> = block.obs.iter().map(|&i| data.theta_hat[i]).collect();
    let spread = crate::numeric::variance_pop(&ys).max(1e-4);
    let log_tau_b = (1.0 / spread).ln() + 0.3 * normal(&mut init);
    let logit_phi_b = 0.5 * normal(&mut init);
    let var_obs: Vec<bool> = (0..k)
        .map(|i| {
            variant.dist().is_some_and(|dist| {
                data.estimable[i]
                    && data.design[i].as_ref().is_some_and(|d| {
                        super::model::area_variance_loglik(dist, d, data.v_hat[i], 0.0, 1.0).is_some()
                    })
            })
        })
        .collect();
    let var = variant.dist().map(|dist| {
        // crude per-area sigma2 estimates centre the intercept
        let logs: Vec<f64> = (0..k)
            .filter(|&i| var_obs[i])
            .map(|i| (data.v_hat[i] / data.design[i].as_ref().unwrap().plug_in_variance(dist, 1.0).unwrap()).ln())
            .collect();
        let centre = if logs.is_empty() { prior.eta_intercept_mean } else { crate::numeric::mean(&logs) };
        let mut eta = vec![0.0; data.z.ncols()];
        eta[0] = centre + 0.2 * normal(&mut init);
        let structured = variant.latent() == Some(VarianceLatent::Structured);
        let z: Vec<f64> = if structured { (0..k - 1).map(|_| 0.1 * normal(&mut init)).collect() } else { Vec::new() };
        let u = if structured { data.icar.field_from_coords(&z) } else { vec![0.0; k] };
        let v: Vec<f64> = (0..k).map(|_| 0.1 * normal(&mut init)).collect();
        let log_tau = 20f64.ln() + 0.3 * normal(&mut init);
        let logit_phi = if structured { 0.5 * normal(&mut init) } else { 0.0 };
        let lin: Vec<f64> = (0..k).map(|i| (0..data.z.ncols()).map(|j| data.z[(i, j)] * eta[j]).sum()).collect();
        VarState { eta, z, v, log_tau, logit_phi, u, lin, log_s2: vec![0.0; k], ll: vec![0.0; k] }
    });
    let p = data.n_mean_coef();
    let mut steps = BTreeMap::new();
    steps.insert("mean_hyper", Step::new(0.5, 0.3));
    steps.insert("var_shift", Step::new(0.1, 0.44));
    steps.insert("mean_redraw", Step::new(1.0, 0.5));
    steps.insert("var_tau", Step::new(0.5, 0.44));
    steps.insert("var_phi", Step::new(0.5, 0.44));
    let mut chain = Chain {
        variant,
        data,
        prior,
        block,
        var_obs,
        rng: stage_rng(seed, Stage::Chain, &[chain as u64]),
        mean: MeanDraw { alpha: vec![0.0; p], u: vec![0.0; k], v: vec![0.0; k] },
        theta: vec![0.0; k],
        log_tau_b,
        logit_phi_b,
        var,
        steps,
        hyper_shape: Shape2::default(),
        eta_steps: (0..data.z.ncols()).map(|_| Step::new(0.1, 0.44)).collect(),
        z_steps: (0..k.saturating_sub(1)).map(|_| Step::new(0.5, 0.44)).collect(),
        v_steps: (0..k).map(|_| Step::new(0.5, 0.44)).collect(),
    };
    if let Some(var) = chain.var.take() {
        let e = chain.effect(&var.v, &var.u, var.log_tau, var.logit_phi);
        let log_s2 = (0..k).map(|i| var.lin[i] + e[i]).collect();
        chain.var = Some(VarState { log_s2, ..var });
    }
    chain
}

struct ChainOutput {
    draws: Vec<f64>,
    acceptance: BTreeMap<String, f64>,
}

fn run_chain(
    variant: ModelVariant,
    data: &FitData,
    prior: &PriorConfig,
    block: &MeanBlock<'_>,
    config: &McmcConfig,
    seed: u64,
    chain_id: usize,
) -> Result<ChainOutput> {
    let mut chain = init_chain(variant, data, prior, block, seed, chain_id);
    let total = config.warmup + config.draws * config.thin;
    let mut draws = Vec::new();
    for iter in 0..total {
        let adapt = iter < config.warmup;
        chain.mean_step(iter, adapt)?;
        chain.variance_step(iter, adapt);
        if !adapt && (iter - config.warmup) % config.thin == config.thin - 1 {
            chain.record(&mut draws);
        }
    }
    let mut acceptance = BTreeMap::new();
    let rate = |steps: &[&Step]| {
        let tries: usize = steps.iter().map(|s| s.tries).sum();
        let acc: usize = steps.iter().map(|s| s.accepts).sum();
        if tries == 0 {
            f64::NAN
        } else {
            acc as f64 / tries as f64
        }
    };
    acceptance.insert("mean_hyper".into(), rate(&[&chain.steps["mean_hyper"]]));
    acceptance.insert("mean_redraw".into(), rate(&[&chain.steps["mean_redraw"]]));
    if variant.is_smooth() {
        acceptance.insert("eta".into(), rate(&chain.eta_steps.iter().collect::<Vec<_>>()));
        acceptance.insert("v_e".into(), rate(&chain.v_steps.iter().collect::<Vec<_>>()));
        acceptance.insert("tau_e".into(), rate(&[&chain.steps["var_tau"]]));
        acceptance.insert("eta_shift".into(), rate(&[&chain.steps["var_shift"]]));
        if variant.latent() == Some(VarianceLatent::Structured) {
            acceptance.insert("z_e".into(), rate(&chain.z_steps.iter().collect::<Vec<_>>()));
            acceptance.insert("phi_e".into(), rate(&[&chain.steps["var_phi"]]));
        }
    }
    Ok(ChainOutput { draws, acceptance })
}

/// Runs all chains and computes convergence diagnostics. Non-convergence is
/// reported through `diagnostics.converged`, not as an error.
pub fn fit(
    variant: ModelVariant,
    data: &FitData,
    prior: &PriorConfig,
    config: &McmcConfig,
    seed: u64,
) -> Result<PosteriorDraws> {
    config.validate()?;
    prior.validate()?;
    data.validate(variant)?;
    let block = MeanBlock::new(data, data.mean_obs(variant), prior, variant.dist() == Some(SamplingDist::Sasw));
    let run = |c: usize| run_chain(variant, data, prior, &block, config, seed, c);
    let outputs: Vec<ChainOutput> = if config.parallel_chains {
        (0..config.chains).into_par_iter().map(run).collect::<Result<_>>()?
    } else {
        (0..config.chains).map(run).collect::<Result<_>>()?
    };
    let names = parameter_names(variant, data);
    let mut acceptance = BTreeMap::new();
    for out in &outputs {
        for (k, v) in &out.acceptance {
            *acceptance.entry(k.clone()).or_insert(0.0) += v / outputs.len() as f64;
        }
    }
    let mut draws = PosteriorDraws {
        variant,
        n_areas: data.n_areas(),
        names,
        chains: outputs.into_iter().map(|o| o.draws).collect(),
        diagnostics: Diagnostics::default(),
        acceptance,
    };
    let per_param: Vec<Vec<Vec<f64>>> = (0..draws.n_params()).map(|p| draws.chain_draws(p)).collect();
    draws.diagnostics = Diagnostics::compute(
        &draws.names,
        &per_param,
        |n| !(n.starts_with("u[") || n.starts_with("v[")),
        config.rhat_threshold,
        config.ess_threshold,
    );
    if !draws.diagnostics.converged {
        log::warn!(
            "{variant}: max R-hat {:.3}, min bulk ESS {:.0} ({} parameters flagged)",
            draws.diagnostics.max_rhat,
            draws.diagnostics.min_ess,
            draws.diagnostics.flagged.len()
        );
    }
    Ok(draws)
}
