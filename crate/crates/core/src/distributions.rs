//! Sampling distributions of the Taylor variance estimator.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::design::AreaSample;
use crate::error::{Error, Result};
use crate::numeric::{compensated_sum, scaled_chi2_logpdf, CompensatedSum};

/// Relative cutoff below which eigenvalues count as zero.
pub const EIGEN_REL_TOL: f64 = 1e-10;

fn nonempty(area: &AreaSample) -> Result<()> {
    if area.m_dot() == 0 {
        return Err(Error::EmptyDomain(area.area));
    }
    Ok(())
}

/// `sum w*^2 / n`.
pub fn weighted_design_effect(area: &AreaSample) -> f64 {
    compensated_sum(area.clusters().map(|c| c.wstar * c.wstar / c.n as f64))
}

/// Design variance of the Hajek mean under the superpopulation model.
pub fn v_star(area: &AreaSample, sigma2: f64) -> Result<f64> {
    nonempty(area)?;
    Ok(sigma2 * weighted_design_effect(area) / area.total_weight().powi(2))
}

/// `sigma2 / total sample size`.
pub fn v_dagger(area: &AreaSample, sigma2: f64) -> Result<f64> {
    let n: u64 = area.clusters().map(|c| c.n).sum();
    if n == 0 {
        return Err(Error::EmptyDomain(area.area));
    }
    Ok(sigma2 / n as f64)
}

/// `V_hat ~ v * c * chi2_d`, with `v` the theoretical variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareParams {
    pub scale: f64,
    pub df: f64,
    pub theoretical_variance: f64,
}

impl ChiSquareParams {
    pub fn mean(&self) -> f64 {
        self.scale * self.df * self.theoretical_variance
    }

    pub fn variance(&self) -> f64 {
        2.0 * (self.scale * self.theoretical_variance).powi(2) * self.df
    }

    pub fn logpdf(&self, v_hat: f64) -> f64 {
        scaled_chi2_logpdf(v_hat, self.scale * self.theoretical_variance, self.df)
    }

    pub fn quantile(&self, p: f64) -> f64 {
        crate::numeric::scaled_chi2_quantile(p, self.scale * self.theoretical_variance, self.df)
    }
}

/// Degrees-of-freedom rule for the simple distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimpleDf {
    /// `m - |H|` clusters minus strata.
    #[default]
    Clusters,
    /// Total sample size minus one, ignoring clustering.
    Legacy,
}

/// `(c, d)` of the simple distribution; the theoretical variance is `V_dagger`.
pub fn simple_scale_df(area: &AreaSample, mode: SimpleDf) -> Result<(f64, f64)> {
    let d = match mode {
        SimpleDf::Clusters => {
            let (m, h) = (area.m_dot(), area.strata_count());
            if m <= h {
                return Err(Error::ZeroDegreesOfFreedom { area: area.area, strata: h });
            }
            (m - h) as f64
        }
        SimpleDf::Legacy => {
            let n: u64 = area.clusters().map(|c| c.n).sum();
            if n < 2 {
                return Err(Error::ZeroDegreesOfFreedom { area: area.area, strata: area.strata_count() });
            }
            (n - 1) as f64
        }
    };
    Ok((1.0 / d, d))
}

pub fn simple_params(area: &AreaSample, sigma2: f64, mode: SimpleDf) -> Result<ChiSquareParams> {
    let (scale, df) = simple_scale_df(area, mode)?;
    Ok(ChiSquareParams { scale, df, theoretical_variance: v_dagger(area, sigma2)? })
}

/// The quadratic-form matrix restricted to the in-area clusters, with the
/// stratum blocks keeping their full `m_h`.
#[derive(Debug, Clone)]
pub struct InDomainForm {
    pub m: DMatrix<f64>,
    pub wstar: DVector<f64>,
    pub n: DVector<f64>,
    pub urban: DVector<f64>,
    pub stratum_pos: Vec<usize>,
}

impl InDomainForm {
    pub fn new(area: &AreaSample) -> Result<Self> {
        nonempty(area)?;
        if let Some(s) = area.strata.iter().find(|s| s.m_h < 2) {
            return Err(Error::SingleClusterStratum { stratum: s.stratum });
        }
        let r = area.m_dot();
        let mut wstar = DVector::zeros(r);
        let mut n = DVector::zeros(r);
        let mut urban = DVector::zeros(r);
        let mut stratum_pos = Vec::with_capacity(r);
        for (j, s) in area.strata.iter().enumerate() {
            for c in &s.clusters {
                let i = stratum_pos.len();
                wstar[i] = c.wstar;
                n[i] = c.n as f64;
                urban[i] = f64::from(u8::from(s.urban));
                stratum_pos.push(j);
            }
        }
        if wstar.iter().chain(n.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("weights or sizes in area {}", area.area)));
        }
        let total = wstar.sum();
        let mut t = DMatrix::zeros(r, r);
        for a in 0..r {
            for b in 0..r {
                let delta = if a == b { 1.0 } else { 0.0 };
                t[(a, b)] = wstar[a] * (delta - wstar[b] / total);
            }
        }
        let mut bm = DMatrix::zeros(r, r);
        for a in 0..r {
            for b in 0..r {
                if stratum_pos[a] == stratum_pos[b] {
                    let m = area.strata[stratum_pos[a]].m_h as f64;
                    let delta = if a == b { 1.0 } else { 0.0 };
                    bm[(a, b)] = m / (m - 1.0) * (delta - 1.0 / m);
                }
            }
        }
        let m = t.transpose() * bm * t;
        Ok(Self { m, wstar, n, urban, stratum_pos })
    }

    pub fn total_weight(&self) -> f64 {
        self.wstar.sum()
    }

    /// `w*' D w*` with `D = diag(1/n)`.
    pub fn wdw(&self) -> f64 {
        compensated_sum(self.wstar.iter().zip(self.n.iter()).map(|(w, n)| w * w / n))
    }

    /// `tr(M D)`.
    pub fn trace_md(&self) -> f64 {
        compensated_sum((0..self.n.len()).map(|i| self.m[(i, i)] / self.n[i]))
    }

    /// `g' M g`.
    pub fn quadratic(&self, g: &DVector<f64>) -> f64 {
        (g.transpose() * &self.m * g)[(0, 0)]
    }
}

/// Eigensystem of `D^1/2 M D^1/2` for one area.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaswEigensystem {
    pub area: usize,
    /// Nonzero eigenvalues, descending.
    pub q: Vec<f64>,
    /// Squared projections of the back-transformed eigenvectors on the urban indicator.
    pub a: Vec<f64>,
    pub wdw: f64,
    pub sum_wstar: f64,
    /// Back-transformed eigenvectors `v = D^-1/2 e`, one per retained eigenvalue.
    pub vectors: Vec<Vec<f64>>,
}

pub fn sasw_eigensystem(area: &AreaSample) -> Result<SaswEigensystem> {
    let form = InDomainForm::new(area)?;
    let r = form.n.len();
    let sqrt_d = form.n.map(|n| 1.0 / n.sqrt());
    let mut a = form.m.clone();
    for i in 0..r {
        for j in 0..r {
            a[(i, j)] *= sqrt_d[i] * sqrt_d[j];
        }
    }
    let eig = SymmetricEigen::new(a);
    if eig.eigenvalues.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("eigenvalues in area {}", area.area)));
    }
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let mut order: Vec<usize> = (0..r).filter(|&j| max > 0.0 && eig.eigenvalues[j] > EIGEN_REL_TOL * max).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let mut q = Vec::with_capacity(order.len());
    let mut proj = Vec::with_capacity(order.len());
    let mut vectors = Vec::with_capacity(order.len());
    for j in order {
        let v: Vec<f64> = (0..r).map(|i| eig.eigenvectors[(i, j)] / sqrt_d[i]).collect();
        let dot: f64 = v.iter().zip(form.urban.iter()).map(|(x, u)| x * u).sum();
        q.push(eig.eigenvalues[j]);
        proj.push(dot * dot);
        vectors.push(v);
    }
    Ok(SaswEigensystem {
        area: area.area,
        q,
        a: proj,
        wdw: form.wdw(),
        sum_wstar: form.total_weight(),
        vectors,
    })
}

impl SaswEigensystem {
    pub fn rank(&self) -> usize {
        self.q.len()
    }

    /// Noncentrality parameters for a single urban contrast `gamma`.
    pub fn deltas(&self, gamma: f64, sigma2: f64) -> Vec<f64> {
        self.a.iter().map(|a| gamma * gamma * a / sigma2).collect()
    }

    /// Noncentrality parameters for a general vector of cluster means.
    pub fn deltas_general(&self, mu: &[f64], sigma2: f64) -> Vec<f64> {
        self.vectors
            .iter()
            .map(|v| {
                let d: f64 = v.iter().zip(mu).map(|(a, b)| a * b).sum();
                d * d / sigma2
            })
            .collect()
    }

    /// `(Q1, Q2)` for given noncentralities.
    pub fn moments(&self, deltas: &[f64]) -> (f64, f64) {
        let mut q1 = CompensatedSum::new();
        let mut q2 = CompensatedSum::new();
        for (q, d) in self.q.iter().zip(deltas) {
            q1.add(q * (1.0 + d));
            q2.add(2.0 * q * q * (1.0 + 2.0 * d));
        }
        (q1.value(), q2.value())
    }

    pub fn v_star(&self, sigma2: f64) -> f64 {
        sigma2 * self.wdw / (self.sum_wstar * self.sum_wstar)
    }

    pub fn params_from_deltas(&self, deltas: &[f64], sigma2: f64) -> Result<ChiSquareParams> {
        let (q1, q2) = self.moments(deltas);
        if !(q1 > 0.0 && q2 > 0.0) {
            return Err(Error::DegenerateEigensystem(self.area));
        }
        Ok(ChiSquareParams {
            scale: q2 / (2.0 * q1 * self.wdw),
            df: 2.0 * q1 * q1 / q2,
            theoretical_variance: self.v_star(sigma2),
        })
    }
}

/// Satterthwaite two-moment approximation of the exact law.
pub fn sasw_params(eig: &SaswEigensystem, gamma: f64, sigma2: f64) -> Result<ChiSquareParams> {
    if !(sigma2 > 0.0) {
        return Err(Error::Distribution(format!("sigma2 = {sigma2} must be positive")));
    }
    eig.params_from_deltas(&eig.deltas(gamma, sigma2), sigma2)
}

/// Draws from `(sigma2 / (1'w*)^2) * sum_j q_j (Z_j + sqrt(delta_j))^2`.
pub fn sample_exact_sw<R: Rng + ?Sized>(
    eig: &SaswEigensystem,
    gamma: f64,
    sigma2: f64,
    n_draws: usize,
    rng: &mut R,
) -> Vec<f64> {
    let scale = sigma2 / (eig.sum_wstar * eig.sum_wstar);
    let roots: Vec<f64> = eig.deltas(gamma, sigma2).iter().map(|d| d.sqrt()).collect();
    (0..n_draws)
        .map(|_| {
            let mut s = 0.0;
            for (q, r) in eig.q.iter().zip(&roots) {
                let z: f64 = rng.sample(StandardNormal);
                s += q * (z + r).powi(2);
            }
            scale * s
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasFactor {
    /// `Q1 / w*'Dw*`: expected value of V_hat relative to V*.
    pub factor: f64,
    pub r: f64,
    /// Mean-structure contribution `g' M g / sigma2`.
    pub cross: f64,
}

/// `R = sum_c (w_c^2/n_c) [2 k_h (w_c - W_h/m_h)/s - w'Bw/s^2]`, where `W_h`
/// sums the in-area weights of stratum `h`; `tr(MD) = w'Dw - R`.
pub fn r_term(area: &AreaSample) -> f64 {
    let s = area.total_weight();
    let mut wbw = CompensatedSum::new();
    for st in &area.strata {
        let m = st.m_h as f64;
        let k = m / (m - 1.0);
        let wh = compensated_sum(st.clusters.iter().map(|c| c.wstar));
        let w2 = compensated_sum(st.clusters.iter().map(|c| c.wstar * c.wstar));
        wbw.add(k * (w2 - wh * wh / m));
    }
    let wbw = wbw.value();
    let mut r = CompensatedSum::new();
    for st in &area.strata {
        let m = st.m_h as f64;
        let k = m / (m - 1.0);
        let wh = compensated_sum(st.clusters.iter().map(|c| c.wstar));
        for c in &st.clusters {
            let lead = c.wstar * c.wstar / c.n as f64;
            r.add(lead * (2.0 * k * (c.wstar - wh / m) / s - wbw / (s * s)));
        }
    }
    r.value()
}

/// Relative bias of the expected Taylor variance, with its two components.
/// `factor = 1 + (cross - R) / w'Dw` holds exactly.
pub fn bias_factor(area: &AreaSample, eig: &SaswEigensystem, gamma: f64, sigma2: f64) -> Result<BiasFactor> {
    let (q1, _) = eig.moments(&eig.deltas(gamma, sigma2));
    let form = InDomainForm::new(area)?;
    let g = form.urban.map(|u| gamma * u);
    Ok(BiasFactor { factor: q1 / eig.wdw, r: r_term(area), cross: form.quadratic(&g) / sigma2 })
}
