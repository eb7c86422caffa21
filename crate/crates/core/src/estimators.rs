//! Design-based direct estimators for one area (domain).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::AreaSample;
use crate::error::{Error, Result};
use crate::numeric::{compensated_sum, CompensatedSum};

pub fn hajek_mean(area: &AreaSample) -> Result<f64> {
    if area.m_dot() == 0 {
        return Err(Error::EmptyDomain(area.area));
    }
    let num = compensated_sum(area.clusters().map(|c| c.wstar * c.ybar));
    Ok(num / area.total_weight())
}

fn check_strata(area: &AreaSample) -> Result<()> {
    if area.m_dot() == 0 {
        return Err(Error::EmptyDomain(area.area));
    }
    if let Some(s) = area.strata.iter().find(|s| s.m_h < 2) {
        return Err(Error::SingleClusterStratum { stratum: s.stratum });
    }
    Ok(())
}

/// Per stratum: `(k_h, m_h, m_hi, in-domain z_c = w*_c (ybar_c - theta))`.
fn linearized(area: &AreaSample, theta: f64) -> Vec<(f64, f64, f64, Vec<f64>)> {
    area.strata
        .iter()
        .map(|s| {
            let m = s.m_h as f64;
            let z = s.clusters.iter().map(|c| c.wstar * (c.ybar - theta)).collect();
            (m / (m - 1.0), m, s.m_hi() as f64, z)
        })
        .collect()
}

/// Taylor-linearised variance of the Hajek mean. Clusters of a stratum that
/// fall outside the area count as zero-weight members of the stratum.
pub fn taylor_variance(area: &AreaSample) -> Result<f64> {
    check_strata(area)?;
    if area.m_dot() == 1 {
        return Ok(0.0);
    }
    let theta = hajek_mean(area)?;
    let s = area.total_weight();
    let mut total = CompensatedSum::new();
    for (k, m, m_in, z) in linearized(area, theta) {
        let zbar = compensated_sum(z.iter().copied()) / m;
        let mut inner = CompensatedSum::new();
        for zc in &z {
            inner.add((zc - zbar).powi(2));
        }
        inner.add((m - m_in) * zbar * zbar);
        total.add(k * inner.value());
    }
    Ok((total.value() / (s * s)).max(0.0))
}

/// Inside-area and outside-area contributions to the Taylor variance.
pub fn domain_decomposition(area: &AreaSample) -> Result<(f64, f64)> {
    check_strata(area)?;
    if area.m_dot() == 1 {
        return Ok((0.0, 0.0));
    }
    let theta = hajek_mean(area)?;
    let s2 = area.total_weight().powi(2);
    let (mut inside, mut outside) = (CompensatedSum::new(), CompensatedSum::new());
    for (k, m, m_in, z) in linearized(area, theta) {
        let sz = compensated_sum(z.iter().copied());
        let zbar = sz / m;
        inside.add(k * compensated_sum(z.iter().map(|zc| (zc - zbar).powi(2))));
        outside.add((m - m_in) / ((m - 1.0) * m) * sz * sz);
    }
    Ok((inside.value() / s2, outside.value() / s2))
}

/// Variance under equal weights, equal cluster sizes and planned domains:
/// `sum_h sum_c (ybar_c - ybar_h)^2 / (m (m - |H|))`.
pub fn simple_variance(area: &AreaSample) -> Result<f64> {
    let m = area.m_dot();
    if m == 0 {
        return Err(Error::EmptyDomain(area.area));
    }
    let h = area.strata_count();
    if m <= h {
        return Err(Error::ZeroDegreesOfFreedom { area: area.area, strata: h });
    }
    let mut ss = CompensatedSum::new();
    for s in &area.strata {
        let mean = compensated_sum(s.clusters.iter().map(|c| c.ybar)) / s.m_hi() as f64;
        for c in &s.clusters {
            ss.add((c.ybar - mean).powi(2));
        }
    }
    Ok(ss.value() / (m as f64 * (m - h) as f64))
}

/// Quadratic-form representation `ybar' M ybar / (1'w)^2` of the Taylor
/// variance, with `M = T'BT`, `T = W(I - 1w'/1'w)` and block-diagonal
/// `B_h = k_h (I - J/m_h)`. Rows are ordered stratum by stratum, in-domain
/// clusters first, then the out-of-area placeholders.
#[derive(Debug, Clone)]
pub struct MatrixForm {
    pub ybar: DVector<f64>,
    pub wstar: DVector<f64>,
    pub t: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub m: DMatrix<f64>,
    /// Whether each row is an in-domain cluster.
    pub in_domain: Vec<bool>,
    /// Stratum position (index into `area.strata`) of each row.
    pub block: Vec<usize>,
}

impl MatrixForm {
    pub fn new(area: &AreaSample) -> Result<Self> {
        check_strata(area)?;
        let n: usize = area.strata.iter().map(|s| s.m_h).sum();
        let mut ybar = DVector::zeros(n);
        let mut wstar = DVector::zeros(n);
        let mut b = DMatrix::zeros(n, n);
        let mut in_domain = vec![false; n];
        let mut block = vec![0; n];
        let mut start = 0;
        for (j, s) in area.strata.iter().enumerate() {
            for (r, c) in s.clusters.iter().enumerate() {
                ybar[start + r] = c.ybar;
                wstar[start + r] = c.wstar;
                in_domain[start + r] = true;
            }
            let m = s.m_h as f64;
            let k = m / (m - 1.0);
            for r in 0..s.m_h {
                block[start + r] = j;
                for c in 0..s.m_h {
                    b[(start + r, start + c)] = k * (f64::from(u8::from(r == c)) - 1.0 / m);
                }
            }
            start += s.m_h;
        }
        let total = wstar.sum();
        let ones = DVector::from_element(n, 1.0);
        let centering = DMatrix::identity(n, n) - &ones * wstar.transpose() / total;
        let t = DMatrix::from_diagonal(&wstar) * centering;
        let m = t.transpose() * &b * &t;
        Ok(Self { ybar, wstar, t, b, m, in_domain, block })
    }

    pub fn total_weight(&self) -> f64 {
        self.wstar.sum()
    }

    pub fn variance(&self) -> f64 {
        let q = (self.ybar.transpose() * &self.m * &self.ybar)[(0, 0)];
        q / self.total_weight().powi(2)
    }
}

pub fn matrix_variance(area: &AreaSample) -> Result<f64> {
    if area.m_dot() == 1 {
        check_strata(area)?;
        return Ok(0.0);
    }
    Ok(MatrixForm::new(area)?.variance().max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignEstimate {
    pub area: usize,
    /// Hajek mean; NaN when the area has no sampled cluster.
    pub theta_hat: f64,
    /// Taylor variance; NaN when the area has no sampled cluster.
    pub v_hat: f64,
    #[serde(rename = "m")]
    pub m_dot: usize,
    #[serde(rename = "strata")]
    pub strata_count: usize,
    pub estimable: bool,
}

pub fn estimate_area(area: &AreaSample) -> Result<DesignEstimate> {
    let (theta_hat, v_hat) = if area.m_dot() == 0 {
        (f64::NAN, f64::NAN)
    } else {
        (hajek_mean(area)?, taylor_variance(area)?)
    };
    Ok(DesignEstimate {
        area: area.area,
        theta_hat,
        v_hat,
        m_dot: area.m_dot(),
        strata_count: area.strata_count(),
        estimable: area.estimable(),
    })
}

pub fn estimate_all(areas: &[AreaSample]) -> Result<Vec<DesignEstimate>> {
    areas.iter().map(estimate_area).collect()
}

pub fn write_estimates_csv(path: &Path, rows: &[DesignEstimate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_estimates_csv(path: &Path) -> Result<Vec<DesignEstimate>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| {
            rec.map_err(|e: csv::Error| Error::Schema { path: path.to_path_buf(), row: i + 1, message: e.to_string() })
        })
        .collect()
}
