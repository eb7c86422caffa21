//! Cross-replicate metrics: empirical design variance, interval scores,
//! variance ratios and distribution comparisons.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::design::AreaSample;
use crate::distributions::{v_dagger, v_star, ChiSquareParams};
use crate::error::{Error, Result};
use crate::inference::{Interval, ModelVariant, SamplingDist};
use crate::numeric::{mean, quantile_sorted, sorted_copy};

/// Default miscoverage level for 90% intervals.
pub const ALPHA: f64 = 0.1;

/// Number of integer percentiles used by [`squared_wasserstein2`].
pub const PERCENTILES: usize = 99;

/// Mean squared deviation of the replicate estimates around their mean,
/// with denominator `|G_i|`.
pub fn empirical_design_variance(theta_hat: &[f64]) -> Result<f64> {
    if theta_hat.len() < 2 {
        return Err(Error::Evaluation(format!(
            "empirical design variance needs at least 2 replicates, got {}",
            theta_hat.len()
        )));
    }
    if theta_hat.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("replicate estimate".into()));
    }
    let m = mean(theta_hat);
    Ok(theta_hat.iter().map(|x| (x - m).powi(2)).sum::<f64>() / theta_hat.len() as f64)
}

pub fn interval_score(lower: f64, upper: f64, theta: f64, alpha: f64) -> Result<f64> {
    if lower > upper {
        return Err(Error::Evaluation(format!("interval lower {lower} exceeds upper {upper}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Evaluation(format!("alpha = {alpha} outside (0, 1)")));
    }
    let pen = 2.0 / alpha;
    Ok((upper - lower) + pen * (lower - theta).max(0.0) + pen * (theta - upper).max(0.0))
}

/// One row per area, plus optional ratio columns filled by [`ratio_metrics`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub area: usize,
    pub rmse: f64,
    pub coverage: f64,
    pub avg_width: f64,
    pub avg_interval_score: f64,
    pub theory_to_truth: Option<f64>,
    pub est_to_truth_pop: Option<f64>,
    pub est_to_truth_design: Option<f64>,
    /// Replicates contributing to the interval metrics.
    pub replicates: usize,
    /// `|G_i|`: replicates where the area had a valid design estimate.
    pub valid_replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

/// Averages across areas, skipping missing values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub rmse: f64,
    pub coverage: f64,
    pub avg_width: f64,
    pub avg_interval_score: f64,
    pub theory_to_truth: Option<f64>,
    pub est_to_truth_pop: Option<f64>,
    pub est_to_truth_design: Option<f64>,
    pub areas: usize,
}

fn mean_finite(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        mean(&v)
    }
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().filter(|x| x.is_finite()).collect();
    (!v.is_empty()).then(|| mean(&v))
}

impl MetricTable {
    pub fn summary(&self) -> MetricSummary {
        let r = &self.rows;
        MetricSummary {
            rmse: mean_finite(r.iter().map(|x| x.rmse)),
            coverage: mean_finite(r.iter().map(|x| x.coverage)),
            avg_width: mean_finite(r.iter().map(|x| x.avg_width)),
            avg_interval_score: mean_finite(r.iter().map(|x| x.avg_interval_score)),
            theory_to_truth: mean_opt(r.iter().map(|x| x.theory_to_truth)),
            est_to_truth_pop: mean_opt(r.iter().map(|x| x.est_to_truth_pop)),
            est_to_truth_design: mean_opt(r.iter().map(|x| x.est_to_truth_design)),
            areas: r.len(),
        }
    }
}

/// Interval metrics per area. `intervals[g][i]` is replicate `g`'s posterior
/// summary for area `i`; `None` marks a missing replicate, which is logged and
/// skipped. `valid[g][i]` flags membership of `G_i`.
pub fn evaluate_estimates(intervals: &[Vec<Option<Interval>>], valid: &[Vec<bool>], truth: &[f64]) -> Result<MetricTable> {
    let k = truth.len();
    if intervals.len() != valid.len() {
        return Err(Error::Evaluation("interval and validity replicate counts differ".into()));
    }
    if intervals.iter().any(|r| r.len() != k) || valid.iter().any(|r| r.len() != k) {
        return Err(Error::Evaluation(format!("every replicate must cover all {k} areas")));
    }
    let mut rows = Vec::with_capacity(k);
    for (i, &th) in truth.iter().enumerate() {
        let (mut se, mut cov, mut width, mut score, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for rep in intervals {
            let Some(iv) = rep[i] else { continue };
            se += (iv.mean - th).powi(2);
            cov += f64::from(u8::from(iv.contains(th)));
            width += iv.width();
            score += interval_score(iv.lower, iv.upper, th, ALPHA)?;
            n += 1;
        }
        if n < intervals.len() {
            log::warn!("area {i}: {} of {} replicates missing", intervals.len() - n, intervals.len());
        }
        let nf = n as f64;
        let valid_replicates = valid.iter().filter(|r| r[i]).count();
        rows.push(MetricRow {
            area: i,
            rmse: (se / nf).sqrt(),
            coverage: cov / nf,
            avg_width: width / nf,
            avg_interval_score: score / nf,
            theory_to_truth: None,
            est_to_truth_pop: None,
            est_to_truth_design: None,
            replicates: n,
            valid_replicates,
        });
    }
    Ok(MetricTable { rows })
}

/// Design variance implied by a model at a given `sigma2`: `V†` for the
/// simple smoothing models, `V*` for SASW, and the raw `V̂` for the standard
/// model. The oracle has no model-based design variance.
pub fn model_design_variance(variant: ModelVariant, area: &AreaSample, v_hat: f64, sigma2: f64) -> Result<Option<f64>> {
    Ok(match variant {
        ModelVariant::Standard => Some(v_hat),
        ModelVariant::Oracle => None,
        ModelVariant::Smooth { dist: SamplingDist::Simple, .. } => Some(v_dagger(area, sigma2)?),
        ModelVariant::Smooth { dist: SamplingDist::Sasw, .. } => Some(v_star(area, sigma2)?),
    })
}

/// Ratio averages for one area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub theory_to_truth: Option<f64>,
    pub est_to_truth_pop: Option<f64>,
    pub est_to_truth_design: Option<f64>,
}

/// `theory` holds the model design variance at the true `sigma2` and
/// `design_est` at the posterior-mean `sigma2`, both over `G_i`;
/// `sigma2_est` holds posterior means over all replicates. Empty inputs give
/// `None` for the corresponding ratio.
pub fn ratio_metrics(theory: &[f64], sigma2_est: &[f64], design_est: &[f64], v_emp: f64, sigma2_true: f64) -> Result<Ratios> {
    let needs_v = !theory.is_empty() || !design_est.is_empty();
    if needs_v && !(v_emp > 0.0) {
        return Err(Error::Evaluation(format!("empirical design variance {v_emp} is not positive")));
    }
    if !sigma2_est.is_empty() && !(sigma2_true > 0.0) {
        return Err(Error::Evaluation(format!("true variance {sigma2_true} is not positive")));
    }
    let avg = |xs: &[f64], d: f64| (!xs.is_empty()).then(|| xs.iter().map(|x| x / d).sum::<f64>() / xs.len() as f64);
    Ok(Ratios {
        theory_to_truth: avg(theory, v_emp),
        est_to_truth_pop: avg(sigma2_est, sigma2_true),
        est_to_truth_design: avg(design_est, v_emp),
    })
}

impl MetricRow {
    pub fn set_ratios(&mut self, r: Ratios) {
        self.theory_to_truth = r.theory_to_truth;
        self.est_to_truth_pop = r.est_to_truth_pop;
        self.est_to_truth_design = r.est_to_truth_design;
    }
}

/// Mean squared gap between two quantile functions over percentiles
/// 1..=99 (no square root).
pub fn squared_wasserstein2(q_a: impl Fn(f64) -> f64, q_b: impl Fn(f64) -> f64) -> f64 {
    (1..=PERCENTILES)
        .map(|j| {
            let p = j as f64 / 100.0;
            (q_a(p) - q_b(p)).powi(2)
        })
        .sum::<f64>()
        / PERCENTILES as f64
}

/// Comparison of a model distribution for `V̂` against its empirical
/// distribution, averaged over replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionComparison {
    pub wasserstein2_sq: f64,
    pub mean_diff: f64,
    pub replicates: usize,
}

/// `params[g]` is the replicate-specific distribution of `V̂`; `empirical`
/// holds draws of `V̂` across repeated samples.
pub fn compare_distributions(params: &[ChiSquareParams], empirical: &[f64]) -> Result<DistributionComparison> {
    if empirical.len() < PERCENTILES {
        return Err(Error::Evaluation(format!(
            "distribution comparison needs at least {PERCENTILES} empirical draws, got {}",
            empirical.len()
        )));
    }
    if params.is_empty() {
        return Err(Error::Evaluation("no replicate distributions to compare".into()));
    }
    if empirical.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("empirical variance draw".into()));
    }
    let sorted = sorted_copy(empirical);
    let emp_mean = mean(empirical);
    let (mut w, mut d) = (0.0, 0.0);
    for p in params {
        w += squared_wasserstein2(|q| p.quantile(q), |q| quantile_sorted(&sorted, q));
        d += p.mean() - emp_mean;
    }
    let g = params.len() as f64;
    Ok(DistributionComparison { wasserstein2_sq: w / g, mean_diff: d / g, replicates: params.len() })
}

#[derive(Serialize)]
struct MetricCsvRow<'a> {
    setting: &'a str,
    model: &'a str,
    area: String,
    rmse: f64,
    coverage: f64,
    avg_width: f64,
    avg_interval_score: f64,
    theory_to_truth: Option<f64>,
    est_to_truth_pop: Option<f64>,
    est_to_truth_design: Option<f64>,
    replicates: usize,
    valid_replicates: Option<usize>,
}

/// Writes one row per (setting, model, area) followed by a summary row with
/// area `all` for each table.
pub fn write_metrics_csv(path: &Path, tables: &[(String, ModelVariant, MetricTable)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (setting, model, table) in tables {
        let name = model.name();
        for r in &table.rows {
            w.serialize(MetricCsvRow {
                setting,
                model: name,
                area: r.area.to_string(),
                rmse: r.rmse,
                coverage: r.coverage,
                avg_width: r.avg_width,
                avg_interval_score: r.avg_interval_score,
                theory_to_truth: r.theory_to_truth,
                est_to_truth_pop: r.est_to_truth_pop,
                est_to_truth_design: r.est_to_truth_design,
                replicates: r.replicates,
                valid_replicates: Some(r.valid_replicates),
            })?;
        }
        let s = table.summary();
        w.serialize(MetricCsvRow {
            setting,
            model: name,
            area: "all".into(),
            rmse: s.rmse,
            coverage: s.coverage,
            avg_width: s.avg_width,
            avg_interval_score: s.avg_interval_score,
            theory_to_truth: s.theory_to_truth,
            est_to_truth_pop: s.est_to_truth_pop,
            est_to_truth_design: s.est_to_truth_design,
            replicates: table.rows.iter().map(|r| r.replicates).max().unwrap_or(0),
            valid_replicates: None,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand_distr::{ChiSquared, Distribution};

    fn iv(mean: f64, lower: f64, upper: f64) -> Interval {
        Interval { mean, lower, upper }
    }

    #[test]
    fn empirical_variance_examples() {
        assert_eq!(empirical_design_variance(&[0.0, 2.0]).unwrap(), 1.0);
        assert_eq!(empirical_design_variance(&[3.0; 5]).unwrap(), 0.0);
        // (1 + 0 + 1) / 3
        assert!((empirical_design_variance(&[1.0, 2.0, 3.0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(empirical_design_variance(&[1.0]).is_err());
        let shifted: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|x| x + 1e3).collect();
        assert!((empirical_design_variance(&shifted).unwrap() - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn interval_score_examples() {
        assert_eq!(interval_score(0.0, 1.0, 0.5, 0.1).unwrap(), 1.0);
        assert!((interval_score(0.0, 1.0, 1.2, 0.1).unwrap() - 5.0).abs() < 1e-12);
        assert!((interval_score(0.0, 1.0, -0.3, 0.1).unwrap() - 7.0).abs() < 1e-12);
        assert!(interval_score(1.0, 0.0, 0.5, 0.1).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let truth = [0.0, 1.0];
        let reps = vec![
            vec![Some(iv(1.0, -1.0, 2.0)), Some(iv(1.0, 0.5, 1.5))],
            vec![Some(iv(-1.0, -2.0, 1.0)), Some(iv(1.0, 2.0, 3.0))],
        ];
        let valid = vec![vec![true, true], vec![true, false]];
        let t = evaluate_estimates(&reps, &valid, &truth).unwrap();
        assert_eq!(t.rows[0].rmse, 1.0);
        assert_eq!(t.rows[0].coverage, 1.0);
        assert_eq!(t.rows[0].avg_width, 3.0);
        assert_eq!(t.rows[1].rmse, 0.0);
        assert_eq!(t.rows[1].coverage, 0.5);
        // second replicate misses by 1: 1 + 20
        assert!((t.rows[1].avg_interval_score - (1.0 + 21.0) / 2.0).abs() < 1e-12);
        assert_eq!(t.rows[0].valid_replicates, 2);
        assert_eq!(t.rows[1].valid_replicates, 1);
    }

    #[test]
    fn missing_replicates_are_skipped() {
        let reps = vec![vec![Some(iv(0.0, -1.0, 1.0))], vec![None], vec![Some(iv(0.0, -1.0, 1.0))]];
        let valid = vec![vec![true]; 3];
        let t = evaluate_estimates(&reps, &valid, &[0.0]).unwrap();
        assert_eq!(t.rows[0].replicates, 2);
        assert_eq!(t.rows[0].coverage, 1.0);
    }

    #[test]
    fn ratio_examples() {
        let r = ratio_metrics(&[2.0, 2.0], &[0.5, 0.5], &[4.0, 4.0], 2.0, 0.25).unwrap();
        assert_eq!(r.theory_to_truth, Some(1.0));
        assert_eq!(r.est_to_truth_pop, Some(2.0));
        assert_eq!(r.est_to_truth_design, Some(2.0));
        assert!(ratio_metrics(&[1.0], &[], &[], 0.0, 1.0).is_err());
        assert!(ratio_metrics(&[], &[1.0], &[], 1.0, 0.0).is_err());
        assert_eq!(ratio_metrics(&[], &[], &[], 0.0, 0.0).unwrap().theory_to_truth, None);
    }

    #[test]
    fn standard_model_uses_raw_estimate() {
        use crate::design::{ClusterSummary, StratumSample};
        let c = |id, ybar| ClusterSummary { cluster_id: id, stratum: 0, area: 0, ybar, n: 5, wstar: 2.0 };
        let area = AreaSample {
            area: 0,
            strata: vec![StratumSample { stratum: 0, urban: false, m_h: 2, clusters: vec![c(0, 1.0), c(1, 2.0)] }],
        };
        assert_eq!(model_design_variance(ModelVariant::Standard, &area, 0.37, 9.0).unwrap(), Some(0.37));
        assert_eq!(model_design_variance(ModelVariant::Oracle, &area, 0.37, 9.0).unwrap(), None);
        let simple: ModelVariant = "simple-unstruct".parse().unwrap();
        assert_eq!(model_design_variance(simple, &area, 0.37, 1.0).unwrap(), Some(v_dagger(&area, 1.0).unwrap()));
    }

    #[test]
    fn wasserstein_examples() {
        let p = ChiSquareParams { scale: 0.1, df: 4.0, theoretical_variance: 1.0 };
        assert_eq!(squared_wasserstein2(|q| p.quantile(q), |q| p.quantile(q)), 0.0);
        let c = 0.3;
        let w = squared_wasserstein2(|q| p.quantile(q) + c, |q| p.quantile(q));
        assert!((w - c * c).abs() < 1e-12);

        let mut rng = rng_for(5, &[]);
        let chi = ChiSquared::new(4.0).unwrap();
        let draws: Vec<f64> = (0..1_000_000).map(|_| 0.1 * chi.sample(&mut rng)).collect();
        let cmp = compare_distributions(&[p], &draws).unwrap();
        assert!(cmp.wasserstein2_sq < 1e-3 * 0.1 * 0.1, "{cmp:?}");
        assert!(cmp.mean_diff.abs() < 1e-3);

        let shifted: Vec<f64> = draws.iter().map(|x| x - c).collect();
        let cmp = compare_distributions(&[p], &shifted).unwrap();
        assert!((cmp.mean_diff - c).abs() < 1e-3);
        assert!((cmp.wasserstein2_sq - c * c).abs() < 2e-3);
        assert!(compare_distributions(&[p], &draws[..98]).is_err());
    }
}
