use serde::{Deserialize, Serialize};

use super::PosteriorDraws;
use crate::error::{Error, Result};
use crate::numeric::{mean, quantile_sorted, sorted_copy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    /// Posterior mean and equal-tailed interval (type-7 quantiles).
    pub fn from_draws(draws: &[f64], level: f64) -> Self {
        let sorted = sorted_copy(draws);
        let tail = (1.0 - level) / 2.0;
        Self { mean: mean(draws), lower: quantile_sorted(&sorted, tail), upper: quantile_sorted(&sorted, 1.0 - tail) }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaSummary {
    pub area: usize,
    pub theta: Interval,
    /// Present for the smoothing models.
    pub sigma2: Option<Interval>,
}

pub fn summarize_posterior(draws: &PosteriorDraws, level: f64) -> Result<Vec<AreaSummary>> {
    if draws.n_draws() == 0 {
        return Err(Error::McmcConfig("no posterior draws to summarise".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::McmcConfig(format!("interval level {level} outside (0, 1)")));
    }
    (0..draws.n_areas)
        .map(|i| {
            let theta = Interval::from_draws(&draws.pooled(&format!("theta[{i}]"))?, level);
            let sigma2 =
                draws.index_of(&format!("sigma2[{i}]")).map(|p| Interval::from_draws(&draws.pooled_index(p), level));
            Ok(AreaSummary { area: i, theta, sigma2 })
        })
        .collect()
}

/// Posterior probability that each area lies in the lowest fraction `p`:
/// per draw, area `i` qualifies when `#{j : theta_i > theta_j} / K <= p`.
/// `theta[s][i]` is draw `s` for area `i`.
pub fn rank_probabilities(theta: &[Vec<f64>], p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Evaluation(format!("p = {p} outside (0, 1)")));
    }
    let Some(k) = theta.first().map(Vec::len) else {
        return Err(Error::Evaluation("no draws".into()));
    };
    let mut hits = vec![0usize; k];
    let mut sorted = Vec::with_capacity(k);
    for draw in theta {
        if draw.len() != k {
            return Err(Error::Evaluation("draws have inconsistent lengths".into()));
        }
        sorted.clear();
        sorted.extend_from_slice(draw);
        sorted.sort_by(f64::total_cmp);
        for (i, &x) in draw.iter().enumerate() {
            // number of entries strictly below x
            let below = sorted.partition_point(|&y| y < x);
            if below as f64 / k as f64 <= p {
                hits[i] += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / theta.len() as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn interval_quantile_positions() {
        let xs: Vec<f64> = (1..=4000).rev().map(f64::from).collect();
        let iv = Interval::from_draws(&xs, 0.9);
        // type 7: h = 3999 * 0.05 = 199.95 -> x[199] + 0.95 (x[200] - x[199])
        assert!((iv.lower - 200.95).abs() < 1e-9);
        assert!((iv.upper - 3800.05).abs() < 1e-9);
        assert!((iv.mean - 2000.5).abs() < 1e-9);
    }

    #[test]
    fn symmetric_and_constant_draws() {
        let xs: Vec<f64> = (-500..=500).map(|i| f64::from(i) / 100.0).collect();
        let iv = Interval::from_draws(&xs, 0.9);
        assert!(iv.mean.abs() < 1e-12 && (iv.lower + iv.upper).abs() < 1e-12);
        let c = Interval::from_draws(&[2.5; 50], 0.9);
        assert_eq!((c.lower, c.upper, c.width()), (2.5, 2.5, 0.0));
    }

    #[test]
    fn rank_probability_examples() {
        let theta: Vec<Vec<f64>> = (0..100).map(|s| vec![s as f64, s as f64 + 1.0]).collect();
        let p = rank_probabilities(&theta, 0.5).unwrap();
        assert_eq!(p[0], 1.0);
        // as written, the larger of two areas exceeds 1/2 of the areas
        assert_eq!(p[1], 1.0);
        let p = rank_probabilities(&theta, 0.4).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);
        assert!(rank_probabilities(&theta, 1.0).is_err());
    }

    #[test]
    fn exchangeable_areas_average_to_threshold() {
        let mut rng = rng_for(1, &[]);
        let k = 300;
        let theta: Vec<Vec<f64>> = (0..2000).map(|_| (0..k).map(|_| rng.sample(StandardNormal)).collect()).collect();
        for p in [0.1, 0.25] {
            let probs = rank_probabilities(&theta, p).unwrap();
            let avg = mean(&probs);
            // exactly floor(pK)+1 areas qualify per draw
            let expect = ((p * k as f64).floor() + 1.0) / k as f64;
            assert!((avg - expect).abs() < 1e-12, "{avg} vs {expect}");
            assert!(probs.iter().all(|&x| (x - expect).abs() < 0.05));
        }
    }
}
