use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub names: Vec<String>,
    pub rhat: Vec<f64>,
    pub ess_bulk: Vec<f64>,
    pub max_rhat: f64,
    pub min_ess: f64,
    pub rhat_threshold: f64,
    pub ess_threshold: f64,
    pub converged: bool,
    /// Parameters breaching a threshold.
    pub flagged: Vec<String>,
}

fn split(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    chains
        .iter()
        .flat_map(|c| {
            let half = c.len() / 2;
            [&c[..half], &c[c.len() - half..]]
        })
        .filter(|c| !c.is_empty())
        .collect()
}

fn rank_normalise(chains: &[&[f64]]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(|c| c.len()).sum();
    let mut pooled: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| c.iter().enumerate().map(move |(ii, &x)| (x, ci, ii)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut start = 0;
    while start < pooled.len() {
        let mut end = start;
        while end + 1 < pooled.len() && pooled[end + 1].0 == pooled[start].0 {
            end += 1;
        }
        // average rank for ties, 1-based
        let rank = (start + end) as f64 / 2.0 + 1.0;
        let z = normal.inverse_cdf((rank - 0.375) / (total as f64 + 0.25));
        for &(_, ci, ii) in &pooled[start..=end] {
            out[ci][ii] = z;
        }
        start = end + 1;
    }
    out
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn classic_rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0) as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| sample_var(c)).collect::<Vec<_>>());
    let b_over_n = sample_var(&means);
    let var_plus = (n - 1.0) / n * w + b_over_n;
    (var_plus / w).sqrt()
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains.iter().flat_map(|c| c.first()).next().copied();
    chains.iter().flatten().all(|&x| Some(x) == first)
}

/// Rank-normalised split R-hat, the larger of the bulk and folded versions.
/// Constant draws give 1.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    if is_constant(chains) {
        return 1.0;
    }
    let parts = split(chains);
    if parts.len() < 2 || parts.iter().any(|p| p.len() < 2) {
        return f64::NAN;
    }
    let bulk = classic_rhat(&rank_normalise(&parts));
    let pooled: Vec<f64> = parts.iter().flat_map(|p| p.iter().copied()).collect();
    let median = crate::numeric::quantile(&pooled, 0.5);
    let folded: Vec<Vec<f64>> = parts.iter().map(|p| p.iter().map(|x| (x - median).abs()).collect()).collect();
    let folded_refs: Vec<&[f64]> = folded.iter().map(|v| v.as_slice()).collect();
    let tail = if folded.iter().flatten().all(|&x| x == folded[0][0]) {
        1.0
    } else {
        classic_rhat(&rank_normalise(&folded_refs))
    };
    bulk.max(tail)
}

fn autocov(x: &[f64], lag: usize) -> f64 {
    let m = mean(x);
    let n = x.len();
    (0..n - lag).map(|t| (x[t] - m) * (x[t + lag] - m)).sum::<f64>() / n as f64
}

/// Bulk effective sample size of rank-normalised split chains, with
/// Geyer's initial monotone sequence truncation.
pub fn bulk_ess(chains: &[Vec<f64>]) -> f64 {
    let total: usize = chains.iter().map(|c| c.len()).sum();
    if is_constant(chains) {
        return total as f64;
    }
    let parts = split(chains);
    if parts.len() < 2 || parts.iter().any(|p| p.len() < 4) {
        return f64::NAN;
    }
    let z = rank_normalise(&parts);
    let m = z.len() as f64;
    let n = z.iter().map(|c| c.len()).min().unwrap();
    let nf = n as f64;
    let means: Vec<f64> = z.iter().map(|c| mean(c)).collect();
    let acov0: Vec<f64> = z.iter().map(|c| autocov(c, 0)).collect();
    let w = mean(&acov0) * nf / (nf - 1.0);
    let var_plus = w * (nf - 1.0) / nf + sample_var(&means);
    let rho = |t: usize| -> f64 {
        let mean_acov = mean(&z.iter().map(|c| autocov(c, t)).collect::<Vec<_>>());
        1.0 - (w - mean_acov) / var_plus
    };
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let pair = if t == 0 { 1.0 + rho(1) } else { rho(t) + rho(t + 1) };
        if pair < 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        t += 2;
    }
    let tau = (-1.0 + 2.0 * sum).max(1.0 / (m * nf).log10());
    m * nf / tau
}

impl Diagnostics {
    /// `chains[c][p]` holds the draws of parameter `p` in chain `c`;
    /// `monitored` selects the parameters the convergence flag looks at.
    pub fn compute(
        names: &[String],
        per_param: &[Vec<Vec<f64>>],
        monitored: impl Fn(&str) -> bool,
        rhat_threshold: f64,
        ess_threshold: f64,
    ) -> Self {
        let rhat: Vec<f64> = per_param.iter().map(|c| split_rhat(c)).collect();
        let ess_bulk: Vec<f64> = per_param.iter().map(|c| bulk_ess(c)).collect();
        let mut max_rhat: f64 = 1.0;
        let mut min_ess = f64::INFINITY;
        let mut flagged = Vec::new();
        for (i, name) in names.iter().enumerate() {
            if !monitored(name) {
                continue;
            }
            let (r, e) = (rhat[i], ess_bulk[i]);
            if r.is_finite() {
                max_rhat = max_rhat.max(r);
            }
            if e.is_finite() {
                min_ess = min_ess.min(e);
            }
            if !(r <= rhat_threshold) || !(e >= ess_threshold) {
                flagged.push(name.clone());
            }
        }
        Self {
            names: names.to_vec(),
            converged: flagged.is_empty(),
            rhat,
            ess_bulk,
            max_rhat,
            min_ess,
            rhat_threshold,
            ess_threshold,
            flagged,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn iid(chains: usize, n: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_for(seed, &[]);
        (0..chains)
            .map(|c| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) + shift * c as f64).collect())
            .collect()
    }

    #[test]
    fn iid_chains_mix() {
        let c = iid(4, 1000, 0.0, 1);
        let r = split_rhat(&c);
        assert!(r < 1.01, "rhat {r}");
        let e = bulk_ess(&c);
        assert!(e > 3000.0 && e < 5000.0, "ess {e}");
    }

    #[test]
    fn shifted_chains_do_not_mix() {
        let c = iid(4, 500, 2.0, 2);
        assert!(split_rhat(&c) > 1.5);
    }

    #[test]
    fn autocorrelated_chain_has_low_ess() {
        let mut rng = rng_for(3, &[]);
        let chains: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                let mut x = 0.0;
                (0..2000)
                    .map(|_| {
                        x = 0.9 * x + rng.sample::<f64, _>(StandardNormal);
                        x
                    })
                    .collect()
            })
            .collect();
        // AR(1) with rho 0.9: ESS ~ N (1 - rho) / (1 + rho)
        let e = bulk_ess(&chains);
        let expect = 4000.0 * 0.1 / 1.9;
        assert!((e / expect - 1.0).abs() < 0.35, "ess {e} vs {expect}");
    }

    #[test]
    fn constant_draws() {
        let c = vec![vec![1.0; 10]; 2];
        assert_eq!(split_rhat(&c), 1.0);
        assert_eq!(bulk_ess(&c), 20.0);
    }

    #[test]
    fn flags_and_monitoring() {
        let names = vec!["a".to_string(), "u[0]".to_string()];
        let good = iid(2, 400, 0.0, 4);
        let bad = iid(2, 400, 3.0, 5);
        let d = Diagnostics::compute(&names, &[good.clone(), bad.clone()], |n| !n.starts_with("u["), 1.05, 100.0);
        assert!(d.converged);
        let d = Diagnostics::compute(&names, &[good, bad], |_| true, 1.05, 100.0);
        assert!(!d.converged);
        assert_eq!(d.flagged, vec!["u[0]".to_string()]);
    }
}
