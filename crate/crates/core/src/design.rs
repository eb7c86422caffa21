//! Stratified two-stage cluster sampling: systematic PPS selection of
//! clusters, negative-binomial within-cluster sample sizes and weights.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{AreaId, ClusterId, OutcomeKind, StratumId, SuperpopParams, SurveyFrame};
use crate::rng::{stage_rng, Stage};

/// Negative binomial with size `s` and mean `mu` (variance `mu + mu^2/s`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegBinomial {
    pub size: f64,
    pub mean: f64,
}

impl NegBinomial {
    pub fn new(size: f64, mean: f64) -> Result<Self> {
        if !(size > 0.0 && mean > 0.0 && size.is_finite() && mean.is_finite()) {
            return Err(Error::Design(format!("invalid negative binomial (size {size}, mean {mean})")));
        }
        Ok(Self { size, mean })
    }

    /// Gamma-Poisson mixture draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let lambda = Gamma::new(self.size, self.mean / self.size).expect("validated").sample(rng);
        if lambda <= 0.0 {
            return 0;
        }
        Poisson::new(lambda).map(|p| p.sample(rng) as u64).unwrap_or(0)
    }

    pub fn variance(&self) -> f64 {
        self.mean + self.mean * self.mean / self.size
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Clusters drawn per urban stratum.
    pub urban_m: usize,
    /// Clusters drawn per rural stratum.
    pub rural_m: usize,
    /// Explicit per-stratum `m_h`, overriding the urban/rural values.
    #[serde(default)]
    pub stratum_m: Option<Vec<usize>>,
    pub urban_size: NegBinomial,
    pub rural_size: NegBinomial,
    #[serde(default = "one")]
    pub multiplier: usize,
}

fn one() -> usize {
    1
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            urban_m: 13,
            rural_m: 20,
            stratum_m: None,
            urban_size: NegBinomial { size: 8.0, mean: 9.0 },
            rural_size: NegBinomial { size: 4.0, mean: 11.0 },
            multiplier: 1,
        }
    }
}

impl SampleConfig {
    pub fn m_h(&self, frame: &SurveyFrame, h: StratumId) -> usize {
        let base = match &self.stratum_m {
            Some(m) => m[h],
            None if frame.stratum_urban[h] => self.urban_m,
            None => self.rural_m,
        };
        base * self.multiplier
    }

    pub fn size_dist(&self, urban: bool) -> NegBinomial {
        if urban {
            self.urban_size
        } else {
            self.rural_size
        }
    }

    pub fn validate(&self, frame: &SurveyFrame) -> Result<()> {
        NegBinomial::new(self.urban_size.size, self.urban_size.mean)?;
        NegBinomial::new(self.rural_size.size, self.rural_size.mean)?;
        if self.multiplier == 0 {
            return Err(Error::Design("multiplier must be positive".into()));
        }
        if let Some(m) = &self.stratum_m {
            if m.len() != frame.n_strata() {
                return Err(Error::Design(format!(
                    "{} stratum sample sizes for {} strata",
                    m.len(),
                    frame.n_strata()
                )));
            }
        }
        for h in 0..frame.n_strata() {
            let m = self.m_h(frame, h);
            let big_m = frame.stratum_clusters[h].len();
            if m < 2 || m > big_m {
                return Err(Error::Design(format!("stratum {h}: need 2 <= m_h <= M_h, got m_h = {m}, M_h = {big_m}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedCluster {
    pub cluster_id: ClusterId,
    /// First-stage inclusion probability.
    pub p1: f64,
    pub certainty: bool,
}

/// Systematic PPS without replacement of `m` units with sizes `sizes`, on a
/// randomly permuted list. Units whose probability reaches one are taken
/// with certainty and the rest are re-scaled. Returns `(index, p1, certainty)`.
pub fn systematic_pps<R: Rng + ?Sized>(sizes: &[f64], m: usize, rng: &mut R) -> Result<Vec<(usize, f64, bool)>> {
    let big_m = sizes.len();
    if m > big_m {
        return Err(Error::Design(format!("cannot draw {m} of {big_m} clusters")));
    }
    if sizes.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Design("all listed sizes must be positive".into()));
    }
    let mut certain = vec![false; big_m];
    let mut p = vec![0.0; big_m];
    let mut k = m;
    loop {
        let total: f64 = (0..big_m).filter(|&i| !certain[i]).map(|i| sizes[i]).sum();
        let mut changed = false;
        for i in 0..big_m {
            if certain[i] {
                continue;
            }
            p[i] = k as f64 * sizes[i] / total;
            if p[i] >= 1.0 - 1e-12 {
                certain[i] = true;
                k -= 1;
                changed = true;
            }
        }
        if !changed || k == 0 {
            break;
        }
    }
    let mut out: Vec<(usize, f64, bool)> = (0..big_m).filter(|&i| certain[i]).map(|i| (i, 1.0, true)).collect();
    if k > 0 {
        let mut order: Vec<usize> = (0..big_m).filter(|&i| !certain[i]).collect();
        order.shuffle(rng);
        let start: f64 = rng.random();
        let mut next = start;
        let mut cum = 0.0;
        for &i in &order {
            cum += p[i];
            if cum > next && out.len() < m {
                out.push((i, p[i], false));
                next += 1.0;
            }
        }
        // floating-point shortfall at the very end of the list
        if out.len() < m {
            if let Some(&i) = order.iter().rev().find(|&&i| !out.iter().any(|o| o.0 == i)) {
                out.push((i, p[i], false));
            }
        }
    }
    Ok(out)
}

/// Draws `m_h` clusters from every stratum.
pub fn pps_sample_clusters(
    frame: &SurveyFrame,
    config: &SampleConfig,
    seed: u64,
) -> Result<Vec<Vec<SelectedCluster>>> {
    config.validate(frame)?;
    let mut rng = stage_rng(seed, Stage::ClusterSelection, &[]);
    (0..frame.n_strata())
        .map(|h| {
            let members = &frame.stratum_clusters[h];
            let sizes: Vec<f64> = members.iter().map(|&c| frame.clusters[c].listed_size as f64).collect();
            let picks = systematic_pps(&sizes, config.m_h(frame, h), &mut rng)?;
            Ok(picks
                .into_iter()
                .map(|(i, p1, certainty)| SelectedCluster { cluster_id: members[i], p1, certainty })
                .collect())
        })
        .collect()
}

/// One row per sampled cluster; also the ingestion format for real surveys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_id: ClusterId,
    pub stratum: StratumId,
    pub area: AreaId,
    pub ybar: f64,
    pub n: u64,
    pub wstar: f64,
}

pub fn draw_cluster_sample<R: Rng + ?Sized>(
    frame: &SurveyFrame,
    params: &SuperpopParams,
    kind: OutcomeKind,
    selected: &SelectedCluster,
    config: &SampleConfig,
    rng: &mut R,
) -> Result<ClusterSummary> {
    let c = frame
        .clusters
        .get(selected.cluster_id)
        .ok_or_else(|| Error::Design(format!("unknown cluster {}", selected.cluster_id)))?;
    let dist = config.size_dist(frame.stratum_urban[c.stratum]);
    let mut n = dist.sample(rng);
    while n == 0 {
        n = dist.sample(rng);
    }
    let n = n.min(c.true_size);
    let ys = crate::frame::gen_outcomes(frame, params, kind, c.id, n as usize, rng)?;
    let ybar = crate::numeric::compensated_sum(ys.iter().copied()) / n as f64;
    // w = 1 / (p1 * n / N), w* = w * n
    let wstar = c.true_size as f64 / selected.p1;
    Ok(ClusterSummary { cluster_id: c.id, stratum: c.stratum, area: c.area, ybar, n, wstar })
}

/// Full two-stage sample for one replicate; cluster-level randomness is
/// keyed by cluster id so results do not depend on iteration order.
pub fn draw_sample(
    frame: &SurveyFrame,
    params: &SuperpopParams,
    kind: OutcomeKind,
    config: &SampleConfig,
    seed: u64,
) -> Result<Vec<ClusterSummary>> {
    let selected = pps_sample_clusters(frame, config, seed)?;
    let mut rows = Vec::new();
    for stratum in &selected {
        for s in stratum {
            let mut rng = stage_rng(seed, Stage::ClusterSample, &[s.cluster_id as u64]);
            rows.push(draw_cluster_sample(frame, params, kind, s, config, &mut rng)?);
        }
    }
    rows.sort_by_key(|r| r.cluster_id);
    Ok(rows)
}

/// In-domain clusters of one stratum, with the stratum's total sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSample {
    pub stratum: StratumId,
    pub urban: bool,
    /// Clusters sampled in the whole stratum (`m_h`).
    pub m_h: usize,
    pub clusters: Vec<ClusterSummary>,
}

impl StratumSample {
    pub fn m_hi(&self) -> usize {
        self.clusters.len()
    }

    pub fn planned(&self) -> bool {
        self.m_hi() == self.m_h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaSample {
    pub area: AreaId,
    pub strata: Vec<StratumSample>,
}

impl AreaSample {
    pub fn m_dot(&self) -> usize {
        self.strata.iter().map(StratumSample::m_hi).sum()
    }

    pub fn strata_count(&self) -> usize {
        self.strata.len()
    }

    pub fn estimable(&self) -> bool {
        self.m_dot() > 1
    }

    pub fn clusters(&self) -> impl Iterator<Item = &ClusterSummary> {
        self.strata.iter().flat_map(|s| s.clusters.iter())
    }

    pub fn total_weight(&self) -> f64 {
        crate::numeric::compensated_sum(self.clusters().map(|c| c.wstar))
    }
}

/// Groups cluster rows by area; every area in `0..n_areas` gets an entry,
/// empty when unsampled. `urban` maps stratum ids to the urban flag.
pub fn summarize_sample(
    rows: &[ClusterSummary],
    n_areas: usize,
    urban: impl Fn(StratumId) -> bool,
) -> Result<Vec<AreaSample>> {
    let mut m_h: BTreeMap<StratumId, usize> = BTreeMap::new();
    let mut groups: BTreeMap<(AreaId, StratumId), Vec<ClusterSummary>> = BTreeMap::new();
    for r in rows {
        if r.area >= n_areas {
            return Err(Error::Design(format!("cluster {} has area {} >= {n_areas}", r.cluster_id, r.area)));
        }
        *m_h.entry(r.stratum).or_default() += 1;
        groups.entry((r.area, r.stratum)).or_default().push(*r);
    }
    let mut areas: Vec<AreaSample> = (0..n_areas).map(|area| AreaSample { area, strata: Vec::new() }).collect();
    for ((area, stratum), clusters) in groups {
        areas[area].strata.push(StratumSample { stratum, urban: urban(stratum), m_h: m_h[&stratum], clusters });
    }
    Ok(areas)
}

pub fn write_cluster_csv(path: &Path, rows: &[ClusterSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads and validates the `cluster_id,stratum,area,ybar,n,wstar` schema.
pub fn read_cluster_csv(path: &Path) -> Result<Vec<ClusterSummary>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let expected = ["cluster_id", "stratum", "area", "ybar", "n", "wstar"];
    if headers.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            row: 0,
            message: format!("expected header {}, found {}", expected.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, rec) in r.deserialize::<ClusterSummary>().enumerate() {
        let row = i + 1;
        let c = rec.map_err(|e| Error::Schema { path: path.to_path_buf(), row, message: e.to_string() })?;
        let bad = |message: String| Error::Schema { path: path.to_path_buf(), row, message };
        if c.n < 1 {
            return Err(bad("n must be at least 1".into()));
        }
        if !(c.wstar > 0.0 && c.wstar.is_finite()) {
            return Err(bad(format!("wstar must be positive, got {}", c.wstar)));
        }
        if !c.ybar.is_finite() {
            return Err(bad("ybar is not finite".into()));
        }
        if !seen.insert(c.cluster_id) {
            return Err(bad(format!("duplicate cluster id {}", c.cluster_id)));
        }
        rows.push(c);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn row(cluster_id: usize, stratum: usize, area: usize) -> ClusterSummary {
        ClusterSummary { cluster_id, stratum, area, ybar: 0.0, n: 5, wstar: 1.0 }
    }

    #[test]
    fn exhaustive_draw() {
        let mut rng = rng_for(1, &[]);
        let picks = systematic_pps(&[5.0; 6], 6, &mut rng).unwrap();
        let mut ids: Vec<usize> = picks.iter().map(|p| p.0).collect();
        ids.sort();
        assert_eq!(ids, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn certainty_cluster_and_inclusion_frequencies() {
        let sizes = [1.0, 1.0, 1.0, 3.0];
        let reps = 100_000;
        let mut hits = [0usize; 4];
        let mut rng = rng_for(2, &[]);
        for _ in 0..reps {
            for (i, p1, certain) in systematic_pps(&sizes, 2, &mut rng).unwrap() {
                hits[i] += 1;
                if i == 3 {
                    assert!(certain);
                    assert_eq!(p1, 1.0);
                } else {
                    assert!((p1 - 1.0 / 3.0).abs() < 1e-12);
                }
            }
        }
        assert_eq!(hits[3], reps);
        for &h in &hits[..3] {
            let f = h as f64 / reps as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.006, "freq {f}");
        }
    }

    #[test]
    fn pps_frequencies_match_probabilities() {
        let sizes = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let total: f64 = sizes.iter().sum();
        let reps = 100_000;
        let mut hits = [0usize; 7];
        let mut rng = rng_for(3, &[]);
        for _ in 0..reps {
            let picks = systematic_pps(&sizes, 3, &mut rng).unwrap();
            assert_eq!(picks.len(), 3);
            for (i, _, _) in picks {
                hits[i] += 1;
            }
        }
        for i in 0..7 {
            let expect = 3.0 * sizes[i] / total;
            let f = hits[i] as f64 / reps as f64;
            assert!((f - expect).abs() < 0.006, "unit {i}: {f} vs {expect}");
        }
    }

    #[test]
    fn too_many_clusters_rejected() {
        let mut rng = rng_for(1, &[]);
        assert!(systematic_pps(&[1.0, 1.0], 3, &mut rng).is_err());
        assert!(systematic_pps(&[1.0, 0.0], 1, &mut rng).is_err());
    }

    #[test]
    fn negative_binomial_mean_and_variance() {
        let nb = NegBinomial::new(8.0, 9.0).unwrap();
        let mut rng = rng_for(4, &[]);
        let xs: Vec<f64> = (0..1_000_000).map(|_| nb.sample(&mut rng) as f64).collect();
        let m = crate::numeric::mean(&xs);
        let v = crate::numeric::variance_pop(&xs);
        assert!((m - 9.0).abs() < 0.02, "mean {m}");
        assert!((v / nb.variance() - 1.0).abs() < 0.02, "var {v}");
        assert!(NegBinomial::new(0.0, 1.0).is_err());
    }

    #[test]
    fn summarize_counts_strata_and_clusters() {
        let rows = vec![row(0, 0, 0), row(1, 0, 0), row(2, 0, 0), row(3, 1, 0), row(4, 1, 0), row(5, 1, 1), row(6, 2, 2)];
        let areas = summarize_sample(&rows, 4, |h| h == 0).unwrap();
        assert_eq!(areas[0].m_dot(), 5);
        assert_eq!(areas[0].strata_count(), 2);
        assert!(areas[0].estimable());
        assert_eq!(areas[0].strata[1].m_h, 3);
        assert!(!areas[0].strata[1].planned());
        assert!(!areas[1].estimable());
        assert!(!areas[2].estimable());
        assert!(areas[2].strata[0].planned());
        assert_eq!(areas[3].m_dot(), 0);
        assert!(!areas[3].estimable());
        assert!(areas[0].strata[0].urban && !areas[0].strata[1].urban);
    }

    #[test]
    fn csv_round_trip_and_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let rows = vec![
            ClusterSummary { cluster_id: 3, stratum: 1, area: 2, ybar: -0.25, n: 7, wstar: 12.5 },
            ClusterSummary { cluster_id: 4, stratum: 1, area: 2, ybar: 1.0 / 3.0, n: 1, wstar: 0.1 },
        ];
        write_cluster_csv(&path, &rows).unwrap();
        assert_eq!(read_cluster_csv(&path).unwrap(), rows);

        std::fs::write(&path, "cluster_id,stratum,area,ybar,n,weight\n1,0,0,1,1,1\n").unwrap();
        assert!(matches!(read_cluster_csv(&path), Err(Error::Schema { row: 0, .. })));
        std::fs::write(&path, "cluster_id,stratum,area,ybar,n,wstar\n1,0,0,1,1,1\n2,0,0,1,1,-1\n").unwrap();
        assert!(matches!(read_cluster_csv(&path), Err(Error::Schema { row: 2, .. })));
        std::fs::write(&path, "cluster_id,stratum,area,ybar,n,wstar\n1,0,0,abc,1,1\n").unwrap();
        assert!(matches!(read_cluster_csv(&path), Err(Error::Schema { row: 1, .. })));
    }
}
