//! Synthetic sampling universe: geography, superpopulation parameters,
//! the cluster frame and individual-level outcome generators.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, LogNormal, Normal, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stage_rng, SimRng, Stage};
use crate::spatial::{Adjacency, Bym2Params, ScaledIcar};

pub type AreaId = usize;
pub type StratumId = usize;
pub type ClusterId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stratum {
    pub id: StratumId,
    pub admin1: usize,
    pub urban: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeographyConfig {
    pub n_areas: usize,
    pub n_admin1: usize,
    /// Number of admin1 regions that contain only an urban stratum.
    #[serde(default = "default_urban_only")]
    pub urban_only_admin1: usize,
}

fn default_urban_only() -> usize {
    2
}

impl GeographyConfig {
    pub fn new(n_areas: usize, n_admin1: usize) -> Self {
        Self {
            n_areas,
            n_admin1,
            urban_only_admin1: default_urban_only().min(n_admin1.saturating_sub(1)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Geography {
    pub rows: usize,
    pub cols: usize,
    pub admin1_of_area: Vec<usize>,
    pub n_admin1: usize,
    pub urban_only: Vec<bool>,
    pub strata: Vec<Stratum>,
    pub adjacency: Adjacency,
}

impl Geography {
    pub fn n_areas(&self) -> usize {
        self.admin1_of_area.len()
    }

    pub fn areas_in_admin1(&self, a: usize) -> Vec<AreaId> {
        (0..self.n_areas()).filter(|&i| self.admin1_of_area[i] == a).collect()
    }

    pub fn strata_of_admin1(&self, a: usize) -> impl Iterator<Item = &Stratum> {
        self.strata.iter().filter(move |s| s.admin1 == a)
    }

    pub fn is_urban(&self, stratum: StratumId) -> bool {
        self.strata[stratum].urban
    }
}

/// Lattice geography with `n_areas` cells (rook adjacency) split into
/// `n_admin1` contiguous groups along a serpentine ordering. Each admin1 has
/// an urban and a rural stratum except the urban-only ones, chosen at random.
pub fn build_geography(config: &GeographyConfig, seed: u64) -> Result<Geography> {
    let (k, a) = (config.n_areas, config.n_admin1);
    if k < 2 {
        return Err(Error::Geography("at least two areas are required".into()));
    }
    if a == 0 || k < a {
        return Err(Error::Geography(format!("need K >= A >= 1 (K = {k}, A = {a})")));
    }
    if config.urban_only_admin1 > a {
        return Err(Error::Geography(format!(
            "{} urban-only admin1 regions requested but only {a} exist",
            config.urban_only_admin1
        )));
    }
    let cols = (k as f64).sqrt().ceil() as usize;
    let rows = k.div_ceil(cols);
    // A partial last row on an odd row index is right-aligned so the
    // serpentine ordering below stays a path through adjacent cells.
    let last_len = k - (rows - 1) * cols;
    let shift = if (rows - 1) % 2 == 1 { cols - last_len } else { 0 };
    let position = |i: usize| {
        let (r, c) = (i / cols, i % cols);
        if r == rows - 1 {
            (r, c + shift)
        } else {
            (r, c)
        }
    };
    let mut cell = vec![vec![None; cols]; rows];
    for i in 0..k {
        let (r, c) = position(i);
        cell[r][c] = Some(i);
    }
    let mut edges = Vec::new();
    for (r, row) in cell.iter().enumerate() {
        for (c, &id) in row.iter().enumerate() {
            let Some(i) = id else { continue };
            if let Some(Some(j)) = row.get(c + 1) {
                edges.push((i, *j));
            }
            if let Some(Some(j)) = cell.get(r + 1).map(|next| next[c]) {
                edges.push((i, j));
            }
        }
    }
    let adjacency = Adjacency::from_edges(k, &edges)?;

    // serpentine order keeps consecutive cells adjacent
    let snake: Vec<usize> = cell
        .iter()
        .enumerate()
        .flat_map(|(r, row)| {
            let ids: Vec<usize> = row.iter().flatten().copied().collect();
            if r % 2 == 0 {
                ids
            } else {
                ids.into_iter().rev().collect()
            }
        })
        .collect();
    let mut admin1_of_area = vec![0; k];
    for (pos, &area) in snake.iter().enumerate() {
        admin1_of_area[area] = pos * a / k;
    }

    let mut rng = stage_rng(seed, Stage::Geography, &[]);
    let mut order: Vec<usize> = (0..a).collect();
    order.shuffle(&mut rng);
    let mut urban_only = vec![false; a];
    for &g in order.iter().take(config.urban_only_admin1) {
        urban_only[g] = true;
    }
    let mut strata = Vec::new();
    for (g, &only_urban) in urban_only.iter().enumerate() {
        strata.push(Stratum { id: strata.len(), admin1: g, urban: true });
        if !only_urban {
            strata.push(Stratum { id: strata.len(), admin1: g, urban: false });
        }
    }
    Ok(Geography { rows, cols, admin1_of_area, n_admin1: a, urban_only, strata, adjacency })
}

/// Simulation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    #[serde(rename = "1")]
    CorrectlySpecified,
    #[serde(rename = "1a")]
    MoreClusters,
    #[serde(rename = "2")]
    VaryingUrban,
    #[serde(rename = "3")]
    StudentT,
    #[serde(rename = "4")]
    ClusterCorrelation,
    #[serde(rename = "reenum")]
    Reenumeration,
}

impl Setting {
    pub const ALL: [Setting; 6] = [
        Setting::CorrectlySpecified,
        Setting::MoreClusters,
        Setting::VaryingUrban,
        Setting::StudentT,
        Setting::ClusterCorrelation,
        Setting::Reenumeration,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Setting::CorrectlySpecified => "1",
            Setting::MoreClusters => "1a",
            Setting::VaryingUrban => "2",
            Setting::StudentT => "3",
            Setting::ClusterCorrelation => "4",
            Setting::Reenumeration => "reenum",
        }
    }

    pub fn code(self) -> u64 {
        Setting::ALL.iter().position(|&s| s == self).unwrap() as u64 + 1
    }

    pub fn outcome_kind(self) -> OutcomeKind {
        match self {
            Setting::StudentT => OutcomeKind::StudentT { df: 5.0 },
            Setting::ClusterCorrelation => OutcomeKind::IntraClusterNormal { rho: 0.25 },
            _ => OutcomeKind::Normal,
        }
    }

    pub fn cluster_multiplier(self) -> usize {
        if self == Setting::MoreClusters {
            5
        } else {
            1
        }
    }

    pub fn reenumerate(self) -> bool {
        self == Setting::Reenumeration
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .iter()
            .copied()
            .find(|st| st.tag().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownSetting(s.to_string()))
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Individual-level outcome distribution within a stratum-area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeKind {
    Normal,
    StudentT { df: f64 },
    IntraClusterNormal { rho: f64 },
}

impl OutcomeKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            OutcomeKind::Normal => Ok(()),
            OutcomeKind::StudentT { df } if df > 2.0 => Ok(()),
            OutcomeKind::StudentT { df } => Err(Error::Distribution(format!(
                "student-t with df = {df} has no finite variance"
            ))),
            OutcomeKind::IntraClusterNormal { rho } if (0.0..1.0).contains(&rho) => Ok(()),
            OutcomeKind::IntraClusterNormal { rho } => {
                Err(Error::Distribution(format!("correlation {rho} outside [0, 1)")))
            }
        }
    }
}

pub const BETA_TRUE: [f64; 4] = [-1.0, -0.15, -0.1, 0.25];
pub const ETA_TRUE: [f64; 4] = [0.5, -0.15, -0.1, 0.25];
pub const SD_B_TRUE: f64 = 0.32;
pub const SD_E_TRUE: f64 = 0.22;
pub const PHI_TRUE: f64 = 0.75;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuperpopParams {
    pub setting: Setting,
    pub beta: Vec<f64>,
    pub eta: Vec<f64>,
    /// Mean-model covariates, K x 4 row-major, leading intercept column.
    pub x: Vec<[f64; 4]>,
    /// Variance-model covariates, K x 4 row-major, leading intercept column.
    pub z: Vec<[f64; 4]>,
    pub gamma: Vec<f64>,
    pub kappa: Vec<f64>,
    pub b: Vec<f64>,
    pub e: Vec<f64>,
    /// Structured parts of `b` and `e`.
    pub u_b: Vec<f64>,
    pub u_e: Vec<f64>,
    /// `theta_hi` per area, indexed `[rural, urban]`.
    pub theta_hi: Vec<[f64; 2]>,
    /// `sigma2_hi` per area, indexed `[rural, urban]`.
    pub sigma2_hi: Vec<[f64; 2]>,
}

impl SuperpopParams {
    pub fn n_areas(&self) -> usize {
        self.x.len()
    }

    pub fn theta(&self, area: AreaId, urban: bool) -> f64 {
        self.theta_hi[area][urban as usize]
    }

    pub fn sigma2(&self, area: AreaId, urban: bool) -> f64 {
        self.sigma2_hi[area][urban as usize]
    }
}

fn dot4(a: &[f64; 4], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws covariates, random effects and urban effects for a setting.
pub fn gen_superpopulation(geog: &Geography, setting: Setting, seed: u64) -> Result<SuperpopParams> {
    let k = geog.n_areas();
    let icar = ScaledIcar::from_adjacency(&geog.adjacency)?;
    let mut rng = stage_rng(seed, Stage::Superpopulation, &[setting.code()]);
    let covariates = |rng: &mut SimRng| -> Vec<[f64; 4]> {
        (0..k)
            .map(|_| {
                [1.0, rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)]
            })
            .collect()
    };
    let x = covariates(&mut rng);
    let z = covariates(&mut rng);
    let tau_b = SD_B_TRUE.powi(-2);
    let tau_e = SD_E_TRUE.powi(-2);
    let bb = Bym2Params::draw(&icar, tau_b, PHI_TRUE, &mut rng);
    let ee = Bym2Params::draw(&icar, tau_e, PHI_TRUE, &mut rng);
    let (b, e) = (bb.effect(), ee.effect());
    let (gamma, kappa) = if setting == Setting::VaryingUrban {
        let g = Normal::new(1.0, 1.0).unwrap();
        let kk = Normal::new(1.5f64.ln(), 0.25).unwrap();
        let gamma: Vec<f64> = (0..k).map(|_| g.sample(&mut rng)).collect();
        let kappa: Vec<f64> = (0..k).map(|_| kk.sample(&mut rng)).collect();
        (gamma, kappa)
    } else {
        (vec![1.0; k], vec![0.0; k])
    };
    let theta_hi = (0..k)
        .map(|i| {
            let base = dot4(&x[i], &BETA_TRUE) + b[i];
            [base, base + gamma[i]]
        })
        .collect();
    let sigma2_hi = (0..k)
        .map(|i| {
            let base = dot4(&z[i], &ETA_TRUE) + e[i];
            [base.exp(), (base + kappa[i]).exp()]
        })
        .collect();
    Ok(SuperpopParams {
        setting,
        beta: BETA_TRUE.to_vec(),
        eta: ETA_TRUE.to_vec(),
        x,
        z,
        gamma,
        kappa,
        b,
        e,
        u_b: bb.u,
        u_e: ee.u,
        theta_hi,
        sigma2_hi,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameConfig {
    /// Clusters per urban stratum (`M_h`).
    pub urban_clusters: usize,
    /// Clusters per rural stratum (`M_h`).
    pub rural_clusters: usize,
    /// Mean area population (log-normal across areas).
    pub mean_area_population: f64,
    /// Log-scale SD of area populations.
    #[serde(default = "default_pop_log_sd")]
    pub population_log_sd: f64,
    /// Beta parameters for the urban population share of mixed areas.
    #[serde(default = "default_urban_share")]
    pub urban_share_beta: (f64, f64),
    #[serde(default)]
    pub reenumerate: bool,
    /// Explicit per-area populations (overrides the log-normal draw).
    #[serde(default)]
    pub area_population: Option<Vec<f64>>,
    /// Explicit per-area urban shares (overrides the beta draw).
    #[serde(default)]
    pub urban_share: Option<Vec<f64>>,
    /// Explicit per-stratum cluster counts.
    #[serde(default)]
    pub stratum_clusters: Option<Vec<usize>>,
}

fn default_pop_log_sd() -> f64 {
    0.5
}

fn default_urban_share() -> (f64, f64) {
    (2.0, 4.0)
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            urban_clusters: 300,
            rural_clusters: 600,
            mean_area_population: 100_000.0,
            population_log_sd: default_pop_log_sd(),
            urban_share_beta: default_urban_share(),
            reenumerate: false,
            area_population: None,
            urban_share: None,
            stratum_clusters: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: ClusterId,
    pub stratum: StratumId,
    pub area: AreaId,
    /// True number of individuals `N_c`.
    pub true_size: u64,
    /// Size listed in the sampling frame `L_c`.
    pub listed_size: u64,
}

#[derive(Debug, Clone)]
pub struct SurveyFrame {
    pub clusters: Vec<Cluster>,
    /// Cluster indices per stratum.
    pub stratum_clusters: Vec<Vec<ClusterId>>,
    /// `sum_c N_c` per stratum.
    pub stratum_population: Vec<u64>,
    pub stratum_urban: Vec<bool>,
    pub n_areas: usize,
}

impl SurveyFrame {
    pub fn cluster(&self, id: ClusterId) -> &Cluster {
        &self.clusters[id]
    }

    pub fn n_strata(&self) -> usize {
        self.stratum_clusters.len()
    }

    pub fn stratum_listed_total(&self, h: StratumId) -> u64 {
        self.stratum_clusters[h].iter().map(|&c| self.clusters[c].listed_size).sum()
    }

    /// Urban share of each area's population, from the frame.
    pub fn urban_proportion(&self) -> Vec<f64> {
        let mut urban = vec![0u64; self.n_areas];
        let mut total = vec![0u64; self.n_areas];
        for c in &self.clusters {
            total[c.area] += c.true_size;
            if self.stratum_urban[c.stratum] {
                urban[c.area] += c.true_size;
            }
        }
        urban
            .iter()
            .zip(&total)
            .map(|(&u, &t)| if t == 0 { 0.0 } else { u as f64 / t as f64 })
            .collect()
    }

    /// Superpopulation area mean `X'beta + p gamma + b` and the
    /// population-weighted within-stratum variance.
    pub fn area_truth(&self, params: &SuperpopParams) -> (Vec<f64>, Vec<f64>) {
        let p = self.urban_proportion();
        (0..self.n_areas)
            .map(|i| {
                let theta = params.theta_hi[i][0] + p[i] * params.gamma[i];
                let s2 = (1.0 - p[i]) * params.sigma2_hi[i][0] + p[i] * params.sigma2_hi[i][1];
                (theta, s2)
            })
            .unzip()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["cluster_id", "stratum", "area", "true_size", "listed_size"])?;
        for c in &self.clusters {
            w.write_record([
                c.id.to_string(),
                c.stratum.to_string(),
                c.area.to_string(),
                c.true_size.to_string(),
                c.listed_size.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Splits `total` items over `shares` with expectation exactly
/// `total * share_i`, using systematic rounding with a random offset.
/// Entries with positive share receive at least one item when possible.
pub fn allocate_clusters<R: Rng + ?Sized>(total: usize, shares: &[f64], rng: &mut R) -> Vec<usize> {
    let sum: f64 = shares.iter().sum();
    let offset: f64 = rng.random();
    let mut counts = vec![0usize; shares.len()];
    let mut cum = 0.0;
    for (i, s) in shares.iter().enumerate() {
        let lo = cum;
        cum += total as f64 * s / sum;
        // number of points offset + j falling in [lo, cum)
        let count = ((cum - offset).ceil() - (lo - offset).ceil()).max(0.0);
        counts[i] = count as usize;
    }
    let assigned: usize = counts.iter().sum();
    if assigned != total {
        // guard against floating-point drift at the end of the interval
        let last = shares.iter().rposition(|&s| s > 0.0).unwrap_or(0);
        counts[last] = (counts[last] + total).saturating_sub(assigned);
    }
    let positive = shares.iter().filter(|&&s| s > 0.0).count();
    if total >= positive {
        for i in 0..shares.len() {
            if shares[i] > 0.0 && counts[i] == 0 {
                let donor = (0..counts.len()).max_by_key(|&j| counts[j]).unwrap();
                counts[donor] -= 1;
                counts[i] = 1;
            }
        }
    }
    counts
}

pub fn build_frame(geog: &Geography, config: &FrameConfig, seed: u64) -> Result<SurveyFrame> {
    let k = geog.n_areas();
    let mut rng = stage_rng(seed, Stage::Frame, &[]);
    let pops: Vec<f64> = match &config.area_population {
        Some(p) if p.len() == k => p.clone(),
        Some(p) => {
            return Err(Error::Frame(format!("{} area populations given for {k} areas", p.len())))
        }
        None => {
            let sd = config.population_log_sd;
            let mu = config.mean_area_population.ln() - 0.5 * sd * sd;
            let dist = LogNormal::new(mu, sd).map_err(|e| Error::Frame(e.to_string()))?;
            (0..k).map(|_| dist.sample(&mut rng)).collect()
        }
    };
    if pops.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Frame("area populations must be positive".into()));
    }
    let shares: Vec<f64> = match &config.urban_share {
        Some(s) if s.len() == k => s.clone(),
        Some(s) => return Err(Error::Frame(format!("{} urban shares given for {k} areas", s.len()))),
        None => {
            let (a, b) = config.urban_share_beta;
            let dist = Beta::new(a, b).map_err(|e| Error::Frame(e.to_string()))?;
            (0..k).map(|_| dist.sample(&mut rng)).collect()
        }
    };
    let stratum_m: Vec<usize> = match &config.stratum_clusters {
        Some(m) if m.len() == geog.strata.len() => m.clone(),
        Some(m) => {
            return Err(Error::Frame(format!(
                "{} stratum cluster counts given for {} strata",
                m.len(),
                geog.strata.len()
            )))
        }
        None => geog
            .strata
            .iter()
            .map(|s| if s.urban { config.urban_clusters } else { config.rural_clusters })
            .collect(),
    };
    if let Some(h) = stratum_m.iter().position(|&m| m < 2) {
        return Err(Error::Frame(format!("stratum {h} has M_h = {} < 2", stratum_m[h])));
    }

    let mut clusters = Vec::new();
    let mut stratum_clusters = vec![Vec::new(); geog.strata.len()];
    let mut stratum_population = vec![0u64; geog.strata.len()];
    let relisting = Normal::new(0.0, 1.0).unwrap();
    for s in &geog.strata {
        let areas = geog.areas_in_admin1(s.admin1);
        let urban_only = geog.urban_only[s.admin1];
        let area_pop: Vec<f64> = areas
            .iter()
            .map(|&i| {
                let share = if urban_only { 1.0 } else { shares[i] };
                pops[i] * if s.urban { share } else { 1.0 - share }
            })
            .collect();
        let counts = allocate_clusters(stratum_m[s.id], &area_pop, &mut rng);
        for ((&area, &pop), &m) in areas.iter().zip(&area_pop).zip(&counts) {
            if m == 0 {
                continue;
            }
            let total = (pop.round() as u64).max(m as u64);
            let base = total / m as u64;
            let extra = (total % m as u64) as usize;
            for j in 0..m {
                let n = base + u64::from(j < extra);
                let listed = if config.reenumerate {
                    let draw = 0.85 * n as f64 + 0.2 * n as f64 * relisting.sample(&mut rng);
                    draw.round().max(1.0) as u64
                } else {
                    n
                };
                let id = clusters.len();
                clusters.push(Cluster { id, stratum: s.id, area, true_size: n, listed_size: listed });
                stratum_clusters[s.id].push(id);
                stratum_population[s.id] += n;
            }
        }
    }
    Ok(SurveyFrame {
        clusters,
        stratum_clusters,
        stratum_population,
        stratum_urban: geog.strata.iter().map(|s| s.urban).collect(),
        n_areas: k,
    })
}

/// Draws `n_draws` individual outcomes for one cluster.
///
/// With `IntraClusterNormal` all draws of a call share one cluster effect,
/// giving exchangeable correlation `rho`.
pub fn gen_outcomes<R: Rng + ?Sized>(
    frame: &SurveyFrame,
    params: &SuperpopParams,
    kind: OutcomeKind,
    cluster_id: ClusterId,
    n_draws: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    kind.validate()?;
    let cluster = frame
        .clusters
        .get(cluster_id)
        .ok_or_else(|| Error::Frame(format!("unknown cluster {cluster_id}")))?;
    if n_draws == 0 {
        return Err(Error::Frame("n_draws must be at least 1".into()));
    }
    let urban = frame.stratum_urban[cluster.stratum];
    let mean = params.theta(cluster.area, urban);
    let var = params.sigma2(cluster.area, urban);
    Ok(draw_outcomes(mean, var, kind, n_draws, rng))
}

pub fn draw_outcomes<R: Rng + ?Sized>(
    mean: f64,
    var: f64,
    kind: OutcomeKind,
    n: usize,
    rng: &mut R,
) -> Vec<f64> {
    match kind {
        OutcomeKind::Normal => {
            let sd = var.sqrt();
            (0..n).map(|_| mean + sd * rng.sample::<f64, _>(StandardNormal)).collect()
        }
        OutcomeKind::StudentT { df } => {
            let t = StudentT::new(df).expect("validated df");
            let scale = (var * (df - 2.0) / df).sqrt();
            (0..n).map(|_| mean + scale * t.sample(rng)).collect()
        }
        OutcomeKind::IntraClusterNormal { rho } => {
            let shared = (rho * var).sqrt() * rng.sample::<f64, _>(StandardNormal);
            let sd = ((1.0 - rho) * var).sqrt();
            (0..n)
                .map(|_| mean + shared + sd * rng.sample::<f64, _>(StandardNormal))
                .collect()
        }
    }
}
