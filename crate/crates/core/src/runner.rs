//! Config-driven simulation runs and the file-based estimate/evaluate paths.
//!
//! Layout of a run directory for one setting:
//!
//! ```text
//! setting-<tag>/
//!   config.json  truth.csv  covariates.csv  adjacency.csv  strata.csv
//!   pool.csv                       design-only replicates (truth side)
//!   empirical_variance.csv
//!   rep-0000/ clusters.csv estimates.csv replicate.json
//!             <model>/summary.csv <model>/diagnostics.json [<model>/draws.csv]
//!   metrics.csv  distributions.csv  run_summary.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{draw_sample, read_cluster_csv, summarize_sample, write_cluster_csv, AreaSample, ClusterSummary, SampleConfig};
use crate::distributions::{sasw_eigensystem, sasw_params, simple_params, v_dagger, v_star, ChiSquareParams, SimpleDf};
use crate::error::{Error, Result};
use crate::estimators::{estimate_all, read_estimates_csv, write_estimates_csv, DesignEstimate};
use crate::evaluation::{
    compare_distributions, empirical_design_variance, evaluate_estimates, model_design_variance, ratio_metrics,
    write_metrics_csv, DistributionComparison, MetricTable,
};
use crate::frame::{build_frame, build_geography, gen_superpopulation, FrameConfig, Geography, GeographyConfig, Setting, SuperpopParams, SurveyFrame};
use crate::inference::{
    fit, summarize_posterior, FitData, Interval, McmcConfig, ModelVariant, PosteriorDraws, PriorConfig, SamplingDist,
    VarianceLatent,
};
use crate::rng::derive_seed;
use crate::spatial::{Adjacency, ScaledIcar};

/// Everything needed to run one simulation setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub setting: Setting,
    pub n_areas: usize,
    pub n_admin1: usize,
    /// Admin1 regions without rural population; defaults to `min(2, A - 1)`.
    pub urban_only_admin1: Option<usize>,
    /// `G`, the number of fitted replicates.
    pub replicates: usize,
    /// Design-only replicates used for the truth side of the variance
    /// ratios and distribution comparisons; the first `replicates` of them
    /// coincide with the fitted ones.
    pub pool_replicates: usize,
    pub mcmc: McmcConfig,
    pub prior: PriorConfig,
    pub models: Vec<ModelVariant>,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Multiplier on `m_h`; defaults to the setting's own (5 for `1a`).
    pub cluster_multiplier: Option<usize>,
    pub frame: FrameConfig,
    pub sample: SampleConfig,
    pub simple_df: SimpleDf,
    pub interval_level: f64,
    pub save_draws: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            setting: Setting::CorrectlySpecified,
            n_areas: 60,
            n_admin1: 10,
            urban_only_admin1: None,
            replicates: 30,
            pool_replicates: 200,
            mcmc: McmcConfig { chains: 2, warmup: 1000, draws: 500, thin: 4, ..McmcConfig::default() },
            prior: PriorConfig::default(),
            models: ModelVariant::ALL.to_vec(),
            seed: 1,
            out_dir: PathBuf::from("runs"),
            cluster_multiplier: None,
            frame: FrameConfig::default(),
            sample: SampleConfig::default(),
            simple_df: SimpleDf::default(),
            interval_level: 0.9,
            save_draws: false,
        }
    }
}

impl RunConfig {
    /// Reads TOML or JSON, chosen by file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            _ => toml::from_str(&text)?,
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("model list is empty".into()));
        }
        if !(self.interval_level > 0.0 && self.interval_level < 1.0) {
            return Err(Error::Config(format!("interval level {} outside (0, 1)", self.interval_level)));
        }
        self.mcmc.validate()?;
        self.prior.validate()
    }

    pub fn multiplier(&self) -> usize {
        self.cluster_multiplier.unwrap_or_else(|| self.setting.cluster_multiplier())
    }

    pub fn setting_dir(&self) -> PathBuf {
        self.out_dir.join(format!("setting-{}", self.setting.tag()))
    }
}

/// Area-level covariates: `area,urban_prop,x_*,z_*`.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub urban_prop: Vec<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

impl Covariates {
    pub fn from_params(params: &SuperpopParams, urban_prop: Vec<f64>) -> Self {
        let k = params.x.len();
        Self {
            urban_prop,
            x: DMatrix::from_fn(k, 4, |i, j| params.x[i][j]),
            z: DMatrix::from_fn(k, 4, |i, j| params.z[i][j]),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["area".to_string(), "urban_prop".to_string()];
        header.extend((0..self.x.ncols()).map(|j| format!("x_{j}")));
        header.extend((0..self.z.ncols()).map(|j| format!("z_{j}")));
        w.write_record(&header)?;
        for i in 0..self.urban_prop.len() {
            let mut rec = vec![i.to_string(), self.urban_prop[i].to_string()];
            rec.extend(self.x.row(i).iter().map(|v| v.to_string()));
            rec.extend(self.z.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Rows must be ordered by area `0..K`.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let schema = |row: usize, message: String| Error::Schema { path: path.to_path_buf(), row, message };
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let header = r.headers()?.clone();
        if header.get(0) != Some("area") || header.get(1) != Some("urban_prop") {
            return Err(schema(0, "header must start with area,urban_prop".into()));
        }
        let xcols: Vec<usize> = (0..header.len()).filter(|&c| header[c].starts_with("x_")).collect();
        let zcols: Vec<usize> = (0..header.len()).filter(|&c| header[c].starts_with("z_")).collect();
        if xcols.is_empty() || zcols.is_empty() {
            return Err(schema(0, "need at least one x_ and one z_ column".into()));
        }
        let (mut urban, mut xs, mut zs) = (Vec::new(), Vec::new(), Vec::new());
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |c: usize| -> Result<f64> {
                let v: f64 = rec
                    .get(c)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| schema(row + 1, format!("column {} is not a number", &header[c])))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(schema(row + 1, format!("column {} is not finite", &header[c])))
                }
            };
            if rec.get(0).and_then(|s| s.parse::<usize>().ok()) != Some(row) {
                return Err(schema(row + 1, format!("expected area {row}")));
            }
            let p = num(1)?;
            if !(0.0..=1.0).contains(&p) {
                return Err(schema(row + 1, format!("urban_prop {p} outside [0, 1]")));
            }
            urban.push(p);
            for &c in &xcols {
                xs.push(num(c)?);
            }
            for &c in &zcols {
                zs.push(num(c)?);
            }
        }
        let k = urban.len();
        Ok(Self {
            urban_prop: urban,
            x: DMatrix::from_row_slice(k, xcols.len(), &xs),
            z: DMatrix::from_row_slice(k, zcols.len(), &zs),
        })
    }
}

/// Stratum urban flags: `stratum,urban`.
pub fn write_strata_csv(path: &Path, urban: &[bool]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["stratum", "urban"])?;
    for (h, u) in urban.iter().enumerate() {
        w.write_record([h.to_string(), u.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_strata_csv(path: &Path) -> Result<BTreeMap<usize, bool>> {
    #[derive(Deserialize)]
    struct Row {
        stratum: usize,
        urban: bool,
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for (i, rec) in r.deserialize::<Row>().enumerate() {
        let rec = rec.map_err(|e| Error::Schema { path: path.to_path_buf(), row: i + 1, message: e.to_string() })?;
        out.insert(rec.stratum, rec.urban);
    }
    Ok(out)
}

/// Groups cluster rows into areas, with `n_areas` inferred from the data
/// when not given. Strata absent from `urban` are treated as rural.
pub fn areas_from_clusters(rows: &[ClusterSummary], n_areas: Option<usize>, urban: &BTreeMap<usize, bool>) -> Result<Vec<AreaSample>> {
    let k = n_areas.unwrap_or_else(|| rows.iter().map(|r| r.area + 1).max().unwrap_or(0));
    summarize_sample(rows, k, |h| urban.get(&h).copied().unwrap_or(false))
}

/// Reads a cluster summary CSV and writes per-area design estimates.
pub fn estimate_from_csv(input: &Path, output: &Path, n_areas: Option<usize>) -> Result<Vec<DesignEstimate>> {
    let rows = read_cluster_csv(input)?;
    if rows.is_empty() {
        return Err(Error::Schema { path: input.to_path_buf(), row: 0, message: "no cluster rows".into() });
    }
    let areas = areas_from_clusters(&rows, n_areas, &BTreeMap::new())?;
    let est = estimate_all(&areas)?;
    write_estimates_csv(output, &est)?;
    Ok(est)
}

/// Builds model input for a variant; unstructured variance models use an
/// intercept-only `Z`.
pub fn fit_data_for(
    variant: ModelVariant,
    estimates: &[DesignEstimate],
    cov: &Covariates,
    icar: &ScaledIcar,
    areas: Option<&[AreaSample]>,
    mode: SimpleDf,
) -> Result<FitData> {
    let z = match variant.latent() {
        Some(VarianceLatent::Unstructured) => DMatrix::from_element(cov.z.nrows(), 1, 1.0),
        _ => cov.z.clone(),
    };
    let data = FitData::new(estimates, cov.x.clone(), cov.urban_prop.clone(), z, icar.clone())?;
    match (variant.is_smooth(), areas) {
        (true, Some(a)) => data.with_design(a, mode),
        (true, None) => Err(Error::ModelData(format!("model {variant} needs the cluster sample"))),
        (false, _) => Ok(data),
    }
}

/// Per-area posterior summary row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub area: usize,
    pub theta_mean: f64,
    pub theta_lower: f64,
    pub theta_upper: f64,
    pub sigma2_mean: Option<f64>,
    pub sigma2_lower: Option<f64>,
    pub sigma2_upper: Option<f64>,
    /// Model design variance at the posterior-mean `sigma2` (raw `V̂` for
    /// the standard model).
    pub design_variance: Option<f64>,
}

impl SummaryRow {
    pub fn theta_interval(&self) -> Interval {
        Interval { mean: self.theta_mean, lower: self.theta_lower, upper: self.theta_upper }
    }
}

pub fn summary_rows(
    draws: &PosteriorDraws,
    level: f64,
    areas: Option<&[AreaSample]>,
    estimates: &[DesignEstimate],
) -> Result<Vec<SummaryRow>> {
    summarize_posterior(draws, level)?
        .into_iter()
        .map(|s| {
            let design_variance = match (areas, s.sigma2) {
                (Some(a), Some(sig)) if a[s.area].estimable() => {
                    model_design_variance(draws.variant, &a[s.area], estimates[s.area].v_hat, sig.mean)?
                }
                _ if draws.variant == ModelVariant::Standard && estimates[s.area].estimable => Some(estimates[s.area].v_hat),
                _ => None,
            };
            Ok(SummaryRow {
                area: s.area,
                theta_mean: s.theta.mean,
                theta_lower: s.theta.lower,
                theta_upper: s.theta.upper,
                sigma2_mean: s.sigma2.map(|i| i.mean),
                sigma2_lower: s.sigma2.map(|i| i.lower),
                sigma2_upper: s.sigma2.map(|i| i.upper),
                design_variance,
            })
        })
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e: csv::Error| Error::Schema { path: path.to_path_buf(), row: i + 1, message: e.to_string() }))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Diagnostics written next to each fit's summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub model: ModelVariant,
    pub seed: u64,
    pub converged: bool,
    pub max_rhat: f64,
    pub min_ess: f64,
    pub flagged: Vec<String>,
    pub acceptance: BTreeMap<String, f64>,
}

/// Saves summary, diagnostics and optionally draws for one fit.
pub fn write_fit_outputs(
    dir: &Path,
    draws: &PosteriorDraws,
    seed: u64,
    level: f64,
    areas: Option<&[AreaSample]>,
    estimates: &[DesignEstimate],
    save_draws: bool,
) -> Result<FitReport> {
    create_dir(dir)?;
    write_rows(&dir.join("summary.csv"), &summary_rows(draws, level, areas, estimates)?)?;
    let d = &draws.diagnostics;
    let report = FitReport {
        model: draws.variant,
        seed,
        converged: d.converged,
        max_rhat: d.max_rhat,
        min_ess: d.min_ess,
        flagged: d.flagged.clone(),
        acceptance: draws.acceptance.clone(),
    };
    write_json(&dir.join("diagnostics.json"), &report)?;
    if save_draws {
        draws.write_csv(&dir.join("draws.csv"), 1)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct TruthRow {
    area: usize,
    theta: f64,
    sigma2: f64,
    gamma: f64,
    urban_prop: f64,
}

/// Design-side quantities at the true parameters for one replicate/area.
/// Distribution columns describe `V̂ ~ scale * chi2_df`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolRow {
    pub replicate: usize,
    pub area: usize,
    pub theta_hat: f64,
    pub v_hat: f64,
    pub estimable: bool,
    pub v_dagger: Option<f64>,
    pub v_star: Option<f64>,
    pub simple_scale: Option<f64>,
    pub simple_df: Option<f64>,
    pub sasw_scale: Option<f64>,
    pub sasw_df: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct EmpiricalRow {
    area: usize,
    v_emp: Option<f64>,
    valid_replicates: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Failure {
    pub replicate: usize,
    pub model: Option<ModelVariant>,
    pub error: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub setting: String,
    pub replicates: usize,
    pub fits: usize,
    pub failures: Vec<Failure>,
    /// `(replicate, model)` pairs that missed the convergence thresholds.
    pub non_converged: Vec<(usize, ModelVariant)>,
}

impl RunSummary {
    pub fn success(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Population, frame and design shared by all replicates of a setting.
pub struct SettingContext {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub geography: Geography,
    pub params: SuperpopParams,
    pub frame: SurveyFrame,
    pub icar: ScaledIcar,
    pub covariates: Covariates,
    pub truth_theta: Vec<f64>,
    pub truth_sigma2: Vec<f64>,
    pub sample: SampleConfig,
}

impl SettingContext {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let setting = config.setting;
        let mut gcfg = GeographyConfig::new(config.n_areas, config.n_admin1);
        if let Some(u) = config.urban_only_admin1 {
            gcfg.urban_only_admin1 = u;
        }
        let geography = build_geography(&gcfg, config.seed)?;
        let params = gen_superpopulation(&geography, setting, config.seed)?;
        let mut fcfg = config.frame.clone();
        fcfg.reenumerate |= setting.reenumerate();
        let frame = build_frame(&geography, &fcfg, derive_seed(config.seed, &[setting.code()]))?;
        let icar = ScaledIcar::from_adjacency(&geography.adjacency)?;
        let covariates = Covariates::from_params(&params, frame.urban_proportion());
        let (truth_theta, truth_sigma2) = frame.area_truth(&params);
        let mut sample = config.sample.clone();
        sample.multiplier = config.multiplier();
        sample.validate(&frame)?;
        Ok(Self {
            config: config.clone(),
            dir: config.setting_dir(),
            geography,
            params,
            frame,
            icar,
            covariates,
            truth_theta,
            truth_sigma2,
            sample,
        })
    }

    pub fn replicate_seed(&self, g: usize) -> u64 {
        derive_seed(self.config.seed, &[self.config.setting.code(), g as u64])
    }

    pub fn fit_seed(&self, g: usize, variant: ModelVariant) -> u64 {
        let code = ModelVariant::ALL.iter().position(|&m| m == variant).unwrap_or(0) as u64;
        derive_seed(self.replicate_seed(g), &[100 + code])
    }

    pub fn replicate_dir(&self, g: usize) -> PathBuf {
        self.dir.join(format!("rep-{g:04}"))
    }

    /// Sample, areas and design estimates for replicate `g`.
    pub fn design_replicate(&self, g: usize) -> Result<(Vec<ClusterSummary>, Vec<AreaSample>, Vec<DesignEstimate>)> {
        let rows = draw_sample(&self.frame, &self.params, self.config.setting.outcome_kind(), &self.sample, self.replicate_seed(g))?;
        let areas = summarize_sample(&rows, self.frame.n_areas, |h| self.frame.stratum_urban[h])?;
        let est = estimate_all(&areas)?;
        Ok((rows, areas, est))
    }

    fn pool_rows(&self, g: usize) -> Result<Vec<PoolRow>> {
        let (_, areas, est) = self.design_replicate(g)?;
        let mode = self.config.simple_df;
        Ok(areas
            .iter()
            .zip(&est)
            .map(|(a, e)| {
                let i = a.area;
                let s2 = self.truth_sigma2[i];
                let simple = simple_params(a, s2, mode).ok();
                let sasw = if e.estimable {
                    sasw_eigensystem(a)
                        .ok()
                        .filter(|eig| eig.rank() > 0)
                        .and_then(|eig| sasw_params(&eig, self.params.gamma[i], s2).ok())
                } else {
                    None
                };
                let scale = |p: &ChiSquareParams| p.scale * p.theoretical_variance;
                PoolRow {
                    replicate: g,
                    area: i,
                    theta_hat: e.theta_hat,
                    v_hat: e.v_hat,
                    estimable: e.estimable,
                    v_dagger: e.estimable.then(|| v_dagger(a, s2).ok()).flatten(),
                    v_star: e.estimable.then(|| v_star(a, s2).ok()).flatten(),
                    simple_scale: simple.as_ref().map(scale),
                    simple_df: simple.map(|p| p.df),
                    sasw_scale: sasw.as_ref().map(scale),
                    sasw_df: sasw.map(|p| p.df),
                }
            })
            .collect())
    }

    fn write_population(&self) -> Result<()> {
        create_dir(&self.dir)?;
        write_json(&self.dir.join("config.json"), &self.config)?;
        let truth: Vec<TruthRow> = (0..self.frame.n_areas)
            .map(|i| TruthRow {
                area: i,
                theta: self.truth_theta[i],
                sigma2: self.truth_sigma2[i],
                gamma: self.params.gamma[i],
                urban_prop: self.covariates.urban_prop[i],
            })
            .collect();
        write_rows(&self.dir.join("truth.csv"), &truth)?;
        self.covariates.write_csv(&self.dir.join("covariates.csv"))?;
        self.geography.adjacency.write_edge_csv(&self.dir.join("adjacency.csv"))?;
        write_strata_csv(&self.dir.join("strata.csv"), &self.frame.stratum_urban)
    }

    fn fit_one(
        &self,
        g: usize,
        variant: ModelVariant,
        areas: &[AreaSample],
        est: &[DesignEstimate],
        empirical: Option<&[Option<f64>]>,
    ) -> Result<FitReport> {
        let mut data = fit_data_for(variant, est, &self.covariates, &self.icar, Some(areas), self.config.simple_df)?;
        if let Some(v) = empirical {
            data = data.with_empirical_variance(v.to_vec());
        }
        let seed = self.fit_seed(g, variant);
        let draws = fit(variant, &data, &self.config.prior, &self.config.mcmc, seed)?;
        write_fit_outputs(
            &self.replicate_dir(g).join(variant.name()),
            &draws,
            seed,
            self.config.interval_level,
            Some(areas),
            est,
            self.config.save_draws,
        )
    }

    /// Samples, estimates and fits every non-oracle model for replicate `g`.
    pub fn run_replicate(&self, g: usize) -> (Vec<Failure>, Vec<FitReport>) {
        let dir = self.replicate_dir(g);
        let prepared = (|| -> Result<_> {
            create_dir(&dir)?;
            let (rows, areas, est) = self.design_replicate(g)?;
            write_cluster_csv(&dir.join("clusters.csv"), &rows)?;
            write_estimates_csv(&dir.join("estimates.csv"), &est)?;
            let seeds: BTreeMap<String, u64> =
                self.config.models.iter().map(|&m| (m.name().to_string(), self.fit_seed(g, m))).collect();
            write_json(
                &dir.join("replicate.json"),
                &serde_json::json!({
                    "setting": self.config.setting.tag(),
                    "replicate": g,
                    "root_seed": self.config.seed,
                    "sample_seed": self.replicate_seed(g),
                    "fit_seeds": seeds,
                }),
            )?;
            Ok((areas, est))
        })();
        let (areas, est) = match prepared {
            Ok(x) => x,
            Err(e) => return (vec![Failure { replicate: g, model: None, error: e.to_string() }], Vec::new()),
        };
        let mut failures = Vec::new();
        let mut reports = Vec::new();
        for &m in self.config.models.iter().filter(|&&m| m != ModelVariant::Oracle) {
            match self.fit_one(g, m, &areas, &est, None) {
                Ok(r) => reports.push(r),
                Err(e) => failures.push(Failure { replicate: g, model: Some(m), error: e.to_string() }),
            }
        }
        (failures, reports)
    }

    /// Oracle fit for replicate `g`; reads the persisted design estimates.
    pub fn run_oracle(&self, g: usize, empirical: &[Option<f64>]) -> Result<FitReport> {
        let dir = self.replicate_dir(g);
        let est = read_estimates_csv(&dir.join("estimates.csv"))?;
        let rows = read_cluster_csv(&dir.join("clusters.csv"))?;
        let areas = summarize_sample(&rows, self.frame.n_areas, |h| self.frame.stratum_urban[h])?;
        self.fit_one(g, ModelVariant::Oracle, &areas, &est, Some(empirical))
    }
}

/// Empirical design variance per area over replicates with valid estimates.
pub fn empirical_variances(estimates: &[Vec<DesignEstimate>], n_areas: usize) -> Vec<(Option<f64>, usize)> {
    (0..n_areas)
        .map(|i| {
            let xs: Vec<f64> = estimates
                .iter()
                .filter_map(|e| e.get(i))
                .filter(|e| e.estimable && e.theta_hat.is_finite())
                .map(|e| e.theta_hat)
                .collect();
            (empirical_design_variance(&xs).ok().filter(|v| *v > 0.0), xs.len())
        })
        .collect()
}

fn read_replicate_estimates(dir: &Path, g: usize) -> Result<Vec<DesignEstimate>> {
    read_estimates_csv(&dir.join(format!("rep-{g:04}")).join("estimates.csv"))
}

/// Runs the full pipeline for one setting and returns the tallies. Stage
/// failures are recorded, not propagated; only setup errors are returned.
pub fn run_setting(config: &RunConfig) -> Result<RunSummary> {
    let ctx = SettingContext::new(config)?;
    ctx.write_population()?;
    let g_total = config.replicates;
    log::info!("setting {}: {} replicates, {} models", config.setting, g_total, config.models.len());

    let pool_n = config.pool_replicates.max(g_total);
    let pool: Vec<PoolRow> = (0..pool_n)
        .into_par_iter()
        .map(|g| ctx.pool_rows(g))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    write_rows(&ctx.dir.join("pool.csv"), &pool)?;

    let results: Vec<(Vec<Failure>, Vec<FitReport>)> = (0..g_total)
        .into_par_iter()
        .map(|g| {
            let r = ctx.run_replicate(g);
            log::info!("replicate {g} done");
            r
        })
        .collect();
    let mut summary = RunSummary { setting: config.setting.tag().into(), replicates: g_total, ..Default::default() };
    for (g, (fails, reports)) in results.into_iter().enumerate() {
        summary.failures.extend(fails);
        summary.fits += reports.len();
        summary.non_converged.extend(reports.iter().filter(|r| !r.converged).map(|r| (g, r.model)));
    }

    // oracle: empirical variances from every replicate's estimates first
    let estimates: Vec<Vec<DesignEstimate>> =
        (0..g_total).filter_map(|g| read_replicate_estimates(&ctx.dir, g).ok()).collect();
    let emp = empirical_variances(&estimates, ctx.frame.n_areas);
    let emp_rows: Vec<EmpiricalRow> =
        emp.iter().enumerate().map(|(i, &(v, n))| EmpiricalRow { area: i, v_emp: v, valid_replicates: n }).collect();
    write_rows(&ctx.dir.join("empirical_variance.csv"), &emp_rows)?;
    if config.models.contains(&ModelVariant::Oracle) {
        let v: Vec<Option<f64>> = emp.iter().map(|e| e.0).collect();
        let oracle: Vec<(usize, Result<FitReport>)> =
            (0..g_total).into_par_iter().map(|g| (g, ctx.run_oracle(g, &v))).collect();
        for (g, r) in oracle {
            match r {
                Ok(rep) => {
                    summary.fits += 1;
                    if !rep.converged {
                        summary.non_converged.push((g, rep.model));
                    }
                }
                Err(e) => summary.failures.push(Failure { replicate: g, model: Some(ModelVariant::Oracle), error: e.to_string() }),
            }
        }
    }
    summary.non_converged.sort();
    summary.failures.sort_by_key(|f| (f.replicate, f.model.map(|m| m.name())));
    write_json(&ctx.dir.join("run_summary.json"), &summary)?;

    if let Err(e) = evaluate_run_dir(&ctx.dir) {
        summary.failures.push(Failure { replicate: usize::MAX, model: None, error: format!("evaluation: {e}") });
        write_json(&ctx.dir.join("run_summary.json"), &summary)?;
    }
    Ok(summary)
}

/// Distribution comparison results for one area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub area: usize,
    pub dist: SamplingDist,
    pub wasserstein2_sq: f64,
    pub mean_diff: f64,
    pub replicates: usize,
}

/// Output of [`evaluate_run_dir`].
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub setting: String,
    pub tables: Vec<(ModelVariant, MetricTable)>,
    pub distributions: Vec<DistributionRow>,
}

impl Evaluation {
    pub fn table(&self, model: ModelVariant) -> Option<&MetricTable> {
        self.tables.iter().find(|(m, _)| *m == model).map(|(_, t)| t)
    }

    /// Averages over areas of the distribution comparison for one
    /// sampling distribution.
    pub fn distribution_summary(&self, dist: SamplingDist) -> Option<(f64, f64)> {
        let rows: Vec<&DistributionRow> = self.distributions.iter().filter(|r| r.dist == dist).collect();
        (!rows.is_empty()).then(|| {
            let n = rows.len() as f64;
            (rows.iter().map(|r| r.wasserstein2_sq).sum::<f64>() / n, rows.iter().map(|r| r.mean_diff).sum::<f64>() / n)
        })
    }
}

/// Theoretical design variance of a distribution at the true `sigma2`.
fn theory_column(r: &PoolRow, dist: SamplingDist) -> Option<f64> {
    match dist {
        SamplingDist::Simple => r.v_dagger,
        SamplingDist::Sasw => r.v_star,
    }
}

/// Recomputes all metrics from the artifacts of one setting directory and
/// writes `metrics.csv` and `distributions.csv`.
pub fn evaluate_run_dir(dir: &Path) -> Result<Evaluation> {
    let config: RunConfig = serde_json::from_str(
        &fs::read_to_string(dir.join("config.json")).map_err(|e| Error::io(dir.join("config.json"), e))?,
    )?;
    let truth: Vec<TruthRow> = read_rows(&dir.join("truth.csv"))?;
    let k = truth.len();
    let g_total = config.replicates;
    let pool: Vec<PoolRow> = read_rows(&dir.join("pool.csv"))?;
    let fitted_est: Vec<Option<Vec<DesignEstimate>>> = (0..g_total).map(|g| read_replicate_estimates(dir, g).ok()).collect();
    let emp_fitted = empirical_variances(&fitted_est.iter().flatten().cloned().collect::<Vec<_>>(), k);

    // pooled truth side: per-area replicate rows with valid estimates
    let mut pooled: Vec<Vec<&PoolRow>> = vec![Vec::new(); k];
    for r in pool.iter().filter(|r| r.estimable && r.theta_hat.is_finite() && r.area < k) {
        pooled[r.area].push(r);
    }
    let v_pool: Vec<Option<f64>> = pooled
        .iter()
        .map(|rows| empirical_design_variance(&rows.iter().map(|r| r.theta_hat).collect::<Vec<_>>()).ok().filter(|v| *v > 0.0))
        .collect();

    let theta: Vec<f64> = truth.iter().map(|t| t.theta).collect();
    let mut tables = Vec::new();
    for &model in &config.models {
        let mut intervals = vec![vec![None; k]; g_total];
        let mut sigma2_est: Vec<Vec<f64>> = vec![Vec::new(); k];
        let mut design_est: Vec<Vec<f64>> = vec![Vec::new(); k];
        let mut valid = vec![vec![false; k]; g_total];
        for g in 0..g_total {
            let Some(est) = &fitted_est[g] else { continue };
            for e in est.iter().filter(|e| e.area < k) {
                valid[g][e.area] = e.estimable;
            }
            let path = dir.join(format!("rep-{g:04}")).join(model.name()).join("summary.csv");
            let Ok(rows) = read_rows::<SummaryRow>(&path) else {
                log::warn!("missing {}", path.display());
                continue;
            };
            for r in rows.iter().filter(|r| r.area < k) {
                intervals[g][r.area] = Some(r.theta_interval());
                if let Some(s) = r.sigma2_mean {
                    sigma2_est[r.area].push(s);
                }
                if let (true, Some(d)) = (valid[g][r.area], r.design_variance) {
                    design_est[r.area].push(d);
                }
            }
        }
        let mut table = evaluate_estimates(&intervals, &valid, &theta)?;
        for (i, row) in table.rows.iter_mut().enumerate() {
            row.valid_replicates = emp_fitted[i].1;
            let theory: Vec<f64> = match model.dist() {
                Some(d) => pooled[i].iter().filter_map(|r| theory_column(r, d)).collect(),
                None => Vec::new(),
            };
            let Some(v_i) = v_pool[i] else { continue };
            row.set_ratios(ratio_metrics(&theory, &sigma2_est[i], &design_est[i], v_i, truth[i].sigma2)?);
        }
        tables.push((model, table));
    }

    let mut distributions = Vec::new();
    for (i, rows) in pooled.iter().enumerate() {
        let empirical: Vec<f64> = rows.iter().map(|r| r.v_hat).filter(|v| v.is_finite()).collect();
        for dist in [SamplingDist::Simple, SamplingDist::Sasw] {
            let params: Vec<ChiSquareParams> = rows
                .iter()
                .filter_map(|r| {
                    let (s, d) = match dist {
                        SamplingDist::Simple => (r.simple_scale?, r.simple_df?),
                        SamplingDist::Sasw => (r.sasw_scale?, r.sasw_df?),
                    };
                    Some(ChiSquareParams { scale: s, df: d, theoretical_variance: 1.0 })
                })
                .collect();
            match compare_distributions(&params, &empirical) {
                Ok(DistributionComparison { wasserstein2_sq, mean_diff, replicates }) => {
                    distributions.push(DistributionRow { area: i, dist, wasserstein2_sq, mean_diff, replicates })
                }
                Err(e) => log::debug!("area {i} {dist:?}: {e}"),
            }
        }
    }

    let setting = config.setting.tag().to_string();
    let named: Vec<(String, ModelVariant, MetricTable)> =
        tables.iter().map(|(m, t)| (setting.clone(), *m, t.clone())).collect();
    write_metrics_csv(&dir.join("metrics.csv"), &named)?;
    write_rows(&dir.join("distributions.csv"), &distributions)?;
    Ok(Evaluation { setting, tables, distributions })
}

/// Reads an adjacency edge list for `n_areas` areas and scales its ICAR.
pub fn load_icar(path: &Path, n_areas: usize) -> Result<ScaledIcar> {
    ScaledIcar::from_adjacency(&Adjacency::read_edge_csv(path, Some(n_areas))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(dir: &Path) -> RunConfig {
        RunConfig {
            n_areas: 12,
            n_admin1: 3,
            replicates: 2,
            pool_replicates: 4,
            mcmc: McmcConfig { chains: 2, warmup: 60, draws: 40, thin: 1, parallel_chains: false, ..McmcConfig::default() },
            out_dir: dir.to_path_buf(),
            frame: FrameConfig { urban_clusters: 40, rural_clusters: 60, ..FrameConfig::default() },
            sample: SampleConfig { urban_m: 4, rural_m: 6, ..SampleConfig::default() },
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_round_trips_through_toml_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let t = dir.path().join("c.toml");
        fs::write(&t, toml::to_string(&cfg).unwrap()).unwrap();
        let back = RunConfig::load(&t).unwrap();
        assert_eq!(back.replicates, 2);
        assert_eq!(back.models, cfg.models);
        let j = dir.path().join("c.json");
        fs::write(&j, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(RunConfig::load(&j).unwrap().n_areas, 12);
        fs::write(&t, "setting = \"1\"\nreplicates = 3\n").unwrap();
        let partial = RunConfig::load(&t).unwrap();
        assert_eq!(partial.replicates, 3);
        assert_eq!(partial.n_areas, 60);
        fs::write(&t, "replicas = 3\n").unwrap();
        assert!(RunConfig::load(&t).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = RunConfig { replicates: 0, ..RunConfig::default() };
        assert!(c.validate().is_err());
        c.replicates = 1;
        c.models.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn more_clusters_setting_multiplies_m_h() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.frame = FrameConfig { urban_clusters: 60, rural_clusters: 60, ..FrameConfig::default() };
        let base = SettingContext::new(&cfg).unwrap();
        cfg.setting = Setting::MoreClusters;
        let more = SettingContext::new(&cfg).unwrap();
        for h in 0..base.frame.n_strata() {
            assert_eq!(more.sample.m_h(&more.frame, h), 5 * base.sample.m_h(&base.frame, h));
        }
        let (rows_a, ..) = base.design_replicate(0).unwrap();
        let (rows_b, ..) = more.design_replicate(0).unwrap();
        assert_eq!(rows_b.len(), 5 * rows_a.len());
    }

    #[test]
    fn covariates_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = SettingContext::new(&tiny_config(dir.path())).unwrap();
        let p = dir.path().join("cov.csv");
        ctx.covariates.write_csv(&p).unwrap();
        assert_eq!(Covariates::read_csv(&p).unwrap(), ctx.covariates);
        fs::write(&p, "area,urban_prop,x_0,z_0\n0,1.5,1,1\n").unwrap();
        assert!(matches!(Covariates::read_csv(&p), Err(Error::Schema { row: 1, .. })));
    }

    #[test]
    fn unstructured_models_get_intercept_only_z() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = SettingContext::new(&tiny_config(dir.path())).unwrap();
        let (_, areas, est) = ctx.design_replicate(0).unwrap();
        let m: ModelVariant = "sasw-unstruct".parse().unwrap();
        let d = fit_data_for(m, &est, &ctx.covariates, &ctx.icar, Some(&areas), SimpleDf::default()).unwrap();
        assert_eq!(d.z.ncols(), 1);
        let m: ModelVariant = "sasw-struct".parse().unwrap();
        let d = fit_data_for(m, &est, &ctx.covariates, &ctx.icar, Some(&areas), SimpleDf::default()).unwrap();
        assert_eq!(d.z.ncols(), 4);
        assert!(fit_data_for(m, &est, &ctx.covariates, &ctx.icar, None, SimpleDf::default()).is_err());
    }

    #[test]
    fn empirical_variance_uses_valid_replicates_only() {
        let e = |theta_hat: f64, estimable| DesignEstimate { area: 0, theta_hat, v_hat: 0.1, m_dot: 2, strata_count: 1, estimable };
        let reps = vec![vec![e(0.0, true)], vec![e(2.0, true)], vec![e(100.0, false)]];
        assert_eq!(empirical_variances(&reps, 1), vec![(Some(1.0), 2)]);
        assert_eq!(empirical_variances(&reps[..1], 1), vec![(None, 1)]);
    }
}
