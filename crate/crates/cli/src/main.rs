use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use fh_smooth::design::read_cluster_csv;
use fh_smooth::distributions::{bias_factor, sasw_eigensystem, sasw_params, simple_scale_df, v_dagger, v_star, SimpleDf};
use fh_smooth::estimators::read_estimates_csv;
use fh_smooth::frame::Setting;
use fh_smooth::inference::{fit, ModelVariant};
use fh_smooth::runner::{
    areas_from_clusters, estimate_from_csv, evaluate_run_dir, fit_data_for, load_icar, read_strata_csv, run_setting,
    write_fit_outputs, Covariates, RunConfig,
};

/// Variance-smoothing Fay-Herriot small area estimation.
#[derive(Parser)]
#[command(name = "fhsmooth", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation setting end to end.
    Simulate {
        /// Run configuration (TOML or JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the setting: 1, 1a, 2, 3, 4 or reenum.
        #[arg(long)]
        setting: Option<Setting>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replicates: Option<usize>,
        /// Output root; the setting directory is created beneath it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Design-based estimates from a cluster summary CSV.
    Estimate {
        /// Cluster summary: cluster_id,stratum,area,ybar,n,wstar.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of areas (default: largest area id + 1).
        #[arg(long)]
        n_areas: Option<usize>,
    },
    /// Fit one model to design estimates.
    Fit {
        #[arg(long)]
        estimates: PathBuf,
        /// area,urban_prop,x_*,z_*
        #[arg(long)]
        covariates: PathBuf,
        /// Edge list i,j of area indices.
        #[arg(long)]
        adjacency: PathBuf,
        /// Cluster summary; required by the smoothing models.
        #[arg(long)]
        samples: Option<PathBuf>,
        /// stratum,urban flags for the cluster summary.
        #[arg(long)]
        strata: Option<PathBuf>,
        /// Empirical design variances (area,v_emp); required by the oracle.
        #[arg(long)]
        empirical_variance: Option<PathBuf>,
        #[arg(long, default_value = "sasw-struct")]
        model: ModelVariant,
        /// Run configuration supplying MCMC and prior settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write posterior draws, keeping every n-th.
        #[arg(long)]
        draws_every: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-area sampling-distribution diagnostics.
    Diagnose {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        strata: Option<PathBuf>,
        /// Within-stratum variance at which to evaluate the distributions.
        #[arg(long, default_value_t = 1.0)]
        sigma2: f64,
        /// Urban mean contrast.
        #[arg(long, default_value_t = 0.0)]
        gamma: f64,
        /// Number of areas (default: largest area id + 1).
        #[arg(long)]
        n_areas: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics for a setting directory.
    Evaluate {
        #[arg(long)]
        run_dir: PathBuf,
        /// Copy of the metric table (also written inside the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn read_empirical(path: &Path, k: usize) -> Result<Vec<Option<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = headers.iter().position(|h| h == "v_emp").context("missing v_emp column")?;
    let mut out = vec![None; k];
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let area: usize = rec[0].parse().with_context(|| format!("row {}: bad area", row + 1))?;
        if area >= k {
            bail!("row {}: area {area} out of range", row + 1);
        }
        out[area] = rec[col].parse::<f64>().ok().filter(|v| *v > 0.0);
    }
    Ok(out)
}

#[derive(Serialize)]
struct DiagnoseRow {
    area: usize,
    clusters: usize,
    strata: usize,
    estimable: bool,
    v_dagger: Option<f64>,
    v_star: Option<f64>,
    simple_df: Option<f64>,
    sasw_rank: Option<usize>,
    sasw_df: Option<f64>,
    sasw_mean: Option<f64>,
    bias_factor: Option<f64>,
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { config, setting, seed, replicates, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = setting {
                cfg.setting = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(g) = replicates {
                cfg.replicates = g;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let summary = run_setting(&cfg)?;
            println!(
                "setting {}: {} fits, {} failures, {} not converged -> {}",
                summary.setting,
                summary.fits,
                summary.failures.len(),
                summary.non_converged.len(),
                cfg.setting_dir().display()
            );
            for f in &summary.failures {
                eprintln!("replicate {} {:?}: {}", f.replicate, f.model.map(|m| m.name()), f.error);
            }
            Ok(summary.success())
        }
        Command::Estimate { input, out, n_areas } => {
            let est = estimate_from_csv(&input, &out, n_areas)?;
            let flagged = est.iter().filter(|e| !e.estimable).count();
            println!("{} areas, {} flagged non-estimable -> {}", est.len(), flagged, out.display());
            Ok(true)
        }
        Command::Fit {
            estimates,
            covariates,
            adjacency,
            samples,
            strata,
            empirical_variance,
            model,
            config,
            seed,
            draws_every,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let est = read_estimates_csv(&estimates)?;
            let cov = Covariates::read_csv(&covariates)?;
            let k = est.len();
            if cov.urban_prop.len() != k {
                bail!("{} covariate rows for {k} areas", cov.urban_prop.len());
            }
            let icar = load_icar(&adjacency, k)?;
            let urban = match &strata {
                Some(p) => read_strata_csv(p)?,
                None => BTreeMap::new(),
            };
            let areas = match &samples {
                Some(p) => Some(areas_from_clusters(&read_cluster_csv(p)?, Some(k), &urban)?),
                None => None,
            };
            let mut data = fit_data_for(model, &est, &cov, &icar, areas.as_deref(), cfg.simple_df)?;
            if let Some(p) = &empirical_variance {
                data = data.with_empirical_variance(read_empirical(p, k)?);
            }
            let draws = fit(model, &data, &cfg.prior, &cfg.mcmc, seed)?;
            let report = write_fit_outputs(&out, &draws, seed, cfg.interval_level, areas.as_deref(), &est, false)?;
            if let Some(n) = draws_every {
                draws.write_csv(&out.join("draws.csv"), n)?;
            }
            println!(
                "{}: max R-hat {:.3}, min ESS {:.0}, converged {} -> {}",
                model,
                report.max_rhat,
                report.min_ess,
                report.converged,
                out.display()
            );
            Ok(true)
        }
        Command::Diagnose { samples, strata, sigma2, gamma, n_areas, out } => {
            let urban = match &strata {
                Some(p) => read_strata_csv(p)?,
                None => BTreeMap::new(),
            };
            let areas = areas_from_clusters(&read_cluster_csv(&samples)?, n_areas, &urban)?;
            let mut w = csv::Writer::from_path(&out)?;
            for a in &areas {
                let nonempty = a.m_dot() > 0;
                let eig = if a.estimable() { sasw_eigensystem(a).ok().filter(|e| e.rank() > 0) } else { None };
                let sasw = eig.as_ref().and_then(|e| sasw_params(e, gamma, sigma2).ok());
                let factor = match &eig {
                    Some(e) => bias_factor(a, e, gamma, sigma2).ok().map(|b| b.factor),
                    None => None,
                };
                w.serialize(DiagnoseRow {
                    area: a.area,
                    clusters: a.m_dot(),
                    strata: a.strata_count(),
                    estimable: a.estimable(),
                    v_dagger: nonempty.then(|| v_dagger(a, sigma2).ok()).flatten(),
                    v_star: nonempty.then(|| v_star(a, sigma2).ok()).flatten(),
                    simple_df: simple_scale_df(a, SimpleDf::default()).ok().map(|(_, d)| d),
                    sasw_rank: eig.as_ref().map(|e| e.rank()),
                    sasw_df: sasw.map(|p| p.df),
                    sasw_mean: sasw.map(|p| p.mean()),
                    bias_factor: factor,
                })?;
            }
            w.flush()?;
            println!("{} areas -> {}", areas.len(), out.display());
            Ok(true)
        }
        Command::Evaluate { run_dir, out } => {
            let eval = evaluate_run_dir(&run_dir)?;
            for (m, t) in &eval.tables {
                let s = t.summary();
                println!(
                    "{:<16} rmse {:.4}  coverage {:.3}  width {:.4}  score {:.4}",
                    m.name(),
                    s.rmse,
                    s.coverage,
                    s.avg_width,
                    s.avg_interval_score
                );
            }
            if let Some(o) = out {
                fs::copy(run_dir.join("metrics.csv"), &o).with_context(|| format!("writing {}", o.display()))?;
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
