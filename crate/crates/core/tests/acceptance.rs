//! Acceptance criteria. Each test prints one `[C<n>] PASS|FAIL` line with the
//! measured quantity and its pinned tolerance, then asserts.
//!
//! `cargo test -p fh-smooth --test acceptance -- --nocapture --test-threads 1`

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use fh_smooth::design::{AreaSample, ClusterSummary, StratumSample};
use fh_smooth::distributions::{bias_factor, sample_exact_sw, sasw_eigensystem, sasw_params, v_dagger};
use fh_smooth::estimators::{matrix_variance, simple_variance, taylor_variance};
use fh_smooth::frame::{build_geography, GeographyConfig};
use fh_smooth::inference::synthetic::{simulate_simple_unstruct, SyntheticConfig};
use fh_smooth::inference::{fit, Interval, McmcConfig, ModelVariant, PriorConfig};
use fh_smooth::numeric::{adaptive_simpson, ks_two_sample, quantile_sorted};
use fh_smooth::rng::{rng_for, SimRng};
use fh_smooth::runner::{evaluate_run_dir, run_setting, RunConfig, SettingContext};
use fh_smooth::spatial::{Adjacency, PcPrecPrior, ScaledIcar};

fn report(id: &str, ok: bool, detail: String) {
    println!("[{id}] {} {detail}", if ok { "PASS" } else { "FAIL" });
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

/// `(m_h, urban, [(w*, n)])` per stratum; in-area cluster outcomes are zero.
fn build_area(strata: &[(usize, bool, Vec<(f64, u64)>)]) -> AreaSample {
    let mut id = 0;
    AreaSample {
        area: 0,
        strata: strata
            .iter()
            .enumerate()
            .map(|(h, (m_h, urban, cl))| StratumSample {
                stratum: h,
                urban: *urban,
                m_h: *m_h,
                clusters: cl
                    .iter()
                    .map(|&(wstar, n)| {
                        id += 1;
                        ClusterSummary { cluster_id: id, stratum: h, area: 0, ybar: 0.0, n, wstar }
                    })
                    .collect(),
            })
            .collect(),
    }
}

fn set_outcomes(area: &mut AreaSample, mut f: impl FnMut(bool, &ClusterSummary) -> f64) {
    for s in &mut area.strata {
        for c in &mut s.clusters {
            c.ybar = f(s.urban, c);
        }
    }
}

fn normal(rng: &mut SimRng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random domain with 1-3 strata, each possibly unplanned, at least two clusters.
fn random_area(rng: &mut SimRng) -> AreaSample {
    loop {
        let h = rng.random_range(1..=3);
        let strata: Vec<(usize, bool, Vec<(f64, u64)>)> = (0..h)
            .map(|j| {
                let m_h = rng.random_range(2..=9);
                let m_hi = rng.random_range(1..=m_h);
                let cl = (0..m_hi).map(|_| (rng.random_range(0.5..80.0), rng.random_range(1..=30))).collect();
                (m_h, j == 0, cl)
            })
            .collect();
        let mut area = build_area(&strata);
        if area.m_dot() < 2 {
            continue;
        }
        let shift = rng.random_range(-3.0..3.0);
        set_outcomes(&mut area, |u, _| shift + if u { 1.0 } else { 0.0 } + 2.0 * normal(rng));
        return area;
    }
}

#[test]
fn c1_matrix_form_matches_taylor() {
    const TOL: f64 = 1e-10;
    let t0 = Instant::now();
    let mut rng = rng_for(2024, &[1]);
    let mut worst = 0.0f64;
    let mut unplanned = 0;
    for _ in 0..1000 {
        let a = random_area(&mut rng);
        unplanned += a.strata.iter().any(|s| !s.planned()) as usize;
        let t = taylor_variance(&a).unwrap();
        let m = matrix_variance(&a).unwrap();
        worst = worst.max((t - m).abs() / t.abs().max(1e-300));
    }
    let el = t0.elapsed();
    let ok = worst < TOL && unplanned > 0 && within(el, 10);
    report(
        "C1",
        ok,
        format!("max rel diff {worst:.2e} (tol {TOL:e}), {unplanned}/1000 unplanned, {:.2}s (limit 10s)", el.as_secs_f64()),
    );
    assert!(ok);
}

#[test]
fn c2_taylor_reduces_to_simple() {
    const TOL: f64 = 1e-12;
    let t0 = Instant::now();
    let mut rng = rng_for(2024, &[2]);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        // equal weights and sizes everywhere, planned strata, equal m_hi
        let h = rng.random_range(1..=4);
        let m = rng.random_range(2..=12);
        let w = rng.random_range(1.0..500.0);
        let n = rng.random_range(1..=25);
        let strata: Vec<_> = (0..h).map(|j| (m, j % 2 == 0, vec![(w, n); m])).collect();
        let mut a = build_area(&strata);
        set_outcomes(&mut a, |u, _| if u { 0.7 } else { 0.0 } + normal(&mut rng));
        let t = taylor_variance(&a).unwrap();
        let s = simple_variance(&a).unwrap();
        worst = worst.max((t - s).abs() / t.abs().max(1e-300));
    }
    let el = t0.elapsed();
    let ok = worst < TOL && within(el, 5);
    report("C2", ok, format!("max rel diff {worst:.2e} (tol {TOL:e}), {:.2}s (limit 5s)", el.as_secs_f64()));
    assert!(ok);
}

#[test]
fn c3_exact_law_matches_microdata() {
    const TOL: f64 = 0.01;
    const REPS: usize = 100_000;
    let t0 = Instant::now();
    // urban stratum fully in the area, rural stratum unplanned (5 of 7)
    let design = [
        (5, true, vec![(120.0, 6), (95.0, 11), (150.0, 4), (80.0, 9), (210.0, 13)]),
        (7, false, vec![(300.0, 15), (260.0, 3), (410.0, 8), (180.0, 12), (330.0, 7)]),
    ];
    let (theta, gamma, sigma2): (f64, f64, f64) = (0.3, 1.5, 2.0);
    let mut area = build_area(&design);
    let mut rng = rng_for(2024, &[3]);
    let sd = sigma2.sqrt();
    let mut v_hat = Vec::with_capacity(REPS);
    for _ in 0..REPS {
        set_outcomes(&mut area, |u, c| {
            let mu = theta + if u { gamma } else { 0.0 };
            let total: f64 = (0..c.n).map(|_| mu + sd * normal(&mut rng)).sum();
            total / c.n as f64
        });
        v_hat.push(taylor_variance(&area).unwrap());
    }
    let eig = sasw_eigensystem(&area).unwrap();
    let exact = sample_exact_sw(&eig, gamma, sigma2, REPS, &mut rng_for(2024, &[3, 1]));
    let ks = ks_two_sample(&v_hat, &exact);
    let el = t0.elapsed();
    let ok = ks < TOL && within(el, 120);
    report("C3", ok, format!("KS {ks:.4} (tol {TOL}), {:.1}s (limit 120s)", el.as_secs_f64()));
    assert!(ok);
}

/// Eight sampled domains from the default setting-1 design, spread over the
/// range of cluster counts.
fn realistic_areas() -> Vec<AreaSample> {
    let ctx = SettingContext::new(&RunConfig::default()).unwrap();
    let (_, areas, _) = ctx.design_replicate(0).unwrap();
    let mut usable: Vec<AreaSample> = areas
        .into_iter()
        .filter(|a| a.estimable() && sasw_eigensystem(a).is_ok_and(|e| e.rank() > 0))
        .collect();
    usable.sort_by_key(|a| (a.m_dot(), a.area));
    let n = usable.len();
    (0..8).map(|j| usable[j * (n - 1) / 7].clone()).collect()
}

#[test]
fn c4_satterthwaite_accuracy() {
    const TOL: f64 = 0.05;
    const DRAWS: usize = 1_000_000;
    let t0 = Instant::now();
    let areas = realistic_areas();
    let mut worst = (0.0f64, 0usize, 0usize, 0.0f64);
    let mut lines = Vec::new();
    for (gamma, sigma2) in [(1.0, 1.0), (2.0, 4.0)] {
        for a in &areas {
            let eig = sasw_eigensystem(a).unwrap();
            let approx = sasw_params(&eig, gamma, sigma2).unwrap();
            let mut exact = sample_exact_sw(&eig, gamma, sigma2, DRAWS, &mut rng_for(2024, &[4, a.area as u64]));
            exact.sort_by(f64::total_cmp);
            let mut area_worst = (0.0f64, 0usize);
            for p in 1..=99 {
                let q = quantile_sorted(&exact, p as f64 / 100.0);
                let gap = (approx.quantile(p as f64 / 100.0) / q - 1.0).abs();
                if gap > area_worst.0 {
                    area_worst = (gap, p);
                }
            }
            lines.push(format!(
                "  area {:>2} m={:>2} strata={} df={:>6.2} (gamma {gamma}, sigma2 {sigma2}): max gap {:.4} at p{}",
                a.area,
                a.m_dot(),
                a.strata_count(),
                approx.df,
                area_worst.0,
                area_worst.1
            ));
            if area_worst.0 > worst.0 {
                worst = (area_worst.0, a.area, area_worst.1, gamma);
            }
        }
    }
    let el = t0.elapsed();
    let ok = worst.0 < TOL && within(el, 120);
    report(
        "C4",
        ok,
        format!(
            "max percentile gap {:.4} (tol {TOL}) at area {} p{} gamma {}, {:.1}s (limit 120s)",
            worst.0,
            worst.1,
            worst.2,
            worst.3,
            el.as_secs_f64()
        ),
    );
    for l in lines {
        println!("{l}");
    }
    assert!(ok);
}

#[test]
fn c5_bias_is_downward() {
    const TOL: f64 = 1e-10;
    let t0 = Instant::now();
    let mut rng = rng_for(2024, &[5]);
    let (mut max_factor, mut max_ident) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        // common w* throughout, cluster sizes varying, every stratum unplanned
        let w = rng.random_range(10.0..400.0);
        let h = rng.random_range(1..=3);
        let strata: Vec<_> = (0..h)
            .map(|j| {
                let m_h = rng.random_range(3..=10);
                let m_hi = rng.random_range(2..m_h);
                (m_h, j == 0, (0..m_hi).map(|_| (w, rng.random_range(1..=30))).collect::<Vec<_>>())
            })
            .collect();
        let a = build_area(&strata);
        let eig = sasw_eigensystem(&a).unwrap();
        let sigma2 = rng.random_range(0.2..5.0);
        let b = bias_factor(&a, &eig, 0.0, sigma2).unwrap();
        max_factor = max_factor.max(b.factor);
        max_ident = max_ident.max((b.factor - (1.0 + (b.cross - b.r) / eig.wdw)).abs());
        // the identity also holds away from gamma = 0
        let g = rng.random_range(-2.0..2.0);
        let b = bias_factor(&a, &eig, g, sigma2).unwrap();
        max_ident = max_ident.max((b.factor - (1.0 + (b.cross - b.r) / eig.wdw)).abs());
    }
    let el = t0.elapsed();
    let ok = max_factor < 1.0 && max_ident < TOL && within(el, 10);
    report(
        "C5",
        ok,
        format!(
            "max factor {max_factor:.6} (< 1), identity error {max_ident:.2e} (tol {TOL:e}), {:.2}s (limit 10s)",
            el.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn c6_sasw_degenerates_to_simple() {
    const TOL: f64 = 1e-10;
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for m in [2usize, 5, 20] {
        let a = build_area(&[(m, false, vec![(37.5, 9); m])]);
        let sigma2 = 1.7;
        let eig = sasw_eigensystem(&a).unwrap();
        let p = sasw_params(&eig, 0.4, sigma2).unwrap();
        let vd = v_dagger(&a, sigma2).unwrap();
        worst = worst.max((p.mean() - vd).abs() / vd).max((p.df - (m - 1) as f64).abs() / (m - 1) as f64);
    }
    let el = t0.elapsed();
    let ok = worst < TOL && within(el, 1);
    report("C6", ok, format!("max rel diff {worst:.2e} (tol {TOL:e}), {:.3}s (limit 1s)", el.as_secs_f64()));
    assert!(ok);
}

fn grid(r: usize, c: usize) -> Adjacency {
    let mut e = Vec::new();
    for i in 0..r {
        for j in 0..c {
            if j + 1 < c {
                e.push((i * c + j, i * c + j + 1));
            }
            if i + 1 < r {
                e.push((i * c + j, (i + 1) * c + j));
            }
        }
    }
    Adjacency::from_edges(r * c, &e).unwrap()
}

/// `P(1/sqrt(tau) > u)` by integrating the density mapped to the standard
/// deviation scale.
fn pc_tail(prior: &PcPrecPrior) -> f64 {
    let u = prior.u;
    let density_sd = |s: f64| (prior.logdensity(s.powi(-2))).exp() * 2.0 * s.powi(-3);
    let upper = u + 80.0 / prior.rate();
    adaptive_simpson(&density_sd, u, upper, 1e-13)
}

#[test]
fn c7_spatial_scaling_and_pc_prior() {
    const TOL: f64 = 1e-6;
    let t0 = Instant::now();
    let geog = build_geography(&GeographyConfig::new(60, 10), 1).unwrap();
    let mut worst_gm = 0.0f64;
    for adj in [geog.adjacency.clone(), grid(6, 7), grid(1, 15)] {
        let icar = ScaledIcar::from_adjacency(&adj).unwrap();
        worst_gm = worst_gm.max((icar.geometric_mean_variance() - 1.0).abs());
        // independent check: for a connected graph, Q+ = (Q + J/K)^-1 - J/K
        let n = adj.len();
        let j = DMatrix::from_element(n, n, 1.0 / n as f64);
        let inv = (&icar.scaled + &j).try_inverse().unwrap() - j;
        let log_gm = (0..n).map(|i| inv[(i, i)].ln()).sum::<f64>() / n as f64;
        worst_gm = worst_gm.max((log_gm.exp() - 1.0).abs());
    }
    let mut worst_tail = 0.0f64;
    for (u, alpha) in [(1.0, 0.01), (1.0, 0.1), (0.5, 0.05)] {
        let p = pc_tail(&PcPrecPrior::new(u, alpha).unwrap());
        worst_tail = worst_tail.max((p - alpha).abs());
    }
    let el = t0.elapsed();
    let ok = worst_gm < TOL && worst_tail < TOL && within(el, 30);
    report(
        "C7",
        ok,
        format!(
            "geometric-mean variance error {worst_gm:.2e}, PC tail error {worst_tail:.2e} (tol {TOL:e}), {:.2}s (limit 30s)",
            el.as_secs_f64()
        ),
    );
    assert!(ok);
}

/// Desk preset shared with the default run configuration.
fn desk_mcmc() -> McmcConfig {
    RunConfig::default().mcmc
}

#[test]
fn c8_sampler_calibration() {
    const BAND: (f64, f64) = (0.79, 0.97);
    const REFITS: usize = 50;
    let t0 = Instant::now();
    let geog = build_geography(&GeographyConfig::new(60, 10), 1).unwrap();
    let icar = ScaledIcar::from_adjacency(&geog.adjacency).unwrap();
    let cfg = SyntheticConfig::default();
    let mcmc = desk_mcmc();
    let (mut hit, mut total, mut converged) = (0, 0, 0);
    for r in 0..REFITS {
        let (data, truth) = simulate_simple_unstruct(&icar, &cfg, &mut rng_for(99, &[r as u64])).unwrap();
        let draws = fit(ModelVariant::ALL[3], &data, &PriorConfig::default(), &mcmc, r as u64).unwrap();
        converged += draws.diagnostics.converged as usize;
        let mut targets: Vec<(String, f64)> =
            truth.beta.iter().enumerate().map(|(j, b)| (format!("beta[{j}]"), *b)).collect();
        targets.push(("gamma".into(), truth.gamma));
        targets.extend(truth.eta.iter().enumerate().map(|(j, e)| (format!("eta[{j}]"), *e)));
        for (name, t) in targets {
            let iv = Interval::from_draws(&draws.pooled(&name).unwrap(), 0.9);
            hit += iv.contains(t) as usize;
            total += 1;
        }
    }
    let cov = hit as f64 / total as f64;
    let el = t0.elapsed();
    let ok = (BAND.0..=BAND.1).contains(&cov) && within(el, 1800);
    report(
        "C8",
        ok,
        format!(
            "coverage {cov:.3} ({hit}/{total}) in [{}, {}], {converged}/{REFITS} converged, {:.0}s (limit 1800s)",
            BAND.0,
            BAND.1,
            el.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn c9_c10_desk_simulation() {
    const COVERAGE: f64 = 0.90;
    const SCORE_GAP: f64 = 0.05;
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig { out_dir: dir.path().to_path_buf(), ..RunConfig::default() };
    assert_eq!((config.n_areas, config.replicates), (60, 30));
    let summary = run_setting(&config).unwrap();
    let eval = evaluate_run_dir(&config.setting_dir()).unwrap();
    let el = t0.elapsed();
    let s = |m: ModelVariant| eval.table(m).unwrap().summary();
    let [standard, _, simple_struct, simple_unstruct, sasw_struct, sasw_unstruct] = ModelVariant::ALL;
    for m in ModelVariant::ALL {
        let x = s(m);
        println!(
            "  {:<16} coverage {:.3} score {:.4} width {:.4} rmse {:.4} theory/truth {}",
            m.name(),
            x.coverage,
            x.avg_interval_score,
            x.avg_width,
            x.rmse,
            x.theory_to_truth.map_or("-".into(), |v| format!("{v:.3}"))
        );
    }
    println!("  {} fits, {} failures, {} not converged", summary.fits, summary.failures.len(), summary.non_converged.len());

    let std = s(standard);
    let smooth = [simple_struct, simple_unstruct, sasw_struct, sasw_unstruct];
    let cov_ok = std.coverage < COVERAGE && smooth.iter().all(|&m| s(m).coverage >= COVERAGE);
    let score_ok = smooth.iter().all(|&m| s(m).avg_interval_score <= std.avg_interval_score);
    let gaps: Vec<f64> = [(simple_struct, sasw_struct), (simple_unstruct, sasw_unstruct)]
        .iter()
        .map(|&(a, b)| (s(b).avg_interval_score / s(a).avg_interval_score - 1.0).abs())
        .collect();
    let gap_ok = gaps.iter().all(|&g| g <= SCORE_GAP);
    let ok9 = cov_ok && score_ok && gap_ok && summary.failures.is_empty() && within(el, 3600);
    report(
        "C9",
        ok9,
        format!(
            "standard coverage {:.3} (< {COVERAGE}), smoothing coverage min {:.3} (>= {COVERAGE}), scores <= standard: {score_ok}, simple/SASW score gaps {:.3}/{:.3} (<= {SCORE_GAP}), {:.0}s (limit 3600s)",
            std.coverage,
            smooth.iter().map(|&m| s(m).coverage).fold(f64::INFINITY, f64::min),
            gaps[0],
            gaps[1],
            el.as_secs_f64()
        ),
    );

    let ratio = |m: ModelVariant| s(m).theory_to_truth.unwrap();
    let (simple, sasw) = (ratio(simple_struct), ratio(sasw_struct));
    let ok10 = simple < 1.0 && sasw < 1.0 && simple <= sasw;
    report("C10", ok10, format!("theory/truth simple {simple:.3}, SASW {sasw:.3} (both < 1, simple <= SASW)"));
    assert!(ok9, "C9");
    assert!(ok10, "C10");
}
