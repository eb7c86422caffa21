use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fhsmooth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fhsmooth")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"
n_areas = 12
n_admin1 = 3
replicates = 2
pool_replicates = 4
models = ["standard", "sasw-struct", "oracle"]

[mcmc]
chains = 2
warmup = 60
draws = 40

[frame]
urban_clusters = 40
rural_clusters = 60
mean_area_population = 100000.0

[sample]
urban_m = 4
rural_m = 6
urban_size = { size = 8.0, mean = 9.0 }
rural_size = { size = 4.0, mean = 11.0 }
"#;

fn simulate(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = fhsmooth(&["simulate", "--config", p(&cfg), "--seed", "3", "--threads", "1", "--out", p(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("setting-1")
}

#[test]
fn simulate_then_evaluate() {
    let d = tempfile::tempdir().unwrap();
    let run = simulate(d.path());
    assert!(run.join("rep-0001/sasw-struct/summary.csv").exists());
    assert!(run.join("rep-0000/oracle/diagnostics.json").exists());
    let metrics = d.path().join("m.csv");
    let out = fhsmooth(&["evaluate", "--run-dir", p(&run), "--out", p(&metrics)]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("sasw-struct"), "{text}");
    assert_eq!(fs::read(&metrics).unwrap(), fs::read(run.join("metrics.csv")).unwrap());
}

#[test]
fn fit_and_diagnose_from_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let run = simulate(d.path());
    let rep = run.join("rep-0000");
    let cfg = d.path().join("tiny.toml");
    let fit_dir = d.path().join("fit");
    let (est, cov, adj) = (rep.join("estimates.csv"), run.join("covariates.csv"), run.join("adjacency.csv"));
    let base = ["fit", "--estimates", p(&est), "--covariates", p(&cov), "--adjacency", p(&adj), "--config", p(&cfg)];
    let mut args = base.to_vec();
    let samples = rep.join("clusters.csv");
    let strata = run.join("strata.csv");
    args.extend(["--samples", p(&samples), "--strata", p(&strata), "--model", "simple-unstruct"]);
    args.extend(["--draws-every", "5", "--out", p(&fit_dir)]);
    let out = fhsmooth(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(fit_dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 13);
    assert!(summary.lines().next().unwrap().contains("sigma2_mean"));
    // 2 chains x 40 draws kept every 5th, plus a header
    assert_eq!(fs::read_to_string(fit_dir.join("draws.csv")).unwrap().lines().count(), 17);
    let diag: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fit_dir.join("diagnostics.json")).unwrap()).unwrap();
    assert!(diag["max_rhat"].is_number());

    // smoothing models need the cluster sample
    let mut args = base.to_vec();
    args.extend(["--model", "sasw-struct", "--out", p(&fit_dir)]);
    let out = fhsmooth(&args);
    assert_eq!(out.status.code(), Some(2));

    let emp = run.join("empirical_variance.csv");
    let mut args = base.to_vec();
    args.extend(["--model", "oracle", "--empirical-variance", p(&emp), "--out", p(&fit_dir)]);
    assert!(fhsmooth(&args).status.success());

    let diag = d.path().join("diag.csv");
    let out = fhsmooth(&["diagnose", "--samples", p(&samples), "--strata", p(&strata), "--n-areas", "12", "--out", p(&diag)]);
    assert!(out.status.success());
    let text = fs::read_to_string(&diag).unwrap();
    assert!(text.starts_with("area,clusters,strata,estimable,v_dagger,v_star"));
    assert_eq!(text.lines().count(), 13);
}

#[test]
fn estimate_command() {
    let d = tempfile::tempdir().unwrap();
    let input = d.path().join("c.csv");
    let out = d.path().join("e.csv");
    fs::write(&input, "cluster_id,stratum,area,ybar,n,wstar\n0,0,0,0.0,4,1.0\n1,0,0,2.0,4,1.0\n2,0,1,5.0,3,1.0\n").unwrap();
    let o = fhsmooth(&["estimate", "--input", p(&input), "--out", p(&out)]);
    assert!(o.status.success());
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("0,1.0,0.75,"), "{text}");

    fs::write(&input, "").unwrap();
    let o = fhsmooth(&["estimate", "--input", p(&input), "--out", p(&out)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 0"));
}

#[test]
fn bad_config_fails_cleanly() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.toml");
    fs::write(&cfg, "replicates = 0\n").unwrap();
    let o = fhsmooth(&["simulate", "--config", p(&cfg), "--out", p(d.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("replicates"));
}
