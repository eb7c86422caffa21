use std::fs;
use std::path::{Path, PathBuf};

use fh_smooth::design::SampleConfig;
use fh_smooth::frame::FrameConfig;
use fh_smooth::inference::McmcConfig;
use fh_smooth::runner::{estimate_from_csv, evaluate_run_dir, run_setting, RunConfig, SettingContext};
use fh_smooth::Error;

fn tiny(dir: &Path) -> RunConfig {
    RunConfig {
        n_areas: 12,
        n_admin1: 3,
        replicates: 2,
        pool_replicates: 4,
        mcmc: McmcConfig { chains: 2, warmup: 60, draws: 40, thin: 1, ..McmcConfig::default() },
        out_dir: dir.to_path_buf(),
        frame: FrameConfig { urban_clusters: 40, rural_clusters: 60, ..FrameConfig::default() },
        sample: SampleConfig { urban_m: 4, rural_m: 6, ..SampleConfig::default() },
        ..RunConfig::default()
    }
}

/// Every file under `root`, relative path and bytes, sorted.
fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn tiny_run_completes_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let summary = run_setting(&tiny(a.path())).unwrap();
    assert!(summary.success(), "{:?}", summary.failures);
    assert_eq!(summary.fits, 12);
    let dir = a.path().join("setting-1");
    for g in 0..2 {
        assert!(dir.join(format!("rep-{g:04}/estimates.csv")).exists());
        assert!(dir.join(format!("rep-{g:04}/oracle/summary.csv")).exists());
    }
    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    // 6 models x (12 areas + summary row) + header
    assert_eq!(metrics.lines().count(), 6 * 13 + 1);

    run_setting(&tiny(b.path())).unwrap();
    let sa = snapshot(a.path());
    let sb = snapshot(b.path());
    assert_eq!(sa.len(), sb.len());
    for ((pa, ba), (pb, bb)) in sa.iter().zip(&sb) {
        assert_eq!(pa, pb);
        if pa.file_name().unwrap() == "config.json" {
            continue; // records the output directory
        }
        assert!(ba == bb, "{} differs", pa.display());
    }
}

#[test]
fn single_replicate_rerun_reproduces_outputs() {
    let a = tempfile::tempdir().unwrap();
    let cfg = tiny(a.path());
    run_setting(&cfg).unwrap();
    let rep = a.path().join("setting-1/rep-0001");
    let before = snapshot(&rep);
    fs::remove_dir_all(&rep).unwrap();
    let ctx = SettingContext::new(&cfg).unwrap();
    let (fails, _) = ctx.run_replicate(1);
    assert!(fails.is_empty());
    let v: Vec<Option<f64>> = fs::read_to_string(a.path().join("setting-1/empirical_variance.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().ok())
        .collect();
    ctx.run_oracle(1, &v).unwrap();
    assert_eq!(snapshot(&rep), before);
}

#[test]
fn evaluation_is_reproducible_from_artifacts() {
    let a = tempfile::tempdir().unwrap();
    run_setting(&tiny(a.path())).unwrap();
    let dir = a.path().join("setting-1");
    let first = fs::read(dir.join("metrics.csv")).unwrap();
    let eval = evaluate_run_dir(&dir).unwrap();
    assert_eq!(fs::read(dir.join("metrics.csv")).unwrap(), first);
    for (_, t) in &eval.tables {
        for r in &t.rows {
            assert!((0.0..=1.0).contains(&r.coverage));
            assert!(r.avg_width >= 0.0);
            assert!(r.avg_interval_score >= r.avg_width - 1e-12);
        }
    }
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn estimate_from_csv_examples() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("est.csv");
    let unplanned = write(
        d.path(),
        "unplanned.csv",
        "cluster_id,stratum,area,ybar,n,wstar\n0,0,0,0.0,4,1.0\n1,0,0,2.0,4,1.0\n2,0,1,5.0,3,1.0\n",
    );
    let est = estimate_from_csv(&unplanned, &out, None).unwrap();
    assert!((est[0].v_hat - 0.75).abs() < 1e-15);
    assert!(est[0].estimable);
    assert!(!est[1].estimable);

    let singles = write(
        d.path(),
        "singles.csv",
        "cluster_id,stratum,area,ybar,n,wstar\n0,0,0,1.0,4,1.0\n1,0,1,2.0,4,1.0\n2,1,2,5.0,3,1.0\n3,1,3,1.0,3,1.0\n",
    );
    let est = estimate_from_csv(&singles, &out, None).unwrap();
    assert!(est.iter().all(|e| !e.estimable));

    let empty = write(d.path(), "empty.csv", "");
    assert!(matches!(estimate_from_csv(&empty, &out, None), Err(Error::Schema { .. })));
    let bad = write(d.path(), "bad.csv", "cluster_id,stratum,area,ybar,n,wstar\n0,0,0,1.0,4,1.0\n1,0,0,inf,4,1.0\n");
    assert!(matches!(estimate_from_csv(&bad, &out, None), Err(Error::Schema { row: 2, .. })));
}
