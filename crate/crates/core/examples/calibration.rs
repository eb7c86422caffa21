//! Coverage check for one model on synthetic data with known truth.
//!
//! `cargo run --release -p fh-smooth --example calibration -- <reps> <model> <draws> <thin>`

use fh_smooth::frame::{build_geography, GeographyConfig};
use fh_smooth::inference::synthetic::{simulate_simple_unstruct, SyntheticConfig};
use fh_smooth::inference::{fit, McmcConfig, ModelVariant, PriorConfig};
use fh_smooth::rng::rng_for;
use fh_smooth::spatial::ScaledIcar;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let reps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let model: ModelVariant = args.get(2).map(|s| s.parse().unwrap()).unwrap_or("simple-unstruct".parse().unwrap());
    let geog = build_geography(&GeographyConfig::new(60, 10), 1).unwrap();
    let icar = ScaledIcar::from_adjacency(&geog.adjacency).unwrap();
    let cfg = SyntheticConfig::default();
    let n: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(500);
    let thin: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);
    let mcmc = McmcConfig { chains: 2, warmup: 2 * n, draws: n, thin, ..Default::default() };
    let (mut hit, mut tot) = (0, 0);
    for r in 0..reps {
        let mut rng = rng_for(99, &[r as u64]);
        let (data, truth) = simulate_simple_unstruct(&icar, &cfg, &mut rng).unwrap();
        let t0 = Instant::now();
        let d = fit(model, &data, &PriorConfig::default(), &mcmc, r as u64).unwrap();
        let mut names: Vec<(String, f64)> = truth.beta.iter().enumerate().map(|(j, b)| (format!("beta[{j}]"), *b)).collect();
        names.push(("gamma".into(), truth.gamma));
        names.extend(truth.eta.iter().enumerate().map(|(j, b)| (format!("eta[{j}]"), *b)));
        let mut line = String::new();
        for (n, t) in names {
            let Ok(x) = d.pooled(&n) else { continue };
            let iv = fh_smooth::inference::Interval::from_draws(&x, 0.9);
            let c = iv.contains(t);
            hit += c as usize;
            tot += 1;
            line += &format!(" {n}:{}", if c { "y" } else { "N" });
        }
        println!(
            "rep {r} {:.2}s rhat {:.3} ess {:.0} conv {} acc {:?}{line}",
            t0.elapsed().as_secs_f64(),
            d.diagnostics.max_rhat,
            d.diagnostics.min_ess,
            d.diagnostics.converged,
            d.acceptance
        );
        let mut worst: Vec<(f64, f64, &String)> = d.diagnostics.names.iter().enumerate().map(|(i, n)| (d.diagnostics.ess_bulk[i], d.diagnostics.rhat[i], n)).filter(|x| !x.2.starts_with("u[") && !x.2.starts_with("v[")).collect();
        worst.sort_by(|a, b| a.0.total_cmp(&b.0));
        println!("   worst {:?}", &worst[..6]);
    }
    println!("coverage {hit}/{tot} = {:.3}", hit as f64 / tot as f64);
}
