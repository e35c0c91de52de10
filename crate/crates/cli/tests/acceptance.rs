//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use bne::benchmark::{loo_method, run_benchmark, spatial_fit_config, BaselineConfig, BenchmarkConfig, Method};
use bne::calibration::{fit_link, LinkConfig, LinkData};
use bne::data::{quadrant, synth_spatial, SpatialScenario};
use bne::ensemble::systematic_draws;
use bne::gp::sgp_marginal;
use bne::inference::{fit_sgp_regression, gibbs_fit, EnsembleData, FitConfig};
use bne::kernels::{gram, gram_values, kernel_derivative_blocks, KernelSpec};
use bne::seeds::derive_seed;
use bne::Points;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEED: u64 = 0;
const BUDGET: Duration = Duration::from_secs(15 * 60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn pool(jobs: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build().expect("thread pool")
}

struct BenchmarkCriteria {
    ordering: Outcome,
    calibration: Outcome,
    bound: Outcome,
}

fn benchmark_criteria() -> bne::Result<BenchmarkCriteria> {
    let cfg = BenchmarkConfig { replications: 20, seed: SEED, methods: Method::ALL.to_vec(), ..BenchmarkConfig::default() };
    let start = Instant::now();
    let res = pool(4).install(|| run_benchmark(&cfg))?;
    let elapsed = start.elapsed();
    let summary = res.summary();
    for s in &summary {
        println!(
            "    {:<13} mean_rmse={:.4} coverage_mad={}",
            s.method,
            s.mean_rmse,
            s.mean_coverage_mad.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    let get = |m: Method| summary.iter().find(|s| s.method == m.name()).expect("method in summary");
    let ours = get(Method::Ours);
    let baselines = [Method::Avg, Method::CvStack, Method::LnrStack, Method::NlrStack, Method::Gam];
    let worse: Vec<&str> = baselines.iter().filter(|&&m| get(m).mean_rmse < ours.mean_rmse).map(|m| m.name()).collect();
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let in_budget = elapsed <= BUDGET;
    let ordering = outcome(
        worse.is_empty() && in_budget,
        format!(
            "ours rmse {:.4}; baselines beating it: {:?}; elapsed {:.0}s with 4 jobs on {cores} core(s), budget {}s",
            ours.mean_rmse,
            worse,
            elapsed.as_secs_f64(),
            BUDGET.as_secs()
        ),
    );
    let (mad, mad_kl) = (ours.mean_coverage_mad.unwrap_or(f64::NAN), get(Method::OursKlOnly).mean_coverage_mad.unwrap_or(f64::NAN));
    let calibration =
        outcome(mad < mad_kl && mad <= 0.10, format!("coverage MAD ours {mad:.4} vs ours_kl_only {mad_kl:.4} (limit 0.10)"));
    let (held, total) = ours.theorem_holds.unwrap_or((0, 0));
    let bound = outcome(total == 20 && held == total, format!("bound holds on {held}/{total} replications"));
    Ok(BenchmarkCriteria { ordering, calibration, bound })
}

fn kernel_suite() -> bne::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs: Vec<(f64, f64)> = (0..20).map(|_| (rng.random(), rng.random())).collect();
    let h = 3e-5;
    let mut worst: f64 = 0.0;
    let mut factorized = true;
    for l in [0.1, 0.3, 1.0] {
        let spec = KernelSpec::rbf(l);
        let k = |a: f64, b: f64| spec.eval_1d(a, b);
        for &(z, z2) in &pairs {
            let blk = kernel_derivative_blocks(&spec, z, z2)?;
            let dz = (k(z + h, z2) - k(z - h, z2)) / (2.0 * h);
            let dz2 = (k(z, z2 + h) - k(z, z2 - h)) / (2.0 * h);
            let dd = (k(z + h, z2 + h) - k(z + h, z2 - h) - k(z - h, z2 + h) + k(z - h, z2 - h)) / (4.0 * h * h);
            worst = worst.max((blk.dk_dz - dz).abs()).max((blk.dk_dz2 - dz2).abs()).max((blk.d2k_dz_dz2 - dd).abs());
        }
        let mut xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        xs.push(xs[0]);
        for spec in [spec, KernelSpec::ou(l)] {
            factorized &= gram(&spec, &Points::from_1d(&xs), 0.0).is_ok();
        }
    }
    Ok(outcome(worst <= 1e-6 && factorized, format!("max |analytic − finite difference| = {worst:.2e}; all Grams factorized: {factorized}")))
}

fn sgp_exactness() -> bne::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let xs: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
    let y: Vec<f64> = xs.iter().map(|x| (5.0 * x).sin() + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    let x = Points::from_1d(&xs);
    let kernel = KernelSpec::rbf(0.1);
    let noise = 0.1;
    let (factor, _) = fit_sgp_regression(&x, &y, &x, kernel, noise, 5000, 0.02)?;
    let mut kn = gram_values(&kernel, &x);
    for i in 0..20 {
        kn[(i, i)] += noise * noise;
    }
    let exact = gram_values(&kernel, &x) * kn.cholesky().expect("SPD").solve(&DVector::from_column_slice(&y));
    let approx = sgp_marginal(&factor, &x)?.mean;
    let rms = ((exact - approx).norm_squared() / 20.0).sqrt();
    Ok(outcome(rms <= 1e-3, format!("RMS difference to the exact posterior mean {rms:.2e}")))
}

fn link_recovery() -> bne::Result<Outcome> {
    let n = 500;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let grid: Vec<f64> = (0..30).map(|j| j as f64 / 29.0).collect();
    // F₀ is uniform on [0, 1]; outcomes follow G_true(F₀) with G_true(p) = p².
    let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>().sqrt()).collect();
    let cdf = DMatrix::from_fn(n, grid.len(), |_, j| grid[j]);
    let ind = DMatrix::from_fn(n, grid.len(), |i, j| if y[i] < grid[j] { 1.0 } else { 0.0 });
    let link = fit_link(&LinkData::new(cdf, ind, y)?, &LinkConfig::default())?;
    let map = link.mean_map()?;
    let err = link.constraint_grid.iter().map(|&p| (map.value(p) - p * p).abs()).fold(0.0, f64::max);
    let min_slope = link.constraint_grid.iter().map(|&p| map.derivative(p)).fold(f64::INFINITY, f64::min);
    Ok(outcome(err <= 0.08 && min_slope >= -1e-3, format!("max |G − p²| = {err:.4}; min derivative {min_slope:.4}")))
}

fn decomposition() -> bne::Result<Outcome> {
    let sites = synth_spatial(43, 3, SEED)?;
    let data = EnsembleData::new(sites.inputs.clone(), sites.targets.clone(), sites.base_predictions.clone().expect("bases"))?;
    let cfg = spatial_fit_config(&FitConfig { seed: derive_seed(SEED, 7), ..FitConfig::default() });
    let fit = pool(4).install(|| gibbs_fit(&data, &cfg))?;
    let scenario = SpatialScenario::new(3, SEED, 1.0)?;
    let map = scenario.grid(30, derive_seed(SEED, 0x6D))?;
    let bases = map.base_predictions.clone().expect("bases");
    let draws = systematic_draws(&fit.posterior, &bases, &map.inputs, 8192, derive_seed(SEED, 8))?;
    let comps = bne::ensemble::decompose_uncertainty(&fit.posterior, &bases, &map.inputs, 8192, derive_seed(SEED, 8))?;
    let noise = draws.sigma.iter().map(|s| s * s).sum::<f64>() / draws.sigma.len() as f64;
    let mut worst: f64 = 0.0;
    let mut quad = [(0.0, 0usize); 4];
    for (i, c) in comps.iter().enumerate() {
        let col = draws.mean.column(i);
        let mu = col.mean();
        let total = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (col.len() - 1) as f64 + noise;
        worst = worst.max((c.total() - total).abs() / total);
        let q = quadrant(map.inputs.row(i));
        quad[q].0 += c.ensemble;
        quad[q].1 += 1;
    }
    let means: Vec<f64> = quad.iter().map(|(s, n)| s / *n as f64).collect();
    let sw_highest = means[1..].iter().all(|&m| means[0] > m);
    Ok(outcome(
        worst <= 0.05 && sw_highest,
        format!(
            "max relative gap between component sum and total variance {:.2}%; ensemble variance by quadrant SW/NW/NE/SE = {:.4}/{:.4}/{:.4}/{:.4}",
            100.0 * worst,
            means[0],
            means[1],
            means[2],
            means[3]
        ),
    ))
}

fn determinism() -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<Vec<u8>, String> {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_bne"))
            .args(["benchmark", "--reps", "2", "--seed", "11", "--jobs", "2", "--out"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        std::fs::read(out.join("benchmark.csv")).map_err(|e| e.to_string())
    };
    let (a, b) = (run("a")?, run("b")?);
    Ok(outcome(!a.is_empty() && a == b, format!("two benchmark runs produced {} and {} bytes, identical: {}", a.len(), b.len(), a == b)))
}

fn loo() -> bne::Result<Outcome> {
    let ds = synth_spatial(43, 3, SEED)?;
    let fit = spatial_fit_config(&FitConfig::default());
    let baselines = BaselineConfig::default();
    let score = |m: Method| -> bne::Result<f64> {
        let r = pool(4).install(|| loo_method(&ds, m, &fit, &baselines, SEED, true))?;
        Ok(if r.failures == 0 { r.pooled_rmse } else { f64::INFINITY })
    };
    let (ours, avg, lnr) = (score(Method::Ours)?, score(Method::Avg)?, score(Method::LnrStack)?);
    Ok(outcome(ours <= avg && ours <= lnr, format!("pooled LOO RMSE ours {ours:.4}, avg {avg:.4}, lnr_stack {lnr:.4}")))
}

fn report(id: usize, name: &str, res: Result<Outcome, String>, failed: &mut usize) {
    let o = res.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    if !o.pass {
        *failed += 1;
    }
    println!("criterion {id} [{name}]: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wants = |id: usize| only.as_ref().is_none_or(|v| v.contains(&id));
    let mut failed = 0;
    let err = |e: bne::Error| e.to_string();
    if wants(1) || wants(2) || wants(3) {
        match benchmark_criteria() {
            Ok(b) => {
                report(1, "1-D benchmark ordering", Ok(b.ordering), &mut failed);
                report(2, "calibration improvement", Ok(b.calibration), &mut failed);
                report(3, "calibration loss bound", Ok(b.bound), &mut failed);
            }
            Err(e) => {
                for (id, name) in [(1, "1-D benchmark ordering"), (2, "calibration improvement"), (3, "calibration loss bound")] {
                    report(id, name, Err(e.to_string()), &mut failed);
                }
            }
        }
    }
    if wants(4) {
        report(4, "kernel derivative suite", kernel_suite().map_err(err), &mut failed);
    }
    if wants(5) {
        report(5, "SGP exactness", sgp_exactness().map_err(err), &mut failed);
    }
    if wants(6) {
        report(6, "monotone link recovery", link_recovery().map_err(err), &mut failed);
    }
    if wants(7) {
        report(7, "variance decomposition", decomposition().map_err(err), &mut failed);
    }
    if wants(8) {
        report(8, "benchmark determinism", determinism(), &mut failed);
    }
    if wants(9) {
        report(9, "spatial leave-one-out", loo().map_err(err), &mut failed);
    }
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
