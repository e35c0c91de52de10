//! Accuracy and calibration metrics, the calibration-preserves-accuracy bound
//! check, and the leave-one-out harness.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::PredictiveDistribution;
use crate::error::{Error, Result};
use crate::seeds::derive_seed;

/// Nominal levels reported in coverage curves: 0.05, 0.10, …, 0.95.
pub fn report_levels() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Levels 0.1, …, 0.9 used for the coverage deviation summary.
pub fn summary_levels() -> Vec<f64> {
    (1..=9).map(|i| i as f64 * 0.1).collect()
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::input("rmse needs equal, non-zero lengths"));
    }
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Smallest `t` with `F(t) ≥ q` under linear interpolation of the gridded CDF;
/// flat stretches resolve to their leftmost grid point.
pub fn grid_quantile(cdf: impl Fn(usize) -> f64, grid: &[f64], q: f64) -> f64 {
    let m = grid.len();
    let Some(j) = (0..m).find(|&j| cdf(j) >= q) else {
        return grid[m - 1];
    };
    if j == 0 {
        return grid[0];
    }
    let (f0, f1) = (cdf(j - 1), cdf(j));
    if f1 <= f0 {
        return grid[j - 1];
    }
    grid[j - 1] + (q - f0) / (f1 - f0) * (grid[j] - grid[j - 1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub levels: Vec<f64>,
    pub coverage: Vec<f64>,
    /// Truths that fall outside the outcome grid.
    pub out_of_span: usize,
}

impl CoverageCurve {
    /// Mean `|coverage − level|` over the listed levels (matched to 1e-9).
    pub fn mean_abs_deviation(&self, levels: &[f64]) -> Result<f64> {
        let devs = levels
            .iter()
            .map(|l| {
                self.levels
                    .iter()
                    .position(|v| (v - l).abs() < 1e-9)
                    .map(|i| (self.coverage[i] - l).abs())
                    .ok_or_else(|| Error::input(format!("level {l} not in the curve")))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(devs.iter().sum::<f64>() / devs.len() as f64)
    }
}

fn check_truth(pd: &PredictiveDistribution, truth: &[f64]) -> Result<()> {
    if pd.n() != truth.len() || truth.is_empty() {
        return Err(Error::input("predictive rows and truths differ in count"));
    }
    if truth.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("truths must be finite"));
    }
    Ok(())
}

/// Fraction of truths inside the central interval `[q_{(1−p)/2}, q_{(1+p)/2}]`.
pub fn coverage_curve(pd: &PredictiveDistribution, truth: &[f64], levels: &[f64]) -> Result<CoverageCurve> {
    check_truth(pd, truth)?;
    if levels.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::input("nominal levels must lie in (0, 1)"));
    }
    let grid = &pd.y_grid;
    let (lo_g, hi_g) = (grid[0], grid[grid.len() - 1]);
    let out_of_span = truth.iter().filter(|&&t| t < lo_g || t > hi_g).count();
    if out_of_span > 0 {
        log::warn!("{out_of_span} truths fall outside the outcome grid");
    }
    let coverage = levels
        .iter()
        .map(|&p| {
            let inside = truth
                .iter()
                .enumerate()
                .filter(|&(i, &t)| {
                    let row = |j: usize| pd.cdf[(i, j)];
                    let lo = grid_quantile(row, grid, 0.5 * (1.0 - p));
                    let hi = grid_quantile(row, grid, 0.5 * (1.0 + p));
                    lo <= t && t <= hi
                })
                .count();
            inside as f64 / truth.len() as f64
        })
        .collect();
    Ok(CoverageCurve { levels: levels.to_vec(), coverage, out_of_span })
}

fn trapezoid(grid: &[f64], f: impl Fn(usize) -> f64) -> f64 {
    grid.windows(2).enumerate().map(|(j, w)| 0.5 * (f(j) + f(j + 1)) * (w[1] - w[0])).sum()
}

/// `∫ (1/N) Σᵢ |𝕀(yᵢ < t) − Fᵢ(t)| dt` by the trapezoid rule over the grid.
pub fn calibration_loss(pd: &PredictiveDistribution, truth: &[f64]) -> Result<f64> {
    check_truth(pd, truth)?;
    let n = truth.len() as f64;
    let dev: Vec<f64> = pd
        .y_grid
        .iter()
        .enumerate()
        .map(|(j, &t)| truth.iter().enumerate().map(|(i, &y)| ((y < t) as u8 as f64 - pd.cdf[(i, j)]).abs()).sum::<f64>() / n)
        .collect();
    Ok(trapezoid(&pd.y_grid, |j| dev[j]))
}

fn grid_span(pd: &PredictiveDistribution) -> f64 {
    pd.y_grid[pd.y_grid.len() - 1] - pd.y_grid[0]
}

/// Per-observation CRPS on the grid, in units where the grid spans `[0, 1]`.
pub fn crps_grid(pd: &PredictiveDistribution, truth: &[f64]) -> Result<Vec<f64>> {
    check_truth(pd, truth)?;
    let span = grid_span(pd);
    Ok(truth
        .iter()
        .enumerate()
        .map(|(i, &y)| trapezoid(&pd.y_grid, |j| (pd.cdf[(i, j)] - (pd.y_grid[j] >= y) as u8 as f64).powi(2)) / span)
        .collect())
}

/// Mean standardised grid-CRPS, bounded by 1.
pub fn accuracy_loss(pd: &PredictiveDistribution, truth: &[f64]) -> Result<f64> {
    let c = crps_grid(pd, truth)?;
    Ok(c.iter().sum::<f64>() / c.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremBound {
    pub lhs: f64,
    pub rhs: f64,
    pub b: f64,
    pub eps: f64,
    pub holds: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub ensemble: f64,
    pub residual: f64,
    pub noise: f64,
}

impl UncertaintySummary {
    pub fn from_predictive(pd: &PredictiveDistribution) -> Self {
        let n = pd.variance_components.len().max(1) as f64;
        let sum = |f: fn(&crate::ensemble::VarianceComponents) -> f64| pd.variance_components.iter().map(f).sum::<f64>() / n;
        Self { ensemble: sum(|v| v.ensemble), residual: sum(|v| v.residual), noise: sum(|v| v.noise) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    pub rmse: f64,
    pub coverage: Option<CoverageCurve>,
    /// ℂ in outcome units.
    pub calibration_loss: Option<f64>,
    /// 𝕃 as standardised grid-CRPS.
    pub accuracy_loss: Option<f64>,
    pub grid_span: Option<f64>,
    pub theorem_bound: Option<TheoremBound>,
    pub uncertainty: Option<UncertaintySummary>,
}

/// RMSE of `mean` against `truth`; probabilistic metrics of `pd` against
/// `observed` when a predictive distribution is available.
pub fn evaluate(
    method: &str,
    mean: &[f64],
    truth: &[f64],
    pd: Option<&PredictiveDistribution>,
    observed: &[f64],
) -> Result<EvaluationReport> {
    let mut report = EvaluationReport {
        method: method.to_string(),
        rmse: rmse(mean, truth)?,
        coverage: None,
        calibration_loss: None,
        accuracy_loss: None,
        grid_span: None,
        theorem_bound: None,
        uncertainty: None,
    };
    if let Some(pd) = pd {
        report.coverage = Some(coverage_curve(pd, observed, &report_levels())?);
        report.calibration_loss = Some(calibration_loss(pd, observed)?);
        report.accuracy_loss = Some(accuracy_loss(pd, observed)?);
        report.grid_span = Some(grid_span(pd));
        report.uncertainty = Some(UncertaintySummary::from_predictive(pd));
    }
    Ok(report)
}

/// `𝕃(F̂) − 𝕃(F̂₀) ≤ 2B·ℂ(F̂) + (B+1)·ε` with losses on the standardised grid
/// (`B = 1`) and `ε` estimated by the standardised ℂ(F̂).
pub fn theorem1_check(calibrated: &EvaluationReport, uncalibrated: &EvaluationReport) -> Result<TheoremBound> {
    let need = |r: &EvaluationReport| -> Result<(f64, f64, f64)> {
        match (r.accuracy_loss, r.calibration_loss, r.grid_span) {
            (Some(a), Some(c), Some(s)) => Ok((a, c, s)),
            _ => Err(Error::input(format!("report for {} has no probabilistic metrics", r.method))),
        }
    };
    let (l_cal, c_cal, span) = need(calibrated)?;
    let (l_uncal, _, span0) = need(uncalibrated)?;
    if (span - span0).abs() > 1e-9 * span.abs().max(1.0) {
        return Err(Error::input("reports were computed on different outcome grids"));
    }
    let b = 1.0;
    let c = c_cal / span;
    let eps = c;
    let lhs = l_cal - l_uncal;
    let rhs = 2.0 * b * c + (b + 1.0) * eps;
    Ok(TheoremBound { lhs, rhs, b, eps, holds: lhs <= rhs })
}

// ---------------------------------------------------------------------------
// Leave-one-out

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooResult {
    pub predictions: Vec<Option<f64>>,
    pub pooled_rmse: f64,
    pub successes: usize,
    pub failures: usize,
}

/// Runs `fit_predict(held_out, train_indices, fold_seed)` once per row. Failed
/// folds are logged and excluded from the pooled RMSE.
pub fn loo_harness<F>(y: &[f64], seed: u64, parallel: bool, fit_predict: F) -> Result<LooResult>
where
    F: Fn(usize, &[usize], u64) -> Result<f64> + Sync,
{
    let n = y.len();
    if n < 3 {
        return Err(Error::input("leave-one-out needs N >= 3"));
    }
    let run = |i: usize| {
        let train: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        match fit_predict(i, &train, derive_seed(seed, i as u64)) {
            Ok(p) if p.is_finite() => Some(p),
            Ok(p) => {
                log::warn!("fold {i} predicted a non-finite value {p}");
                None
            }
            Err(e) => {
                log::warn!("fold {i} failed: {e}");
                None
            }
        }
    };
    let predictions: Vec<Option<f64>> =
        if parallel { (0..n).into_par_iter().map(run).collect() } else { (0..n).map(run).collect() };
    let ok: Vec<(f64, f64)> = predictions.iter().zip(y).filter_map(|(p, &t)| p.map(|p| (p, t))).collect();
    let successes = ok.len();
    let pooled_rmse = if successes == 0 {
        f64::NAN
    } else {
        (ok.iter().map(|(p, t)| (p - t).powi(2)).sum::<f64>() / successes as f64).sqrt()
    };
    Ok(LooResult { predictions, pooled_rmse, successes, failures: n - successes })
}

// ---------------------------------------------------------------------------
// Report rows

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub level: Option<f64>,
    pub value: f64,
    pub method: String,
    pub replication: usize,
}

impl ReportRow {
    pub fn new(metric: &str, level: Option<f64>, value: f64, method: &str, replication: usize) -> Self {
        Self { metric: metric.into(), level, value, method: method.into(), replication }
    }
}

impl EvaluationReport {
    pub fn rows(&self, replication: usize) -> Vec<ReportRow> {
        let m = self.method.as_str();
        let mut rows = vec![ReportRow::new("rmse", None, self.rmse, m, replication)];
        if let Some(c) = &self.coverage {
            rows.extend(c.levels.iter().zip(&c.coverage).map(|(&l, &v)| ReportRow::new("coverage", Some(l), v, m, replication)));
            if let Ok(mad) = c.mean_abs_deviation(&summary_levels()) {
                rows.push(ReportRow::new("coverage_mad", None, mad, m, replication));
            }
        }
        let scalars = [
            ("calibration_loss", self.calibration_loss),
            ("accuracy_loss", self.accuracy_loss),
            ("ensemble_var", self.uncertainty.map(|u| u.ensemble)),
            ("residual_var", self.uncertainty.map(|u| u.residual)),
            ("noise_var", self.uncertainty.map(|u| u.noise)),
        ];
        rows.extend(scalars.iter().filter_map(|(k, v)| v.map(|v| ReportRow::new(k, None, v, m, replication))));
        if let Some(t) = &self.theorem_bound {
            rows.push(ReportRow::new("theorem_lhs", None, t.lhs, m, replication));
            rows.push(ReportRow::new("theorem_rhs", None, t.rhs, m, replication));
            rows.push(ReportRow::new("theorem_holds", None, t.holds as u8 as f64, m, replication));
        }
        rows
    }
}

/// Writes `metric,level,value,method,replication`; empty level when absent.
pub fn write_report(path: impl AsRef<Path>, rows: &[ReportRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "metric,level,value,method,replication")?;
    for r in rows {
        let level = r.level.map(|l| format!("{l:.2}")).unwrap_or_default();
        writeln!(w, "{},{},{:.16e},{},{}", r.metric, level, r.value, r.method, r.replication)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a report written by [`write_report`].
pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if rec.len() != 5 {
            return Err(Error::Parse { line, message: format!("expected 5 fields, found {}", rec.len()) });
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse { line, message: format!("non-numeric value {s:?}") });
        out.push(ReportRow {
            metric: rec[0].to_string(),
            level: if rec[1].is_empty() { None } else { Some(num(&rec[1])?) },
            value: num(&rec[2])?,
            method: rec[3].to_string(),
            replication: rec[4].parse().map_err(|_| Error::Parse { line, message: "bad replication index".into() })?,
        });
    }
    Ok(out)
}
