//! The 1-D replication protocol and the spatial leave-one-out comparison.
//!
//! Each 1-D replication draws four independent 20-point training sets (one per
//! kernel ridge base model), a 20-point holdout on which every ensemble is fitted,
//! and a 500-point evenly spaced validation set. RMSE is measured against the
//! noise-free function; coverage and the probabilistic losses against noisy
//! validation targets drawn from the same generator.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    avg_ensemble, cv_stack, fit_base_models, gam_ensemble, gaussian_predictive, lnr_stack, nlr_stack,
    random_hyper_candidates, BASE_LENGTH_SCALES, BASE_RIDGE, DEFAULT_FOLDS, SEARCH_CANDIDATES,
};
use crate::data::{synth_1d, validation_1d, Dataset, NoiseKind};
use crate::ensemble::{BaseModelSet, PredictiveDistribution};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, loo_harness, summary_levels, theorem1_check, EvaluationReport, LooResult, ReportRow};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::inference::{gibbs_fit, linspace, predict, EnsembleData, FitConfig};
use crate::points::Points;
use crate::seeds::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ours,
    OursKlOnly,
    Avg,
    CvStack,
    LnrStack,
    NlrStack,
    Gam,
}

impl Method {
    pub const ALL: [Method; 7] =
        [Method::Ours, Method::OursKlOnly, Method::Avg, Method::CvStack, Method::LnrStack, Method::NlrStack, Method::Gam];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::OursKlOnly => "ours_kl_only",
            Method::Avg => "avg",
            Method::CvStack => "cv_stack",
            Method::LnrStack => "lnr_stack",
            Method::NlrStack => "nlr_stack",
            Method::Gam => "gam",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }
}

/// Shared knobs of the baseline fits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub folds: usize,
    pub spline_candidates: usize,
    pub ridge: f64,
    pub length_scales: Vec<f64>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            folds: DEFAULT_FOLDS,
            spline_candidates: SEARCH_CANDIDATES,
            ridge: BASE_RIDGE,
            length_scales: BASE_LENGTH_SCALES.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub replications: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub additive_noise: bool,
    pub train_size: usize,
    pub holdout_size: usize,
    pub validation_size: usize,
    pub baselines: BaselineConfig,
    pub fit: FitConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            replications: 100,
            seed: 0,
            methods: Method::ALL.to_vec(),
            additive_noise: false,
            train_size: 20,
            holdout_size: 20,
            validation_size: 500,
            baselines: BaselineConfig::default(),
            fit: FitConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    fn noise(&self) -> NoiseKind {
        if self.additive_noise { NoiseKind::Additive } else { NoiseKind::Input }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::config("replications must be >= 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("select at least one method"));
        }
        if self.train_size == 0 || self.holdout_size < 10 || self.validation_size == 0 {
            return Err(Error::config("train, holdout (>= 10) and validation sizes must be positive"));
        }
        self.fit.validate()
    }
}

/// Data of one 1-D replication.
#[derive(Clone, Debug)]
pub struct Replication {
    pub holdout: Dataset,
    pub validation: Dataset,
    pub holdout_bases: BaseModelSet,
    pub validation_bases: BaseModelSet,
}

pub fn replication_seed(master: u64, r: usize) -> u64 {
    derive_seed(master, r as u64)
}

pub fn make_replication(cfg: &BenchmarkConfig, r: usize) -> Result<Replication> {
    let seed = replication_seed(cfg.seed, r);
    let noise = cfg.noise();
    let train = (0..cfg.baselines.length_scales.len())
        .map(|k| synth_1d(cfg.train_size, derive_seed(seed, 1 + k as u64), noise).map(|d| (d.inputs, d.targets)))
        .collect::<Result<Vec<_>>>()?;
    let models = fit_base_models(&train, &cfg.baselines.length_scales, cfg.baselines.ridge)?;
    let holdout = synth_1d(cfg.holdout_size, derive_seed(seed, 10), noise)?;
    let validation = validation_1d(cfg.validation_size, derive_seed(seed, 11), noise)?;
    Ok(Replication {
        holdout_bases: models.predict(&holdout.inputs)?,
        validation_bases: models.predict(&validation.inputs)?,
        holdout,
        validation,
    })
}

/// Outcome grid `mean ± 6 sd` for Gaussian baselines.
fn gaussian_grid(mean: &[f64], var: f64, points: usize) -> Vec<f64> {
    let sd = var.sqrt().max(1e-9);
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min) - 6.0 * sd;
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 6.0 * sd;
    linspace(lo, hi, points)
}

/// Point predictions and an optional predictive for one baseline.
pub fn baseline_prediction(
    method: Method,
    train_x: &Points,
    train_y: &[f64],
    train_bases: &BaseModelSet,
    test_x: &Points,
    test_bases: &BaseModelSet,
    cfg: &BaselineConfig,
    grid_points: usize,
    seed: u64,
) -> Result<(Vec<f64>, Option<PredictiveDistribution>)> {
    let gaussian = |mean: Vec<f64>, var: f64| -> Result<(Vec<f64>, Option<PredictiveDistribution>)> {
        let pd = gaussian_predictive(&mean, var, &gaussian_grid(&mean, var, grid_points))?;
        Ok((mean, Some(pd)))
    };
    match method {
        Method::Avg => Ok((avg_ensemble(&test_bases.predictions), None)),
        Method::CvStack => Ok((cv_stack(train_y, train_bases, cfg.folds, seed)?.predict(test_bases)?, None)),
        Method::LnrStack => {
            let s = lnr_stack(train_y, train_bases)?;
            gaussian(s.predict(test_bases)?, s.residual_var)
        }
        Method::NlrStack => {
            let cands = random_hyper_candidates(cfg.spline_candidates, derive_seed(seed, 1));
            let s = nlr_stack(train_y, train_bases, &cands, cfg.folds, seed)?;
            gaussian(s.predict(test_bases)?, s.residual_var)
        }
        Method::Gam => {
            let cands = random_hyper_candidates(cfg.spline_candidates, derive_seed(seed, 2));
            let g = gam_ensemble(train_x, train_y, train_bases, &cands, cfg.folds, seed)?;
            gaussian(g.predict(test_x, test_bases)?, g.residual_var)
        }
        Method::Ours | Method::OursKlOnly => Err(Error::config("not a baseline method")),
    }
}

/// Fits every selected method on one replication and evaluates it.
pub fn run_replication(cfg: &BenchmarkConfig, r: usize) -> Result<Vec<EvaluationReport>> {
    let rep = make_replication(cfg, r)?;
    let seed = replication_seed(cfg.seed, r);
    let truth = rep.validation.truth.clone().unwrap_or_else(|| rep.validation.targets.clone());
    let observed = &rep.validation.targets;
    let mut reports = Vec::new();
    let wants = |m: Method| cfg.methods.contains(&m);
    if wants(Method::Ours) || wants(Method::OursKlOnly) {
        let data = EnsembleData::new(rep.holdout.inputs.clone(), rep.holdout.targets.clone(), rep.holdout_bases.clone())?;
        let fit_cfg = FitConfig { seed: derive_seed(seed, 20), ..cfg.fit.clone() };
        let fit = gibbs_fit(&data, &fit_cfg)?;
        let pred = predict(&fit, &rep.validation_bases, &rep.validation.inputs, None, &fit_cfg)?;
        let uncal = evaluate(Method::OursKlOnly.name(), &pred.uncalibrated.mean, &truth, Some(&pred.uncalibrated), observed)?;
        if wants(Method::Ours) {
            let mut cal = evaluate(Method::Ours.name(), &pred.calibrated.mean, &truth, Some(&pred.calibrated), observed)?;
            cal.theorem_bound = Some(theorem1_check(&cal, &uncal)?);
            reports.push(cal);
        }
        if wants(Method::OursKlOnly) {
            reports.push(uncal);
        }
    }
    for m in Method::ALL.into_iter().filter(|&m| wants(m) && !matches!(m, Method::Ours | Method::OursKlOnly)) {
        let (mean, pd) = baseline_prediction(
            m,
            &rep.holdout.inputs,
            &rep.holdout.targets,
            &rep.holdout_bases,
            &rep.validation.inputs,
            &rep.validation_bases,
            &cfg.baselines,
            cfg.fit.prediction_grid_points,
            derive_seed(seed, 21),
        )?;
        reports.push(evaluate(m.name(), &mean, &truth, pd.as_ref(), observed)?);
    }
    Ok(reports)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchmarkResult {
    /// `(replication, report)` in replication-then-method order.
    pub reports: Vec<(usize, EvaluationReport)>,
}

/// Runs all replications in parallel on the current rayon pool; the result
/// order does not depend on scheduling.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkResult> {
    cfg.validate()?;
    let per_rep: Vec<Vec<EvaluationReport>> =
        (0..cfg.replications).into_par_iter().map(|r| run_replication(cfg, r)).collect::<Result<_>>()?;
    Ok(BenchmarkResult {
        reports: per_rep.into_iter().enumerate().flat_map(|(r, v)| v.into_iter().map(move |rep| (r, rep))).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_rmse: f64,
    pub mean_coverage_mad: Option<f64>,
    pub theorem_holds: Option<(usize, usize)>,
}

impl BenchmarkResult {
    pub fn rows(&self) -> Vec<ReportRow> {
        self.reports.iter().flat_map(|(r, rep)| rep.rows(*r)).collect()
    }

    pub fn summary(&self) -> Vec<MethodSummary> {
        let mut order: Vec<String> = Vec::new();
        for (_, r) in &self.reports {
            if !order.contains(&r.method) {
                order.push(r.method.clone());
            }
        }
        order
            .into_iter()
            .map(|method| {
                let reps: Vec<&EvaluationReport> = self.reports.iter().map(|(_, r)| r).filter(|r| r.method == method).collect();
                let n = reps.len() as f64;
                let mads: Vec<f64> =
                    reps.iter().filter_map(|r| r.coverage.as_ref()?.mean_abs_deviation(&summary_levels()).ok()).collect();
                let bounds: Vec<bool> = reps.iter().filter_map(|r| r.theorem_bound.map(|t| t.holds)).collect();
                MethodSummary {
                    mean_rmse: reps.iter().map(|r| r.rmse).sum::<f64>() / n,
                    mean_coverage_mad: (!mads.is_empty()).then(|| mads.iter().sum::<f64>() / mads.len() as f64),
                    theorem_holds: (!bounds.is_empty()).then(|| (bounds.iter().filter(|&&b| b).count(), bounds.len())),
                    method,
                }
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Spatial leave-one-out

/// Fit settings for the spatial scenario: an OU residual kernel.
pub fn spatial_fit_config(base: &FitConfig) -> FitConfig {
    FitConfig { kernel_eps: KernelSpec { family: KernelFamily::Ou, ..base.kernel_eps }, ..base.clone() }
}

/// Leave-one-out predictions of `method` on a dataset with base predictions.
pub fn loo_method(
    ds: &Dataset,
    method: Method,
    fit: &FitConfig,
    baselines: &BaselineConfig,
    seed: u64,
    parallel: bool,
) -> Result<LooResult> {
    let bases = ds.base_predictions.as_ref().ok_or_else(|| Error::input("dataset has no base predictions"))?;
    loo_harness(&ds.targets, seed, parallel, |held, train, fold_seed| {
        let tx = ds.inputs.select(train);
        let ty: Vec<f64> = train.iter().map(|&i| ds.targets[i]).collect();
        let tb = bases.select_columns(train);
        let hx = ds.inputs.select(&[held]);
        let hb = bases.select_columns(&[held]);
        match method {
            Method::Ours | Method::OursKlOnly => {
                let cfg = FitConfig { seed: fold_seed, calibrate: fit.calibrate && method == Method::Ours, ..fit.clone() };
                let fitted = gibbs_fit(&EnsembleData::new(tx, ty, tb)?, &cfg)?;
                let pred = predict(&fitted, &hb, &hx, None, &cfg)?;
                Ok(pred.calibrated.mean[0])
            }
            m => Ok(baseline_prediction(m, &tx, &ty, &tb, &hx, &hb, baselines, fit.prediction_grid_points, fold_seed)?.0[0]),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("cv-stack".parse::<Method>().unwrap(), Method::CvStack);
        assert!("best".parse::<Method>().is_err());
    }

    #[test]
    fn replication_data_follows_the_protocol() {
        let cfg = BenchmarkConfig::default();
        let rep = make_replication(&cfg, 3).unwrap();
        assert_eq!(rep.holdout.len(), 20);
        assert_eq!(rep.validation.len(), 500);
        assert_eq!(rep.holdout_bases.k(), 4);
        let again = make_replication(&cfg, 3).unwrap();
        assert_eq!(rep.holdout, again.holdout);
        assert_ne!(rep.holdout.targets, make_replication(&cfg, 4).unwrap().holdout.targets);
    }

    #[test]
    fn baselines_run_on_one_replication() {
        let cfg = BenchmarkConfig {
            replications: 1,
            methods: vec![Method::Avg, Method::CvStack, Method::LnrStack, Method::NlrStack, Method::Gam],
            baselines: BaselineConfig { spline_candidates: 20, ..Default::default() },
            ..Default::default()
        };
        let res = run_benchmark(&cfg).unwrap();
        assert_eq!(res.reports.len(), 5);
        for (_, r) in &res.reports {
            assert!(r.rmse.is_finite() && r.rmse > 0.0);
        }
        assert!(res.rows().iter().all(|row| row.value.is_finite()));
    }
}
