//! Versioned JSON snapshots of fitted models.
//!
//! A snapshot is a single JSON object:
//!
//! ```text
//! { "format_version": 1, "kind": "bne-model", "model": { "ours": {...} } }
//! ```
//!
//! `model` holds either a fitted ensemble with its link and fit configuration
//! (`ours`, `ours_kl_only`) or, for the baselines, the training rows and the
//! settings needed to refit deterministically (`baseline`). Readers reject any
//! other `format_version` or `kind`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::benchmark::{baseline_prediction, BaselineConfig, Method};
use crate::ensemble::{BaseModelSet, PredictiveDistribution};
use crate::error::{Error, Result};
use crate::inference::{gibbs_fit, predict, DivergenceMode, EnsembleData, FitConfig, GibbsFit};
use crate::points::Points;

pub const FORMAT_VERSION: u32 = 1;
pub const KIND: &str = "bne-model";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotModel {
    Ours { method: Method, config: FitConfig, fit: Box<GibbsFit> },
    Baseline { method: Method, config: BaselineConfig, seed: u64, x: Points, y: Vec<f64>, bases: BaseModelSet },
}

impl SnapshotModel {
    pub fn method(&self) -> Method {
        match self {
            SnapshotModel::Ours { method, .. } | SnapshotModel::Baseline { method, .. } => *method,
        }
    }
}

/// Point predictions plus predictive distributions when the method has them.
#[derive(Clone, Debug)]
pub struct ModelPrediction {
    pub mean: Vec<f64>,
    pub predictive: Option<PredictiveDistribution>,
    /// `F₀` for the ensemble methods.
    pub uncalibrated: Option<PredictiveDistribution>,
}

/// Fits `method` on `data`; ensemble methods run the two-step fit, baselines
/// only record what they need to refit deterministically.
pub fn fit_model(method: Method, data: &EnsembleData, fit: &FitConfig, baselines: &BaselineConfig) -> Result<SnapshotModel> {
    match method {
        Method::Ours | Method::OursKlOnly => {
            let mut config = fit.clone();
            if method == Method::OursKlOnly {
                config.mode = DivergenceMode::KlOnly;
            }
            let fitted = gibbs_fit(data, &config)?;
            Ok(SnapshotModel::Ours { method, config, fit: Box::new(fitted) })
        }
        m => {
            // fail early if the baseline cannot be fitted on these rows
            baseline_prediction(m, &data.x, &data.y, &data.bases, &data.x, &data.bases, baselines, 16, fit.seed)?;
            Ok(SnapshotModel::Baseline {
                method: m,
                config: baselines.clone(),
                seed: fit.seed,
                x: data.x.clone(),
                y: data.y.clone(),
                bases: data.bases.clone(),
            })
        }
    }
}

impl SnapshotModel {
    pub fn predict(&self, x: &Points, bases: &BaseModelSet) -> Result<ModelPrediction> {
        if x.len() != bases.n() {
            return Err(Error::Input("inputs and base predictions differ in length".into()));
        }
        match self {
            SnapshotModel::Ours { config, fit, .. } => {
                if bases.k() != fit.posterior.k() {
                    return Err(Error::Input(format!("model expects {} base models, got {}", fit.posterior.k(), bases.k())));
                }
                let p = predict(fit, bases, x, None, config)?;
                Ok(ModelPrediction { mean: p.calibrated.mean.clone(), predictive: Some(p.calibrated), uncalibrated: Some(p.uncalibrated) })
            }
            SnapshotModel::Baseline { method, config, seed, x: tx, y, bases: tb } => {
                let (mean, pd) = baseline_prediction(*method, tx, y, tb, x, bases, config, 256, *seed)?;
                Ok(ModelPrediction { mean, predictive: pd, uncalibrated: None })
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Snapshot {
    pub format_version: u32,
    pub kind: String,
    pub model: SnapshotModel,
}

impl Snapshot {
    pub fn new(model: SnapshotModel) -> Self {
        Self { format_version: FORMAT_VERSION, kind: KIND.into(), model }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Input(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => return Err(Error::Unsupported(format!("snapshot format_version {v}"))),
            None => return Err(Error::Parse { line: 1, message: "snapshot lacks format_version".into() }),
        }
        if value.get("kind").and_then(|v| v.as_str()) != Some(KIND) {
            return Err(Error::Unsupported("snapshot kind".into()));
        }
        serde_json::from_value(value).map_err(|e| Error::Parse { line: 1, message: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn baseline() -> Snapshot {
        Snapshot::new(SnapshotModel::Baseline {
            method: Method::LnrStack,
            config: BaselineConfig::default(),
            seed: 3,
            x: Points::from_1d(&[0.1, 0.2]),
            y: vec![1.0, 2.0],
            bases: BaseModelSet::new(vec!["a".into()], DMatrix::from_row_slice(1, 2, &[0.5, 0.25])).unwrap(),
        })
    }

    #[test]
    fn round_trip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        baseline().save(&p).unwrap();
        let back = Snapshot::load(&p).unwrap();
        assert_eq!(back.model.method(), Method::LnrStack);
        let text = std::fs::read_to_string(&p).unwrap().replace("\"format_version\":1", "\"format_version\":9");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(Snapshot::load(&p), Err(Error::Unsupported(_))));
    }
}
