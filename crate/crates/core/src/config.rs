//! JSON run configuration shared by the CLI subcommands.
//!
//! Unknown keys are rejected. Relative paths are resolved against the config
//! file's directory, and input paths must exist when the file is parsed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::benchmark::{BaselineConfig, BenchmarkConfig, Method};
use crate::error::{Error, Result};
use crate::inference::FitConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialConfig {
    pub n_sites: usize,
    pub n_models: usize,
    pub bias_scale: f64,
    /// Side of the regular map grid written next to the sites.
    pub grid_side: usize,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self { n_sites: 43, n_models: 3, bias_scale: 1.0, grid_side: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub method: Method,
    /// Methods compared by `benchmark` and `loo`.
    pub methods: Vec<Method>,
    pub replications: usize,
    pub additive_noise: bool,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub fit: FitConfig,
    pub baselines: BaselineConfig,
    pub spatial: SpatialConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::Ours,
            methods: Method::ALL.to_vec(),
            replications: 100,
            additive_noise: false,
            data: None,
            out: None,
            jobs: None,
            fit: FitConfig::default(),
            baselines: BaselineConfig::default(),
            spatial: SpatialConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base_dir.join(&*path);
                }
            }
        };
        resolve(&mut cfg.data);
        resolve(&mut cfg.out);
        if let Some(d) = &cfg.data {
            if !d.exists() {
                return Err(Error::Config(format!("data path {} does not exist", d.display())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, &base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::config("replications must be >= 1"));
        }
        if self.jobs == Some(0) {
            return Err(Error::config("jobs must be >= 1"));
        }
        self.fit.validate()
    }

    pub fn benchmark(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            replications: self.replications,
            seed: self.seed,
            methods: self.methods.clone(),
            additive_noise: self.additive_noise,
            baselines: self.baselines.clone(),
            fit: self.fit.clone(),
            ..BenchmarkConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_partial_documents() {
        let cfg = RunConfig::from_json(r#"{"seed": 4, "fit": {"iterations": 10}, "method": "lnr_stack"}"#, Path::new(".")).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.fit.iterations, 10);
        assert_eq!(cfg.fit.mc_samples, FitConfig::default().mc_samples);
        assert_eq!(cfg.method, Method::LnrStack);
    }

    #[test]
    fn rejects_unknown_keys_and_missing_paths() {
        assert!(matches!(RunConfig::from_json(r#"{"sed": 4}"#, Path::new(".")), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"fit": {"iters": 4}}"#, Path::new(".")), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"data": "no/such.csv"}"#, Path::new("/nonexistent")), Err(Error::Config(_))));
    }

    #[test]
    fn resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("d.csv"), "x1,y\n0,0\n").unwrap();
        std::fs::write(dir.path().join("c.json"), r#"{"data": "d.csv"}"#).unwrap();
        let cfg = RunConfig::load(dir.path().join("c.json")).unwrap();
        assert_eq!(cfg.data.unwrap(), dir.path().join("d.csv"));
    }

    #[test]
    fn default_round_trips_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text, Path::new(".")).unwrap(), cfg);
    }
}
