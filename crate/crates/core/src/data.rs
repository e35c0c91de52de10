//! Synthetic generators and the CSV dataset format.
//!
//! Observation files have the header `x1[,x2],y[,truth][,pred_<name>...]`,
//! base-prediction files `x1[,x2],pred_<name>...`. Columns are matched by
//! name, values are written with 17 significant digits, and an optional first
//! line starting with `#` carries free-form metadata.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ensemble::BaseModelSet;
use crate::error::{Error, Result};
use crate::points::Points;
use crate::seeds::derive_seed;

/// Standard deviation of the 1-D benchmark noise.
pub const NOISE_SD_1D: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Points,
    pub targets: Vec<f64>,
    /// Noise-free target values when known.
    pub truth: Option<Vec<f64>>,
    pub base_predictions: Option<BaseModelSet>,
    pub metadata: Option<String>,
}

impl Dataset {
    pub fn new(inputs: Points, targets: Vec<f64>) -> Result<Self> {
        let ds = Self { inputs, targets, truth: None, base_predictions: None, metadata: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.targets.len();
        if self.inputs.len() != n {
            return Err(Error::input("input and target row counts differ"));
        }
        if !(1..=2).contains(&self.inputs.dim()) {
            return Err(Error::input("inputs must be 1-D or 2-D"));
        }
        if let Some(t) = &self.truth {
            if t.len() != n {
                return Err(Error::input("truth length differs from targets"));
            }
        }
        if let Some(b) = &self.base_predictions {
            if b.n() != n {
                return Err(Error::input("base prediction columns differ from targets"));
            }
        }
        if self.targets.iter().chain(self.inputs.as_slice()).any(|v| !v.is_finite()) {
            return Err(Error::input("dataset values must be finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// `x + sin(4x) + sin(13x)`.
pub fn f_slow(x: f64) -> f64 {
    x + (4.0 * x).sin() + (13.0 * x).sin()
}

/// `0.5 sin(40x)` on the open interval `(0.1, 0.6)`, zero elsewhere.
pub fn f_fast(x: f64) -> f64 {
    if x > 0.1 && x < 0.6 {
        0.5 * (40.0 * x).sin()
    } else {
        0.0
    }
}

pub fn f_1d(x: f64) -> f64 {
    f_slow(x) + f_fast(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NoiseKind {
    /// `y = f(x + ε)`
    #[default]
    Input,
    /// `y = f(x) + ε`
    Additive,
}

fn noisy_target(x: f64, eps: f64, noise: NoiseKind) -> f64 {
    match noise {
        NoiseKind::Input => f_1d(x + eps),
        NoiseKind::Additive => f_1d(x) + eps,
    }
}

/// `n` inputs uniform on `(0, 1)` with noisy targets; ChaCha8 seeded from `seed`.
pub fn synth_1d(n: usize, seed: u64, noise: NoiseKind) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::input("synth_1d needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let targets = xs
        .iter()
        .map(|&x| {
            let e: f64 = StandardNormal.sample(&mut rng);
            noisy_target(x, NOISE_SD_1D * e, noise)
        })
        .collect();
    Ok(Dataset {
        truth: Some(xs.iter().map(|&x| f_1d(x)).collect()),
        inputs: Points::from_1d(&xs),
        targets,
        base_predictions: None,
        metadata: Some(format!("generator=synth_1d n={n} seed={seed} noise={noise:?}")),
    })
}

/// `n` evenly spaced inputs `(j + 0.5)/n` with noisy targets and noise-free truth.
pub fn validation_1d(n: usize, seed: u64, noise: NoiseKind) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::input("validation set needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|j| (j as f64 + 0.5) / n as f64).collect();
    let targets = xs
        .iter()
        .map(|&x| {
            let e: f64 = StandardNormal.sample(&mut rng);
            noisy_target(x, NOISE_SD_1D * e, noise)
        })
        .collect();
    Ok(Dataset {
        truth: Some(xs.iter().map(|&x| f_1d(x)).collect()),
        inputs: Points::from_1d(&xs),
        targets,
        base_predictions: None,
        metadata: Some(format!("generator=validation_1d n={n} seed={seed} noise={noise:?}")),
    })
}

/// Quadrant index of a point in the unit square: 0 = SW, 1 = NW, 2 = NE, 3 = SE.
pub fn quadrant(p: &[f64]) -> usize {
    match (p[0] >= 0.5, p[1] >= 0.5) {
        (false, false) => 0,
        (false, true) => 1,
        (true, true) => 2,
        (true, false) => 3,
    }
}

const RFF_FEATURES: usize = 512;
const SPATIAL_LENGTH_SCALE: f64 = 0.3;
const SPATIAL_NOISE_SD: f64 = 0.1;

/// A 2-D scenario. The truth is a smooth random field (random-Fourier
/// approximation of a GP draw with RBF kernel `exp(−d²/0.3)`) plus a regional
/// trend. Each base model is the truth plus its own bias field: all models miss
/// the regional trend, and each adds a smooth quadrant-wise offset. In the
/// south-west quadrant the models disagree strongly; elsewhere the most
/// accurate model rotates.
#[derive(Clone, Debug)]
pub struct SpatialScenario {
    omega: Vec<[f64; 2]>,
    phase: Vec<f64>,
    /// `amplitudes[k][q]`: bias of model `k` in quadrant `q`.
    pub amplitudes: Vec<[f64; 4]>,
    pub bias_scale: f64,
    pub noise_sd: f64,
}

fn smooth_step(t: f64) -> f64 {
    1.0 / (1.0 + (-t / 0.06).exp())
}

fn quadrant_bump(p: &[f64], q: usize) -> f64 {
    let east = smooth_step(p[0] - 0.5);
    let north = smooth_step(p[1] - 0.5);
    match q {
        0 => (1.0 - east) * (1.0 - north),
        1 => (1.0 - east) * north,
        2 => east * north,
        _ => east * (1.0 - north),
    }
}

impl SpatialScenario {
    pub fn new(n_models: usize, seed: u64, bias_scale: f64) -> Result<Self> {
        if n_models == 0 {
            return Err(Error::input("need at least one base model"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5A));
        // exp(−d²/l) = exp(−d²/(2ℓ²)) with ℓ² = l/2; spectral draws ω ~ N(0, I/ℓ²).
        let inv_ell = (2.0 / SPATIAL_LENGTH_SCALE).sqrt();
        let omega = (0..RFF_FEATURES)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                [a * inv_ell, b * inv_ell]
            })
            .collect();
        let phase = (0..RFF_FEATURES).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
        let amplitudes = (0..n_models)
            .map(|k| {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                let mut a = [0.0; 4];
                a[0] = sign * (1.0 + 0.2 * k as f64);
                for q in 1..4 {
                    a[q] = if (q - 1) == k % 3 { 0.05 } else { sign * 0.35 * if q % 2 == 0 { 1.0 } else { -1.0 } };
                }
                a
            })
            .collect();
        Ok(Self { omega, phase, amplitudes, bias_scale, noise_sd: SPATIAL_NOISE_SD })
    }

    pub fn k(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn field(&self, p: &[f64]) -> f64 {
        let norm = (2.0 / RFF_FEATURES as f64).sqrt();
        norm * self.omega.iter().zip(&self.phase).map(|(w, b)| (w[0] * p[0] + w[1] * p[1] + b).cos()).sum::<f64>()
    }

    /// Regional trend shared by all models' errors.
    pub fn regional_bias(&self, p: &[f64]) -> f64 {
        0.4 * (PI * p[0]).sin() * p[1]
    }

    pub fn truth(&self, p: &[f64]) -> f64 {
        self.field(p) + self.regional_bias(p)
    }

    pub fn model_bias(&self, k: usize, p: &[f64]) -> f64 {
        let offset: f64 = (0..4).map(|q| self.amplitudes[k][q] * quadrant_bump(p, q)).sum();
        self.bias_scale * (offset - self.regional_bias(p))
    }

    pub fn base_prediction(&self, k: usize, p: &[f64]) -> f64 {
        self.truth(p) + self.model_bias(k, p)
    }

    pub fn base_set(&self, x: &Points) -> Result<BaseModelSet> {
        let names = (0..self.k()).map(|k| format!("model{}", k + 1)).collect();
        BaseModelSet::new(names, DMatrix::from_fn(self.k(), x.len(), |k, i| self.base_prediction(k, x.row(i))))
    }

    /// Dataset at the given sites with noisy targets drawn from `seed`.
    pub fn observe(&self, x: Points, seed: u64, label: &str) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<f64> = x.iter().map(|p| self.truth(p)).collect();
        let targets = truth
            .iter()
            .map(|t| {
                let e: f64 = StandardNormal.sample(&mut rng);
                t + self.noise_sd * e
            })
            .collect();
        let bases = self.base_set(&x)?;
        Ok(Dataset { inputs: x, targets, truth: Some(truth), base_predictions: Some(bases), metadata: Some(label.into()) })
    }

    /// Regular `side × side` grid of cell centres over the unit square.
    pub fn grid(&self, side: usize, seed: u64) -> Result<Dataset> {
        let rows: Vec<Vec<f64>> = (0..side * side)
            .map(|i| vec![((i % side) as f64 + 0.5) / side as f64, ((i / side) as f64 + 0.5) / side as f64])
            .collect();
        self.observe(Points::from_rows(&rows)?, seed, &format!("generator=spatial_grid side={side}"))
    }
}

/// Sites uniform on the unit square with truth, targets and `n_models` base predictions.
pub fn synth_spatial(n_sites: usize, n_models: usize, seed: u64) -> Result<Dataset> {
    synth_spatial_with_bias(n_sites, n_models, seed, 1.0)
}

pub fn synth_spatial_with_bias(n_sites: usize, n_models: usize, seed: u64, bias_scale: f64) -> Result<Dataset> {
    if n_sites < 5 {
        return Err(Error::input("synth_spatial needs n_sites >= 5"));
    }
    let scenario = SpatialScenario::new(n_models, seed, bias_scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x51));
    let rows: Vec<Vec<f64>> = (0..n_sites).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
    scenario.observe(
        Points::from_rows(&rows)?,
        derive_seed(seed, 0x52),
        &format!("generator=synth_spatial n_sites={n_sites} n_models={n_models} seed={seed} bias_scale={bias_scale}"),
    )
}

// ---------------------------------------------------------------------------
// CSV

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

struct Table {
    metadata: Option<String>,
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
    header_line: usize,
}

fn read_table(path: &Path) -> Result<Table> {
    let reader = BufReader::new(File::open(path)?);
    let mut metadata = None;
    let mut header: Option<(Vec<String>, usize)> = None;
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            if header.is_none() && metadata.is_none() {
                metadata = Some(rest.trim().to_string());
            }
            continue;
        }
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(trimmed.as_bytes());
        let record = rdr
            .records()
            .next()
            .ok_or_else(|| parse_err(lineno, "empty record"))?
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        match &header {
            None => header = Some((record.iter().map(|s| s.trim().to_string()).collect(), lineno)),
            Some((h, _)) => {
                if record.len() != h.len() {
                    return Err(parse_err(lineno, format!("expected {} fields, found {}", h.len(), record.len())));
                }
                let row = record
                    .iter()
                    .enumerate()
                    .map(|(c, cell)| {
                        cell.trim().parse::<f64>().map_err(|_| parse_err(lineno, format!("non-numeric value {cell:?} in column {}", h[c])))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                rows.push(row);
            }
        }
    }
    let (header, header_line) = header.ok_or_else(|| parse_err(1, "missing header"))?;
    if rows.is_empty() {
        return Err(parse_err(header_line + 1, "no rows"));
    }
    Ok(Table { metadata, header, rows, header_line })
}

impl Table {
    fn column(&self, name: &str) -> Option<Vec<f64>> {
        self.header.iter().position(|h| h == name).map(|c| self.rows.iter().map(|r| r[c]).collect())
    }

    fn require(&self, name: &str) -> Result<Vec<f64>> {
        self.column(name).ok_or_else(|| parse_err(self.header_line, format!("missing column {name}")))
    }

    fn inputs(&self) -> Result<Points> {
        let x1 = self.require("x1")?;
        match self.column("x2") {
            None => Ok(Points::from_1d(&x1)),
            Some(x2) => Points::new(2, x1.iter().zip(&x2).flat_map(|(a, b)| [*a, *b]).collect()),
        }
    }

    fn predictions(&self) -> Result<Option<BaseModelSet>> {
        let names: Vec<(usize, String)> = self
            .header
            .iter()
            .enumerate()
            .filter_map(|(c, h)| h.strip_prefix("pred_").map(|n| (c, n.to_string())))
            .collect();
        if names.is_empty() {
            return Ok(None);
        }
        let preds = DMatrix::from_fn(names.len(), self.rows.len(), |k, i| self.rows[i][names[k].0]);
        Ok(Some(BaseModelSet::new(names.into_iter().map(|(_, n)| n).collect(), preds)?))
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let t = read_table(path.as_ref())?;
    let ds = Dataset {
        inputs: t.inputs()?,
        targets: t.require("y")?,
        truth: t.column("truth"),
        base_predictions: t.predictions()?,
        metadata: t.metadata.clone(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Reads a `x1[,x2],pred_<name>...` file.
pub fn load_base_predictions(path: impl AsRef<Path>) -> Result<(Points, BaseModelSet)> {
    let t = read_table(path.as_ref())?;
    let preds = t.predictions()?.ok_or_else(|| parse_err(t.header_line, "no pred_<name> columns"))?;
    Ok((t.inputs()?, preds))
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_rows(
    path: &Path,
    metadata: Option<&str>,
    x: &Points,
    columns: &[(String, Vec<f64>)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    if let Some(m) = metadata {
        writeln!(w, "# {}", m.replace('\n', " "))?;
    }
    let mut header: Vec<String> = (1..=x.dim()).map(|d| format!("x{d}")).collect();
    header.extend(columns.iter().map(|(n, _)| n.clone()));
    writeln!(w, "{}", header.join(","))?;
    for i in 0..x.len() {
        let mut cells: Vec<String> = x.row(i).iter().map(|&v| fmt(v)).collect();
        cells.extend(columns.iter().map(|(_, c)| fmt(c[i])));
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let mut columns = vec![("y".to_string(), ds.targets.clone())];
    if let Some(t) = &ds.truth {
        columns.push(("truth".into(), t.clone()));
    }
    if let Some(b) = &ds.base_predictions {
        for (k, name) in b.names.iter().enumerate() {
            columns.push((format!("pred_{name}"), b.predictions.row(k).iter().copied().collect()));
        }
    }
    write_rows(path.as_ref(), ds.metadata.as_deref(), &ds.inputs, &columns)
}

pub fn save_base_predictions(x: &Points, bases: &BaseModelSet, path: impl AsRef<Path>) -> Result<()> {
    let columns: Vec<(String, Vec<f64>)> = bases
        .names
        .iter()
        .enumerate()
        .map(|(k, n)| (format!("pred_{n}"), bases.predictions.row(k).iter().copied().collect()))
        .collect();
    write_rows(path.as_ref(), None, x, &columns)
}

/// Writes arbitrary named numeric columns next to the inputs.
pub fn save_columns(x: &Points, columns: &[(String, Vec<f64>)], path: impl AsRef<Path>) -> Result<()> {
    if columns.iter().any(|(_, c)| c.len() != x.len()) {
        return Err(Error::input("column lengths must match the inputs"));
    }
    write_rows(path.as_ref(), None, x, columns)
}
