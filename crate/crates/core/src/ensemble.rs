//! The systematic component: base predictions combined through softmax
//! weights of independent GPs, plus a residual GP and Gaussian noise, and the
//! uncalibrated predictive distribution obtained by Monte Carlo over the
//! variational posterior.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{dgp_marginal, lognormal_sample_and_entropy, mvn_sample, DgpFactor, LogNormalFactor};
use crate::kernels::KernelSpec;
use crate::points::Points;
use crate::seeds::derive_seed;
use crate::stats::{norm_cdf, norm_pdf};

/// Default Monte Carlo draw count for predictive CDFs.
pub const DEFAULT_CDF_DRAWS: usize = 1024;
/// Default Monte Carlo draw count for the variance decomposition.
pub const DEFAULT_DECOMPOSITION_DRAWS: usize = 4096;

/// Tabulated predictions of `K` deterministic base models, `K × N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseModelSet {
    pub names: Vec<String>,
    pub predictions: DMatrix<f64>,
}

impl BaseModelSet {
    pub fn new(names: Vec<String>, predictions: DMatrix<f64>) -> Result<Self> {
        if names.is_empty() || names.len() != predictions.nrows() {
            return Err(Error::input(format!(
                "need K >= 1 names matching prediction rows ({} names, {} rows)",
                names.len(),
                predictions.nrows()
            )));
        }
        if predictions.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("base predictions must be finite"));
        }
        Ok(Self { names, predictions })
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn n(&self) -> usize {
        self.predictions.ncols()
    }

    pub fn select_columns(&self, idx: &[usize]) -> Self {
        Self { names: self.names.clone(), predictions: self.predictions.select_columns(idx) }
    }
}

/// Fitted variational posterior of the systematic component.
///
/// GP factors, the residual and the noise live in standardized outcome units
/// `(y - y_shift) / y_scale`; everything returned to callers is in outcome units.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsemblePosterior {
    pub weight_gps: Vec<DgpFactor>,
    pub residual_gp: DgpFactor,
    pub temperature: LogNormalFactor,
    pub noise_sd: LogNormalFactor,
    pub kernel_mu: KernelSpec,
    pub kernel_eps: KernelSpec,
    pub temperature_prior: LogNormalFactor,
    pub noise_prior: LogNormalFactor,
    pub y_shift: f64,
    pub y_scale: f64,
}

impl EnsemblePosterior {
    pub fn k(&self) -> usize {
        self.weight_gps.len()
    }

    pub fn standardize_bases(&self, bases: &BaseModelSet) -> DMatrix<f64> {
        bases.predictions.map(|v| (v - self.y_shift) / self.y_scale)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub ensemble: f64,
    pub residual: f64,
    pub noise: f64,
}

impl VarianceComponents {
    pub fn total(&self) -> f64 {
        self.ensemble + self.residual + self.noise
    }
}

/// Predictive CDF/PDF per location on a shared outcome grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub y_grid: Vec<f64>,
    /// `N × M`, row `i` is the CDF at location `i`.
    pub cdf: DMatrix<f64>,
    pub pdf: DMatrix<f64>,
    pub mean: Vec<f64>,
    pub variance_components: Vec<VarianceComponents>,
}

impl PredictiveDistribution {
    pub fn n(&self) -> usize {
        self.cdf.nrows()
    }

    /// Homoscedastic or heteroscedastic Gaussian predictive on a grid.
    pub fn gaussian(mean: &[f64], sd: &[f64], y_grid: &[f64]) -> Result<Self> {
        check_grid(y_grid)?;
        if mean.len() != sd.len() {
            return Err(Error::input("mean and sd lengths differ"));
        }
        let (n, m) = (mean.len(), y_grid.len());
        let mut cdf = DMatrix::zeros(n, m);
        let mut pdf = DMatrix::zeros(n, m);
        for i in 0..n {
            for (j, &y) in y_grid.iter().enumerate() {
                if sd[i] > 0.0 {
                    let z = (y - mean[i]) / sd[i];
                    cdf[(i, j)] = norm_cdf(z);
                    pdf[(i, j)] = norm_pdf(z) / sd[i];
                } else {
                    cdf[(i, j)] = if y >= mean[i] { 1.0 } else { 0.0 };
                }
            }
        }
        let variance_components =
            sd.iter().map(|s| VarianceComponents { ensemble: 0.0, residual: 0.0, noise: s * s }).collect();
        Ok(Self { y_grid: y_grid.to_vec(), cdf, pdf, mean: mean.to_vec(), variance_components })
    }

    /// Mean implied by the gridded CDF, `y_min + ∫ (1 − F)` with the mass below
    /// the grid placed at `y_min`.
    pub fn cdf_mean(&self, i: usize) -> f64 {
        let g = &self.y_grid;
        let mut acc = g[0];
        for j in 1..g.len() {
            let s0 = 1.0 - self.cdf[(i, j - 1)];
            let s1 = 1.0 - self.cdf[(i, j)];
            acc += 0.5 * (s0 + s1) * (g[j] - g[j - 1]);
        }
        acc
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            y_grid: self.y_grid.clone(),
            cdf: self.cdf.select_rows(idx),
            pdf: self.pdf.select_rows(idx),
            mean: idx.iter().map(|&i| self.mean[i]).collect(),
            variance_components: idx.iter().map(|&i| self.variance_components[i]).collect(),
        }
    }
}

pub(crate) fn check_grid(y_grid: &[f64]) -> Result<()> {
    if y_grid.len() < 3 {
        return Err(Error::input("y_grid needs at least 3 points"));
    }
    if y_grid.windows(2).any(|w| !(w[1] > w[0])) || y_grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("y_grid must be finite and strictly increasing"));
    }
    Ok(())
}

/// Column-wise softmax of `g / temperature` (`K × N`), with max subtraction.
pub fn softmax_weights(g_values: &DMatrix<f64>, temperature: f64) -> Result<DMatrix<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::input(format!("temperature must be positive, got {temperature}")));
    }
    if g_values.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("weight GP values must be finite"));
    }
    let mut w = g_values.clone();
    for mut col in w.column_iter_mut() {
        softmax_in_place(col.as_mut_slice(), temperature);
    }
    Ok(w)
}

#[inline]
pub(crate) fn softmax_in_place(v: &mut [f64], temperature: f64) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = ((*x - max) / temperature).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Monte Carlo draws of the systematic mean function at a set of locations.
#[derive(Clone, Debug)]
pub struct SystematicDraws {
    /// `count × N`: `Σ f̂ₖ μₖ + ε`, outcome units.
    pub mean: DMatrix<f64>,
    /// `count × N`: `Σ f̂ₖ μₖ`.
    pub combined: DMatrix<f64>,
    /// `count × N`: residual process draws, outcome units.
    pub residual: DMatrix<f64>,
    /// Per draw, the `K × N` weight matrix.
    pub weights: Vec<DMatrix<f64>>,
    /// Per draw noise standard deviation, outcome units.
    pub sigma: Vec<f64>,
}

pub fn systematic_draws(
    post: &EnsemblePosterior,
    bases: &BaseModelSet,
    x: &Points,
    count: usize,
    seed: u64,
) -> Result<SystematicDraws> {
    let k = post.k();
    if bases.k() != k {
        return Err(Error::input(format!("posterior has {k} weight GPs but {} base models were given", bases.k())));
    }
    if bases.n() != x.len() {
        return Err(Error::input("base predictions must be tabulated at every requested location"));
    }
    if count == 0 {
        return Err(Error::input("count must be >= 1"));
    }
    let n = x.len();
    let g_draws: Vec<DMatrix<f64>> = post
        .weight_gps
        .iter()
        .enumerate()
        .map(|(j, f)| mvn_sample(&dgp_marginal(f, x)?, count, derive_seed(seed, j as u64)))
        .collect::<Result<_>>()?;
    let eps = mvn_sample(&dgp_marginal(&post.residual_gp, x)?, count, derive_seed(seed, 1000))?;
    let (lambda, _) = lognormal_sample_and_entropy(&post.temperature, count, derive_seed(seed, 1001))?;
    let (sigma_std, _) = lognormal_sample_and_entropy(&post.noise_sd, count, derive_seed(seed, 1002))?;

    let mut mean = DMatrix::zeros(count, n);
    let mut combined = DMatrix::zeros(count, n);
    let mut weights = Vec::with_capacity(count);
    let mut buf = vec![0.0; k];
    for d in 0..count {
        let mut w = DMatrix::zeros(k, n);
        for i in 0..n {
            for (kk, b) in buf.iter_mut().enumerate() {
                *b = g_draws[kk][(d, i)];
            }
            softmax_in_place(&mut buf, lambda[d]);
            let mut c = 0.0;
            for kk in 0..k {
                w[(kk, i)] = buf[kk];
                c += buf[kk] * bases.predictions[(kk, i)];
            }
            combined[(d, i)] = c;
            mean[(d, i)] = c + post.y_scale * eps[(d, i)];
        }
        weights.push(w);
    }
    Ok(SystematicDraws {
        mean,
        combined,
        residual: eps * post.y_scale,
        weights,
        sigma: sigma_std.iter().map(|s| s * post.y_scale).collect(),
    })
}

fn column_var(m: &DMatrix<f64>, i: usize) -> f64 {
    let col = m.column(i);
    let n = col.len();
    if n < 2 {
        return 0.0;
    }
    let mu = col.mean();
    col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1) as f64
}

pub(crate) fn components_from_draws(draws: &SystematicDraws) -> Vec<VarianceComponents> {
    let noise = draws.sigma.iter().map(|s| s * s).sum::<f64>() / draws.sigma.len() as f64;
    (0..draws.mean.ncols())
        .map(|i| VarianceComponents {
            ensemble: column_var(&draws.combined, i),
            residual: column_var(&draws.residual, i),
            noise,
        })
        .collect()
}

pub fn decompose_uncertainty(
    post: &EnsemblePosterior,
    bases: &BaseModelSet,
    x: &Points,
    count: usize,
    seed: u64,
) -> Result<Vec<VarianceComponents>> {
    Ok(components_from_draws(&systematic_draws(post, bases, x, count, seed)?))
}

/// Gaussian-mixture CDF and PDF at each location from mean/σ draws.
pub fn mixture_cdf_pdf(
    means: &DMatrix<f64>,
    sigma: &[f64],
    y_grid: &[f64],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (count, n) = means.shape();
    let m = y_grid.len();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut c = vec![0.0; m];
            let mut p = vec![0.0; m];
            for d in 0..count {
                let mu = means[(d, i)];
                let s = sigma[d];
                for (j, &y) in y_grid.iter().enumerate() {
                    let z = (y - mu) / s;
                    c[j] += norm_cdf(z);
                    p[j] += norm_pdf(z) / s;
                }
            }
            let inv = 1.0 / count as f64;
            c.iter_mut().for_each(|v| *v *= inv);
            p.iter_mut().for_each(|v| *v *= inv);
            // Floating-point summation can break monotonicity in the last ulp.
            for j in 1..m {
                if c[j] < c[j - 1] {
                    c[j] = c[j - 1];
                }
            }
            (c, p)
        })
        .collect();
    let mut cdf = DMatrix::zeros(n, m);
    let mut pdf = DMatrix::zeros(n, m);
    for (i, (c, p)) in rows.into_iter().enumerate() {
        for j in 0..m {
            cdf[(i, j)] = c[j].clamp(0.0, 1.0);
            pdf[(i, j)] = p[j];
        }
    }
    (cdf, pdf)
}

/// Uncalibrated predictive distribution `F₀(y | x)` by Monte Carlo over the posterior.
pub fn systematic_cdf(
    post: &EnsemblePosterior,
    bases: &BaseModelSet,
    x: &Points,
    y_grid: &[f64],
    count: usize,
    seed: u64,
) -> Result<PredictiveDistribution> {
    if count < 16 {
        return Err(Error::config(format!("systematic_cdf needs at least 16 draws, got {count}")));
    }
    check_grid(y_grid)?;
    let draws = systematic_draws(post, bases, x, count, seed)?;
    let (cdf, pdf) = mixture_cdf_pdf(&draws.mean, &draws.sigma, y_grid);
    let mean = (0..x.len()).map(|i| draws.mean.column(i).mean()).collect();
    Ok(PredictiveDistribution {
        y_grid: y_grid.to_vec(),
        cdf,
        pdf,
        mean,
        variance_components: components_from_draws(&draws),
    })
}
