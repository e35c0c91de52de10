//! Composite-divergence estimators, the variational objective, its stochastic
//! optimization, empirical-Bayes kernel selection and the two-step fit.
//!
//! Inside the optimizer the outcome is standardized by the mean and standard
//! deviation of the training targets (an affine change the ensemble is
//! equivariant to, since the weights sum to one). Weight-GP and residual-GP
//! means are optimized in whitened coordinates `m = L_mm⁻ᵀ m̃`; the
//! covariance parameters `S` through their Cholesky factors. Expectations over
//! the residual process and the lognormal noise are analytic, those over the
//! weight GPs and the temperature use reparameterized Monte Carlo.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{apply_link, fit_link, LinkConfig, LinkData, LinkMean, LinkPosterior};
use crate::ensemble::{
    check_grid, components_from_draws, mixture_cdf_pdf, softmax_in_place, systematic_draws, BaseModelSet, EnsemblePosterior,
    PredictiveDistribution, SystematicDraws,
};
use crate::error::{Error, Result};
use crate::gp::{dgp_kl, dgp_marginal_diag, place_inducing, DgpFactor, LogNormalFactor, SgpFactor};
use crate::kernels::{cholesky_with_jitter, cross_matrix, gram, gram_values, KernelFamily, KernelSpec};
use crate::optim::{geometric_decay, Adam};
use crate::points::Points;
use crate::seeds::derive_seed;
use crate::stats::{mean, norm_cdf, norm_pdf, sample_sd, LN_2PI};

const DENSITY_FLOOR: f64 = 1e-300;
const VAR_FLOOR: f64 = 1e-10;
const MAX_BAD_STEPS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMode {
    KlOnly,
    KlPlusCvm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridPolicy {
    EvenSpan,
    EmpiricalQuantiles,
}

/// Evaluation points `{y_j}` for the CvM term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceGrid {
    pub y_grid: Vec<f64>,
    pub policy: GridPolicy,
}

impl DivergenceGrid {
    pub fn build(y: &[f64], points: usize, policy: GridPolicy) -> Result<Self> {
        if points < 8 {
            return Err(Error::config(format!("divergence grid needs M >= 8, got {points}")));
        }
        if y.is_empty() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("divergence grid needs finite targets"));
        }
        let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = if hi > lo { hi - lo } else { 1.0 };
        let (a, b) = (lo - 0.1 * range, hi + 0.1 * range);
        let y_grid = match policy {
            GridPolicy::EvenSpan => linspace(a, b, points),
            GridPolicy::EmpiricalQuantiles => {
                let mut sorted = y.to_vec();
                sorted.sort_by(f64::total_cmp);
                let mut g: Vec<f64> = (0..points)
                    .map(|j| {
                        if j == 0 {
                            a
                        } else if j == points - 1 {
                            b
                        } else {
                            quantile_sorted(&sorted, j as f64 / (points - 1) as f64)
                        }
                    })
                    .collect();
                for j in 1..g.len() {
                    if g[j] <= g[j - 1] {
                        g[j] = g[j - 1] + 1e-9 * range;
                    }
                }
                g
            }
        };
        Ok(Self { y_grid, policy })
    }

    pub fn len(&self) -> usize {
        self.y_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_grid.is_empty()
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|j| a + (b - a) * j as f64 / (n - 1) as f64).collect()
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Candidate length-scales for empirical Bayes, one list per kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EbGrid {
    pub mu_length_scales: Vec<f64>,
    pub eps_length_scales: Vec<f64>,
    pub iterations: usize,
    /// Monte Carlo samples of the common-random-number objective used to rank candidates.
    pub score_samples: usize,
}

impl Default for EbGrid {
    fn default() -> Self {
        Self {
            mu_length_scales: log_spaced(0.005, 1.0, 8),
            eps_length_scales: log_spaced(0.005, 1.0, 8),
            iterations: 200,
            score_samples: 64,
        }
    }
}

pub fn log_spaced(a: f64, b: f64, n: usize) -> Vec<f64> {
    linspace(a.ln(), b.ln(), n).into_iter().map(f64::exp).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub mc_samples: usize,
    pub seed: u64,
    pub mean_inducing: usize,
    pub cov_inducing: usize,
    pub grid_policy: GridPolicy,
    pub grid_points: usize,
    /// `kl_plus_cvm` runs the calibration step; `kl_only` keeps the identity link.
    pub mode: DivergenceMode,
    /// Objective of the ensemble step. The two-step fit uses `kl_only` so that the
    /// ensemble step sees only `−log f₀`.
    pub ensemble_mode: DivergenceMode,
    pub calibrate: bool,
    /// Folds used to cross-fit `F₀` for the calibration step; `0` uses the
    /// in-sample `F₀` of the full fit.
    pub calibration_folds: usize,
    /// Repeat the empirical-Bayes kernel search inside every calibration
    /// fold, so the held-out rows never influence their own `F₀`.
    pub calibration_refit_eb: bool,
    pub kernel_mu: KernelSpec,
    pub kernel_eps: KernelSpec,
    pub empirical_bayes: Option<EbGrid>,
    pub link: LinkConfig,
    pub cdf_draws: usize,
    pub prediction_grid_points: usize,
    pub temperature_prior: LogNormalFactor,
    pub noise_prior_scale: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            iterations: 2000,
            mc_samples: 16,
            seed: 0,
            mean_inducing: 64,
            cov_inducing: 16,
            grid_policy: GridPolicy::EvenSpan,
            grid_points: 30,
            mode: DivergenceMode::KlPlusCvm,
            ensemble_mode: DivergenceMode::KlOnly,
            calibrate: true,
            calibration_folds: 5,
            calibration_refit_eb: true,
            kernel_mu: KernelSpec::rbf(0.1),
            kernel_eps: KernelSpec { family: KernelFamily::Rbf, length_scale: 0.1, variance: 0.25 },
            empirical_bayes: Some(EbGrid::default()),
            link: LinkConfig::default(),
            cdf_draws: crate::ensemble::DEFAULT_CDF_DRAWS,
            prediction_grid_points: 256,
            temperature_prior: LogNormalFactor { location: 0.0, scale: 1.0 },
            noise_prior_scale: 1.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.mc_samples == 0 || self.mean_inducing == 0 || self.cov_inducing == 0 {
            return Err(Error::config("mc_samples and inducing counts must be >= 1"));
        }
        if self.mean_inducing < self.cov_inducing {
            return Err(Error::config("mean_inducing must be >= cov_inducing"));
        }
        if self.grid_points < 8 || self.prediction_grid_points < 3 {
            return Err(Error::config("grid_points must be >= 8 and prediction_grid_points >= 3"));
        }
        if self.cdf_draws < 16 {
            return Err(Error::config("cdf_draws must be >= 16"));
        }
        if !(self.noise_prior_scale > 0.0) || !(self.temperature_prior.scale > 0.0) {
            return Err(Error::config("prior scales must be positive"));
        }
        KernelSpec::new(self.kernel_mu.family, self.kernel_mu.length_scale, self.kernel_mu.variance)?;
        KernelSpec::new(self.kernel_eps.family, self.kernel_eps.length_scale, self.kernel_eps.variance)?;
        if let Some(eb) = &self.empirical_bayes {
            if eb.mu_length_scales.is_empty() || eb.eps_length_scales.is_empty() {
                return Err(Error::config("empirical-Bayes grids must be nonempty"));
            }
            if eb.mu_length_scales.iter().chain(&eb.eps_length_scales).any(|l| !(*l > 0.0)) {
                return Err(Error::config("empirical-Bayes length-scales must be positive"));
            }
            if eb.score_samples == 0 {
                return Err(Error::config("score_samples must be >= 1"));
            }
        }
        self.link.validate()
    }
}

/// Observations paired with base-model predictions at the same locations.
#[derive(Clone, Debug)]
pub struct EnsembleData {
    pub x: Points,
    pub y: Vec<f64>,
    pub bases: BaseModelSet,
}

impl EnsembleData {
    pub fn new(x: Points, y: Vec<f64>, bases: BaseModelSet) -> Result<Self> {
        if x.len() != y.len() || bases.n() != y.len() {
            return Err(Error::input(format!(
                "data misaligned: {} inputs, {} targets, {} base columns",
                x.len(),
                y.len(),
                bases.n()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("targets must be finite"));
        }
        Ok(Self { x, y, bases })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            bases: self.bases.select_columns(idx),
        }
    }
}

// ---------------------------------------------------------------------------
// Divergence estimators

/// `−ln f(y)` with the density floored at `1e−300`.
pub fn kl_hat_density(density: f64) -> f64 {
    -density.max(DENSITY_FLOOR).ln()
}

/// `−ln f(y | x, G, Θ)` for a conditional Gaussian systematic density with mean
/// `mean` and sd `sigma`, passed through the link (`None` is the identity).
pub fn kl_hat(y: f64, mean: f64, sigma: f64, link: Option<&LinkMean>) -> f64 {
    let t = (y - mean) / sigma;
    let f0 = norm_pdf(t) / sigma;
    let g = link.map_or(1.0, |l| l.derivative(norm_cdf(t)).max(0.0));
    kl_hat_density(g * f0)
}

/// `(1/M) Σ_j (F(y_j) − 𝕀(y < y_j))²`.
pub fn cvm_hat(y: f64, cdf_at_grid: &[f64], grid: &[f64]) -> Result<f64> {
    if cdf_at_grid.len() != grid.len() || grid.is_empty() {
        return Err(Error::input("cdf and grid lengths differ"));
    }
    let s: f64 = cdf_at_grid
        .iter()
        .zip(grid)
        .map(|(&f, &yj)| {
            let ind = if y < yj { 1.0 } else { 0.0 };
            (f.clamp(0.0, 1.0) - ind).powi(2)
        })
        .sum();
    Ok(s / grid.len() as f64)
}

/// KL-hat plus, under `KlPlusCvm`, CvM-hat for one observation and one draw of `Θ`.
pub fn composite_divergence(
    y: f64,
    mean: f64,
    sigma: f64,
    link: Option<&LinkMean>,
    grid: &[f64],
    mode: DivergenceMode,
) -> Result<f64> {
    let kl = kl_hat(y, mean, sigma, link);
    match mode {
        DivergenceMode::KlOnly => Ok(kl),
        DivergenceMode::KlPlusCvm => {
            let cdf: Vec<f64> = grid
                .iter()
                .map(|&yj| {
                    let p = norm_cdf((yj - mean) / sigma);
                    link.map_or(p, |l| l.value(p).clamp(0.0, 1.0))
                })
                .collect();
            Ok(kl + cvm_hat(y, &cdf, grid)?)
        }
    }
}

/// Monte Carlo estimate of `Σ_i E_Q[divergence_i] + KL(Q ‖ P)` in standardized
/// outcome units, sampling every latent quantity directly.
pub fn vi_objective(
    data: &EnsembleData,
    post: &EnsemblePosterior,
    grid: &DivergenceGrid,
    mode: DivergenceMode,
    link: Option<&LinkMean>,
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    if mc_samples == 0 {
        return Err(Error::config("mc_samples must be >= 1"));
    }
    if post.k() != data.bases.k() {
        return Err(Error::input("posterior and bases disagree on K"));
    }
    let n = data.n();
    let k = post.k();
    let fstd = post.standardize_bases(&data.bases);
    let ystd: Vec<f64> = data.y.iter().map(|v| (v - post.y_shift) / post.y_scale).collect();
    let gstd: Vec<f64> = grid.y_grid.iter().map(|v| (v - post.y_shift) / post.y_scale).collect();
    let weight_marg: Vec<(Vec<f64>, Vec<f64>)> =
        post.weight_gps.iter().map(|f| dgp_marginal_diag(f, &data.x)).collect::<Result<_>>()?;
    let (eps_mu, eps_var) = dgp_marginal_diag(&post.residual_gp, &data.x)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut u = vec![0.0; k];
    for _ in 0..mc_samples {
        let lam = (post.temperature.location + post.temperature.scale * normal(&mut rng)).exp();
        let sig = (post.noise_sd.location + post.noise_sd.scale * normal(&mut rng)).exp();
        for i in 0..n {
            for (kk, (mu, var)) in weight_marg.iter().enumerate() {
                u[kk] = mu[i] + var[i].sqrt() * normal(&mut rng);
            }
            softmax_in_place(&mut u, lam);
            let c: f64 = (0..k).map(|kk| u[kk] * fstd[(kk, i)]).sum();
            let eps = eps_mu[i] + eps_var[i].sqrt() * normal(&mut rng);
            total += composite_divergence(ystd[i], c + eps, sig, link, &gstd, mode)?;
        }
    }
    let expected = total / mc_samples as f64;
    if !expected.is_finite() {
        return Err(Error::Inference("expected divergence term is non-finite".into()));
    }
    let kl = posterior_kl(post)?;
    if !kl.is_finite() {
        return Err(Error::Inference("KL(Q ‖ P) term is non-finite".into()));
    }
    Ok(expected + kl)
}

fn posterior_kl(post: &EnsemblePosterior) -> Result<f64> {
    let mut kl = dgp_kl(&post.residual_gp)?;
    for f in &post.weight_gps {
        kl += dgp_kl(f)?;
    }
    Ok(kl + post.temperature.kl_to(&post.temperature_prior) + post.noise_sd.kl_to(&post.noise_prior))
}

#[inline]
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

// ---------------------------------------------------------------------------
// Ensemble-step optimizer

/// Kernel quantities for one GP family at the training inputs.
struct GpBlock {
    kernel: KernelSpec,
    /// `K_XZm L_mm⁻ᵀ`, `N × M_m`.
    whiten: DMatrix<f64>,
    chol_mm: DMatrix<f64>,
    kss: DMatrix<f64>,
    /// `K_ZsX`, `M_s × N`.
    ksx: DMatrix<f64>,
}

impl GpBlock {
    fn new(kernel: KernelSpec, x: &Points, zm: &Points, zs: &Points) -> Result<Self> {
        let gmm = gram(&kernel, zm, 0.0)?;
        let chol_mm = gmm.lower();
        let kxm = cross_matrix(&kernel, x, zm);
        // (L⁻¹ K_ZmX)ᵀ
        let whiten = chol_mm
            .solve_lower_triangular(&kxm.transpose())
            .ok_or_else(|| Error::Numerical { message: "whitening solve failed".into(), jitter: gmm.jitter_applied })?
            .transpose();
        Ok(Self { kernel, whiten, chol_mm, kss: gram_values(&kernel, zs), ksx: cross_matrix(&kernel, zs, x) })
    }
}

struct GpState {
    mean: DVector<f64>,
    var: Vec<f64>,
    w: DMatrix<f64>,
    l: DMatrix<f64>,
    p_inv: DMatrix<f64>,
    kl: f64,
}

fn lower_from_params(params: &[f64], m: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(m, m);
    let mut idx = 0;
    for i in 0..m {
        for j in 0..=i {
            l[(i, j)] = if i == j { params[idx].exp() } else { params[idx] };
            idx += 1;
        }
    }
    l
}

fn params_from_lower(l: &DMatrix<f64>, out: &mut [f64]) {
    let mut idx = 0;
    for i in 0..l.nrows() {
        for j in 0..=i {
            out[idx] = if i == j { l[(i, i)].ln() } else { l[(i, j)] };
            idx += 1;
        }
    }
}

fn eval_gp(block: &GpBlock, mt: &[f64], lp: &[f64]) -> Result<GpState> {
    let ms = block.kss.nrows();
    let mtv = DVector::from_column_slice(mt);
    let l = lower_from_params(lp, ms);
    let s = &l * l.transpose();
    let p = &block.kss + &s;
    let (chol, _) = cholesky_with_jitter(&p, 0.0, block.kernel.variance)?;
    let w = chol.solve(&block.ksx);
    let var: Vec<f64> = (0..block.ksx.ncols())
        .map(|i| (block.kernel.variance - block.ksx.column(i).dot(&w.column(i))).max(0.0))
        .collect();
    let p_inv = chol.inverse();
    let lp_ = chol.l_dirty();
    let logdet_p: f64 = 2.0 * (0..ms).map(|i| lp_[(i, i)].ln()).sum::<f64>();
    let logdet_s: f64 = 2.0 * (0..ms).map(|i| l[(i, i)].ln()).sum::<f64>();
    let trace: f64 = p_inv.component_mul(&block.kss).sum();
    let kl = 0.5 * mtv.norm_squared() + 0.5 * (logdet_p - logdet_s - trace);
    Ok(GpState { mean: &block.whiten * &mtv, var, w, l, p_inv, kl })
}

/// Adds the gradient of `loss(μ, var) + KL` with respect to `(m̃, L)` given `∂loss/∂μ` and `∂loss/∂var`.
fn grad_gp(block: &GpBlock, st: &GpState, mt: &[f64], g_mu: &DVector<f64>, g_var: &[f64], out_m: &mut [f64], out_l: &mut [f64]) {
    let gm = block.whiten.tr_mul(g_mu) + DVector::from_column_slice(mt);
    out_m.copy_from_slice(gm.as_slice());
    let ms = st.l.nrows();
    let mut gs = DMatrix::zeros(ms, ms);
    let mut scaled = st.w.clone();
    for (i, mut col) in scaled.column_iter_mut().enumerate() {
        col *= g_var[i];
    }
    gs.gemm(1.0, &scaled, &st.w.transpose(), 0.0);
    let s_inv = {
        let li = st.l.solve_lower_triangular(&DMatrix::identity(ms, ms)).expect("positive diagonal");
        li.transpose() * li
    };
    let pkp = &st.p_inv * &block.kss * &st.p_inv;
    gs += 0.5 * (&st.p_inv - s_inv + pkp);
    let gl = 2.0 * gs * &st.l;
    let mut idx = 0;
    for i in 0..ms {
        for j in 0..=i {
            out_l[idx] = if i == j { gl[(i, i)] * st.l[(i, i)] } else { gl[(i, j)] };
            idx += 1;
        }
    }
}

#[derive(Clone, Copy)]
struct Layout {
    k: usize,
    mm: usize,
    ms: usize,
}

impl Layout {
    fn tri(&self) -> usize {
        self.ms * (self.ms + 1) / 2
    }
    fn per_gp(&self) -> usize {
        self.mm + self.tri()
    }
    /// GP `g` (0..K weight GPs, K the residual): mean and covariance slices.
    fn gp(&self, g: usize) -> (usize, usize) {
        let o = g * self.per_gp();
        (o, o + self.mm)
    }
    fn scalars(&self) -> usize {
        (self.k + 1) * self.per_gp()
    }
    fn dim(&self) -> usize {
        self.scalars() + 4
    }
}

/// The ensemble-step problem in standardized units.
struct EnsembleProblem {
    layout: Layout,
    n: usize,
    fstd: DMatrix<f64>,
    ystd: Vec<f64>,
    grid_std: Vec<f64>,
    mu: GpBlock,
    eps: GpBlock,
    zm: Points,
    zs: Points,
    temperature_prior: LogNormalFactor,
    noise_prior: LogNormalFactor,
    y_shift: f64,
    y_scale: f64,
}

struct Evaluation {
    value: f64,
    grad: Vec<f64>,
}

impl EnsembleProblem {
    fn new(data: &EnsembleData, kernel_mu: KernelSpec, kernel_eps: KernelSpec, grid: &DivergenceGrid, cfg: &FitConfig) -> Result<Self> {
        let n = data.n();
        if n < 5 {
            return Err(Error::input(format!("the ensemble fit needs at least 5 observations, got {n}")));
        }
        let y_shift = mean(&data.y);
        let sd = sample_sd(&data.y);
        let y_scale = if sd > 0.0 { sd } else { 1.0 };
        let fstd = data.bases.predictions.map(|v| (v - y_shift) / y_scale);
        let ystd: Vec<f64> = data.y.iter().map(|v| (v - y_shift) / y_scale).collect();
        let avg_resid: Vec<f64> = (0..n).map(|i| ystd[i] - fstd.column(i).mean()).collect();
        let resid_sd = (avg_resid.iter().map(|r| r * r).sum::<f64>() / n as f64).sqrt().max(1e-3);
        let zm = place_inducing(&data.x, cfg.mean_inducing.min(n));
        let zs = place_inducing(&data.x, cfg.cov_inducing.min(n).min(zm.len()));
        Ok(Self {
            layout: Layout { k: data.bases.k(), mm: zm.len(), ms: zs.len() },
            n,
            ystd,
            grid_std: grid.y_grid.iter().map(|v| (v - y_shift) / y_scale).collect(),
            mu: GpBlock::new(kernel_mu, &data.x, &zm, &zs)?,
            eps: GpBlock::new(kernel_eps, &data.x, &zm, &zs)?,
            fstd,
            zm,
            zs,
            temperature_prior: cfg.temperature_prior,
            noise_prior: LogNormalFactor::new(resid_sd.ln(), cfg.noise_prior_scale)?,
            y_shift,
            y_scale,
        })
    }

    fn initial(&self) -> Vec<f64> {
        let lay = self.layout;
        let mut p = vec![0.0; lay.dim()];
        for g in 0..=lay.k {
            let block = if g < lay.k { &self.mu } else { &self.eps };
            let (_, lo) = lay.gp(g);
            let l0 = DMatrix::identity(lay.ms, lay.ms) * block.kernel.variance.sqrt();
            params_from_lower(&l0, &mut p[lo..lo + lay.tri()]);
        }
        let s = lay.scalars();
        p[s] = self.temperature_prior.location;
        p[s + 1] = 0.1f64.ln();
        p[s + 2] = self.noise_prior.location;
        p[s + 3] = 0.1f64.ln();
        p
    }

    /// Objective estimate and gradient from `samples` draws of `(g, λ)` (and of
    /// `(ε, σ)` for the CvM term).
    fn evaluate(&self, params: &[f64], mode: DivergenceMode, samples: usize, seed: u64, want_grad: bool) -> Result<Evaluation> {
        let lay = self.layout;
        let (n, k) = (self.n, lay.k);
        let states: Vec<GpState> = (0..=k)
            .map(|g| {
                let (mo, lo) = lay.gp(g);
                let block = if g < k { &self.mu } else { &self.eps };
                eval_gp(block, &params[mo..mo + lay.mm], &params[lo..lo + lay.tri()])
            })
            .collect::<Result<_>>()?;
        let s = lay.scalars();
        let (a_l, b_l) = (params[s], params[s + 1].exp());
        let (a_s, b_s) = (params[s + 2], params[s + 3].exp());
        let tau = (-2.0 * a_s + 2.0 * b_s * b_s).exp();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inv_s = 1.0 / samples as f64;
        let mut g_mu: Vec<DVector<f64>> = vec![DVector::zeros(n); k + 1];
        let mut g_var: Vec<Vec<f64>> = vec![vec![0.0; n]; k + 1];
        let (mut g_al, mut g_bl, mut g_as, mut g_bs) = (0.0, 0.0, 0.0, 0.0);
        let mut loss = 0.0;
        let eps_st = &states[k];
        let mut u = vec![0.0; k];
        let mut z = vec![0.0; k];
        let mg = self.grid_std.len() as f64;

        for _ in 0..samples {
            let zeta: f64 = normal(&mut rng);
            let lam = (a_l + b_l * zeta).exp();
            let (zeta_s, ze): (f64, Vec<f64>) = if mode == DivergenceMode::KlPlusCvm {
                (normal(&mut rng), (0..n).map(|_| normal(&mut rng)).collect())
            } else {
                (0.0, Vec::new())
            };
            let sig = (a_s + b_s * zeta_s).exp();
            let mut dlam = 0.0;
            let mut dsig = 0.0;
            for i in 0..n {
                for kk in 0..k {
                    z[kk] = normal(&mut rng);
                    let sd = (states[kk].var[i] + VAR_FLOOR).sqrt();
                    u[kk] = (states[kk].mean[i] + sd * z[kk]) / lam;
                }
                let raw_u = u.clone();
                softmax_in_place(&mut u, 1.0);
                let c: f64 = (0..k).map(|kk| u[kk] * self.fstd[(kk, i)]).sum();
                let r = self.ystd[i] - c - eps_st.mean[i];
                let e2 = r * r + eps_st.var[i];
                loss += inv_s * (0.5 * LN_2PI + a_s + 0.5 * tau * e2);
                let mut dc = -tau * r;
                if want_grad {
                    g_mu[k][i] += inv_s * (-tau * r);
                    g_var[k][i] += inv_s * 0.5 * tau;
                    g_as += inv_s * (1.0 - tau * e2);
                    g_bs += inv_s * 2.0 * b_s * tau * e2 * b_s;
                }
                if mode == DivergenceMode::KlPlusCvm {
                    let sd_e = (eps_st.var[i] + VAR_FLOOR).sqrt();
                    let m = c + eps_st.mean[i] + sd_e * ze[i];
                    let (mut dm, mut ds) = (0.0, 0.0);
                    for &yj in &self.grid_std {
                        let t = (yj - m) / sig;
                        let ind = if self.ystd[i] < yj { 1.0 } else { 0.0 };
                        let diff = norm_cdf(t) - ind;
                        loss += inv_s * diff * diff / mg;
                        let dt = 2.0 * diff * norm_pdf(t) / mg;
                        dm += -dt / sig;
                        ds += -dt * t / sig;
                    }
                    if want_grad {
                        dc += dm;
                        g_mu[k][i] += inv_s * dm;
                        g_var[k][i] += inv_s * dm * ze[i] / (2.0 * sd_e);
                        dsig += ds;
                    }
                }
                if want_grad {
                    for kk in 0..k {
                        let du = dc * u[kk] * (self.fstd[(kk, i)] - c);
                        let sd = (states[kk].var[i] + VAR_FLOOR).sqrt();
                        g_mu[kk][i] += inv_s * du / lam;
                        g_var[kk][i] += inv_s * du * z[kk] / lam / (2.0 * sd);
                        dlam += du * (-raw_u[kk] / lam);
                    }
                }
            }
            if want_grad {
                g_al += inv_s * dlam * lam;
                g_bl += inv_s * dlam * lam * zeta * b_l;
                g_as += inv_s * dsig * sig;
                g_bs += inv_s * dsig * sig * zeta_s * b_s;
            }
        }

        let q_l = LogNormalFactor { location: a_l, scale: b_l };
        let q_s = LogNormalFactor { location: a_s, scale: b_s };
        let kl_scalars = q_l.kl_to(&self.temperature_prior) + q_s.kl_to(&self.noise_prior);
        let value = loss + states.iter().map(|st| st.kl).sum::<f64>() + kl_scalars;

        let mut grad = Vec::new();
        if want_grad {
            grad = vec![0.0; lay.dim()];
            for g in 0..=k {
                let (mo, lo) = lay.gp(g);
                let block = if g < k { &self.mu } else { &self.eps };
                let (gm_slice, rest) = grad[mo..].split_at_mut(lay.mm);
                grad_gp(block, &states[g], &params[mo..mo + lay.mm], &g_mu[g], &g_var[g], gm_slice, &mut rest[..lay.tri()]);
                debug_assert_eq!(lo, mo + lay.mm);
            }
            let (p0l, p0s) = (self.temperature_prior, self.noise_prior);
            grad[s] = g_al + (a_l - p0l.location) / (p0l.scale * p0l.scale);
            grad[s + 1] = g_bl - 1.0 + b_l * b_l / (p0l.scale * p0l.scale);
            grad[s + 2] = g_as + (a_s - p0s.location) / (p0s.scale * p0s.scale);
            grad[s + 3] = g_bs - 1.0 + b_s * b_s / (p0s.scale * p0s.scale);
        }
        Ok(Evaluation { value, grad })
    }

    fn to_posterior(&self, params: &[f64]) -> Result<EnsemblePosterior> {
        let lay = self.layout;
        let build = |g: usize| -> Result<DgpFactor> {
            let (mo, lo) = lay.gp(g);
            let block = if g < lay.k { &self.mu } else { &self.eps };
            let mt = DVector::from_column_slice(&params[mo..mo + lay.mm]);
            let m = block
                .chol_mm
                .transpose()
                .solve_upper_triangular(&mt)
                .ok_or_else(|| Error::Numerical { message: "unwhitening failed".into(), jitter: 0.0 })?;
            let l = lower_from_params(&params[lo..lo + lay.tri()], lay.ms);
            DgpFactor::new(self.zm.clone(), m, self.zs.clone(), l, block.kernel)
        };
        let s = lay.scalars();
        Ok(EnsemblePosterior {
            weight_gps: (0..lay.k).map(build).collect::<Result<_>>()?,
            residual_gp: build(lay.k)?,
            temperature: LogNormalFactor::new(params[s], params[s + 1].exp())?,
            noise_sd: LogNormalFactor::new(params[s + 2], params[s + 3].exp())?,
            kernel_mu: self.mu.kernel,
            kernel_eps: self.eps.kernel,
            temperature_prior: self.temperature_prior,
            noise_prior: self.noise_prior,
            y_shift: self.y_shift,
            y_scale: self.y_scale,
        })
    }
}

/// Result of one variational optimization.
#[derive(Clone, Debug)]
pub struct VariationalFit {
    pub posterior: EnsemblePosterior,
    /// Per-iteration Monte Carlo objective estimates.
    pub trace: Vec<f64>,
    /// Common-random-number objective at the initial and final parameters.
    pub initial_objective: f64,
    pub final_objective: f64,
}

struct RawFit {
    params: Vec<f64>,
    trace: Vec<f64>,
    initial_objective: f64,
    final_objective: f64,
}

fn run_optimizer(problem: &EnsembleProblem, mode: DivergenceMode, cfg: &FitConfig, iterations: usize, score_samples: usize) -> Result<RawFit> {
    let mut params = problem.initial();
    let score_seed = derive_seed(cfg.seed, 0xC0FFEE);
    let initial_objective = problem.evaluate(&params, mode, score_samples, score_seed, false)?.value;
    let mut opt = Adam::new(params.len(), cfg.learning_rate);
    let mut trace = Vec::with_capacity(iterations);
    let mut bad = 0;
    for t in 0..iterations {
        let step_seed = derive_seed(cfg.seed, t as u64 + 1);
        let ev = match problem.evaluate(&params, mode, cfg.mc_samples, step_seed, true) {
            Ok(ev) => ev,
            Err(Error::Numerical { .. }) => Evaluation { value: f64::NAN, grad: Vec::new() },
            Err(e) => return Err(e),
        };
        trace.push(ev.value);
        if !ev.value.is_finite() || ev.grad.iter().any(|g| !g.is_finite()) {
            bad += 1;
            if bad >= MAX_BAD_STEPS {
                return Err(Error::Inference(format!(
                    "objective non-finite for {MAX_BAD_STEPS} consecutive steps (last at iteration {t})"
                )));
            }
            continue;
        }
        bad = 0;
        opt.step(&mut params, &ev.grad, geometric_decay(t, iterations, 0.1));
    }
    let final_objective = problem.evaluate(&params, mode, score_samples, score_seed, false)?.value;
    Ok(RawFit { params, trace, initial_objective, final_objective })
}

/// Stochastic-gradient minimization of the variational objective for fixed kernels.
pub fn optimize_vi(data: &EnsembleData, grid: &DivergenceGrid, cfg: &FitConfig) -> Result<VariationalFit> {
    cfg.validate()?;
    let problem = EnsembleProblem::new(data, cfg.kernel_mu, cfg.kernel_eps, grid, cfg)?;
    let raw = run_optimizer(&problem, cfg.ensemble_mode, cfg, cfg.iterations, 64)?;
    Ok(VariationalFit {
        posterior: problem.to_posterior(&raw.params)?,
        trace: raw.trace,
        initial_objective: raw.initial_objective,
        final_objective: raw.final_objective,
    })
}

/// Selected kernels and the score of every candidate `(l_μ, l_ε, objective)`.
#[derive(Clone, Debug)]
pub struct EbSelection {
    pub kernel_mu: KernelSpec,
    pub kernel_eps: KernelSpec,
    pub scores: Vec<(f64, f64, f64)>,
}

/// Short optimization per candidate pair; the smallest final objective wins,
/// ties going to the larger length-scales.
pub fn empirical_bayes_select(data: &EnsembleData, grid: &DivergenceGrid, cfg: &FitConfig, eb: &EbGrid) -> Result<EbSelection> {
    if eb.mu_length_scales.is_empty() || eb.eps_length_scales.is_empty() {
        return Err(Error::config("empirical-Bayes grid is empty"));
    }
    // With a single base model the weights are constant and l_μ cannot matter.
    let mu_grid: Vec<f64> = if data.bases.k() == 1 {
        vec![eb.mu_length_scales.iter().copied().fold(f64::NEG_INFINITY, f64::max)]
    } else {
        eb.mu_length_scales.clone()
    };
    let pairs: Vec<(f64, f64)> =
        mu_grid.iter().flat_map(|&a| eb.eps_length_scales.iter().map(move |&b| (a, b))).collect();
    let scores: Vec<(f64, f64, f64)> = pairs
        .par_iter()
        .map(|&(lm, le)| {
            let km = KernelSpec { length_scale: lm, ..cfg.kernel_mu };
            let ke = KernelSpec { length_scale: le, ..cfg.kernel_eps };
            let obj = EnsembleProblem::new(data, km, ke, grid, cfg)
                .and_then(|p| run_optimizer(&p, cfg.ensemble_mode, cfg, eb.iterations, eb.score_samples))
                .map(|r| r.final_objective)
                .unwrap_or(f64::NAN);
            (lm, le, obj)
        })
        .collect();
    let mut best: Option<(f64, f64, f64)> = None;
    for &(lm, le, obj) in &scores {
        if !obj.is_finite() {
            continue;
        }
        best = match best {
            None => Some((lm, le, obj)),
            Some((bm, be, bo)) => {
                if obj < bo || (obj == bo && (le, lm) > (be, bm)) {
                    Some((lm, le, obj))
                } else {
                    Some((bm, be, bo))
                }
            }
        };
    }
    let (lm, le, _) = best.ok_or_else(|| Error::Inference("every empirical-Bayes candidate failed".into()))?;
    Ok(EbSelection {
        kernel_mu: KernelSpec { length_scale: lm, ..cfg.kernel_mu },
        kernel_eps: KernelSpec { length_scale: le, ..cfg.kernel_eps },
        scores,
    })
}

// ---------------------------------------------------------------------------
// Two-step fit and prediction

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GibbsFit {
    pub posterior: EnsemblePosterior,
    pub link: LinkPosterior,
    pub grid: DivergenceGrid,
    /// `F₀` and `G[F₀]` at the training locations on the divergence grid.
    pub uncalibrated: PredictiveDistribution,
    pub calibrated: PredictiveDistribution,
    pub trace: Vec<f64>,
}

/// Result of the ensemble step: the posterior, the configuration it was fitted
/// with (after empirical Bayes) and `F₀` draws at the training locations.
#[derive(Clone, Debug)]
pub struct EnsembleStep {
    pub posterior: EnsemblePosterior,
    pub config: FitConfig,
    pub grid: DivergenceGrid,
    pub draws: SystematicDraws,
    pub uncalibrated: PredictiveDistribution,
    pub trace: Vec<f64>,
}

/// Empirical-Bayes kernel selection (when configured), variational fit and
/// Monte Carlo `F₀` at the training locations.
pub fn ensemble_step(data: &EnsembleData, cfg: &FitConfig) -> Result<EnsembleStep> {
    cfg.validate()?;
    let grid = DivergenceGrid::build(&data.y, cfg.grid_points, cfg.grid_policy)?;
    let mut config = cfg.clone();
    if let Some(eb) = &cfg.empirical_bayes {
        let sel = empirical_bayes_select(data, &grid, cfg, eb)?;
        config.kernel_mu = sel.kernel_mu;
        config.kernel_eps = sel.kernel_eps;
    }
    let fit = optimize_vi(data, &grid, &config)?;
    let draws = systematic_draws(&fit.posterior, &data.bases, &data.x, cfg.cdf_draws, derive_seed(cfg.seed, 0xF0))?;
    let uncalibrated = distribution_from_draws(&draws, &grid.y_grid);
    Ok(EnsembleStep { posterior: fit.posterior, config, grid, draws, uncalibrated, trace: fit.trace })
}

/// Inputs of the calibration step: `F₀` on the divergence grid (cross-fitted
/// when `calibration_folds >= 2`), the indicators `𝕀(yᵢ < tⱼ)` and PIT values.
pub fn calibration_data(data: &EnsembleData, step: &EnsembleStep) -> Result<LinkData> {
    let grid = &step.grid;
    let (cdf, pit) = match cross_fitted_cdf(data, grid, &step.config)? {
        Some(cross) => cross,
        None => (step.uncalibrated.cdf.clone(), pit_from_draws(&step.draws, &data.y)),
    };
    let indicators = DMatrix::from_fn(data.n(), grid.len(), |i, j| if data.y[i] < grid.y_grid[j] { 1.0 } else { 0.0 });
    LinkData::new(cdf.map(|v| v.clamp(0.0, 1.0)), indicators, pit)
}

/// Ensemble step, then the calibration step; a single pass.
pub fn gibbs_fit(data: &EnsembleData, cfg: &FitConfig) -> Result<GibbsFit> {
    let step = ensemble_step(data, cfg)?;
    let link = if cfg.calibrate && cfg.mode == DivergenceMode::KlPlusCvm {
        let link_cfg = LinkConfig { seed: derive_seed(cfg.seed, 0x11), ..cfg.link.clone() };
        fit_link(&calibration_data(data, &step)?, &link_cfg)?
    } else {
        LinkPosterior::identity()
    };
    let calibrated = apply_link(&link, &step.uncalibrated)?;
    Ok(GibbsFit {
        posterior: step.posterior,
        link,
        grid: step.grid,
        uncalibrated: step.uncalibrated,
        calibrated,
        trace: step.trace,
    })
}

/// Out-of-fold `F₀` rows and PIT values: each fold refits the ensemble step on
/// the remaining rows, repeating the kernel search when `calibration_refit_eb`
/// is set. `None` when there are too few rows for the requested folds.
fn cross_fitted_cdf(data: &EnsembleData, grid: &DivergenceGrid, cfg: &FitConfig) -> Result<Option<(DMatrix<f64>, Vec<f64>)>> {
    let folds = cfg.calibration_folds;
    if folds < 2 {
        return Ok(None);
    }
    if data.n() < 2 * folds {
        log::warn!("{} rows are too few for {folds} calibration folds; using in-sample F0", data.n());
        return Ok(None);
    }
    let labels = crate::baselines::fold_assignment(data.n(), folds, derive_seed(cfg.seed, 0xCF))?;
    let per_fold = (0..folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..data.n()).filter(|&i| labels[i] != f).collect();
            let test: Vec<usize> = (0..data.n()).filter(|&i| labels[i] == f).collect();
            let mut fold_cfg = FitConfig { seed: derive_seed(cfg.seed, 0xC0 + f as u64), ..cfg.clone() };
            let fold_data = data.select(&train);
            if let (true, Some(eb)) = (cfg.calibration_refit_eb, &cfg.empirical_bayes) {
                let sel = empirical_bayes_select(&fold_data, grid, &fold_cfg, eb)?;
                fold_cfg.kernel_mu = sel.kernel_mu;
                fold_cfg.kernel_eps = sel.kernel_eps;
            }
            let fit = optimize_vi(&fold_data, grid, &fold_cfg)?;
            let bases = data.bases.select_columns(&test);
            let x = data.x.select(&test);
            let draws = systematic_draws(&fit.posterior, &bases, &x, cfg.cdf_draws, derive_seed(fold_cfg.seed, 0xF0))?;
            let y: Vec<f64> = test.iter().map(|&i| data.y[i]).collect();
            let (cdf, _) = mixture_cdf_pdf(&draws.mean, &draws.sigma, &grid.y_grid);
            Ok((test, cdf, pit_from_draws(&draws, &y)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cdf = DMatrix::zeros(data.n(), grid.len());
    let mut pit = vec![0.0; data.n()];
    for (test, c, p) in per_fold {
        for (r, &i) in test.iter().enumerate() {
            cdf.set_row(i, &c.row(r));
            pit[i] = p[r];
        }
    }
    Ok(Some((cdf, pit)))
}

fn pit_from_draws(draws: &SystematicDraws, y: &[f64]) -> Vec<f64> {
    let count = draws.mean.nrows() as f64;
    y.iter()
        .enumerate()
        .map(|(i, &yi)| {
            let s: f64 =
                draws.sigma.iter().enumerate().map(|(d, &sg)| norm_cdf((yi - draws.mean[(d, i)]) / sg)).sum();
            (s / count).clamp(0.0, 1.0)
        })
        .collect()
}

fn distribution_from_draws(draws: &SystematicDraws, y_grid: &[f64]) -> PredictiveDistribution {
    let (cdf, pdf) = mixture_cdf_pdf(&draws.mean, &draws.sigma, y_grid);
    PredictiveDistribution {
        y_grid: y_grid.to_vec(),
        cdf,
        pdf,
        mean: (0..draws.mean.ncols()).map(|i| draws.mean.column(i).mean()).collect(),
        variance_components: components_from_draws(draws),
    }
}

/// Outcome grid spanning every location's predictive mean ± 6 sd.
pub fn prediction_grid(draws: &SystematicDraws, points: usize) -> Vec<f64> {
    let comps = components_from_draws(draws);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, c) in comps.iter().enumerate() {
        let m = draws.mean.column(i).mean();
        let sd = c.total().sqrt().max(1e-9);
        lo = lo.min(m - 6.0 * sd);
        hi = hi.max(m + 6.0 * sd);
    }
    linspace(lo, hi, points)
}

/// Pre- and post-calibration predictive distributions at new locations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prediction {
    pub uncalibrated: PredictiveDistribution,
    pub calibrated: PredictiveDistribution,
}

/// Predicts at `x` given base predictions there. `y_grid = None` chooses a grid
/// spanning the predictive means ± 6 sd.
pub fn predict(
    fit: &GibbsFit,
    bases: &BaseModelSet,
    x: &Points,
    y_grid: Option<&[f64]>,
    cfg: &FitConfig,
) -> Result<Prediction> {
    let draws = systematic_draws(&fit.posterior, bases, x, cfg.cdf_draws, derive_seed(cfg.seed, 0xF1))?;
    let grid = match y_grid {
        Some(g) => {
            check_grid(g)?;
            g.to_vec()
        }
        None => prediction_grid(&draws, cfg.prediction_grid_points),
    };
    let uncalibrated = distribution_from_draws(&draws, &grid);
    let calibrated = apply_link(&fit.link, &uncalibrated)?;
    Ok(Prediction { uncalibrated, calibrated })
}

// ---------------------------------------------------------------------------
// Sparse-GP Gaussian regression

/// Variational sparse-GP regression with Gaussian noise: maximizes the
/// evidence lower bound over `(m, S)` in whitened coordinates by Adam.
pub fn fit_sgp_regression(
    x: &Points,
    y: &[f64],
    inducing: &Points,
    kernel: KernelSpec,
    noise_sd: f64,
    iterations: usize,
    learning_rate: f64,
) -> Result<(SgpFactor, Vec<f64>)> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::input("x and y must be nonempty and aligned"));
    }
    if !(noise_sd > 0.0) {
        return Err(Error::input("noise_sd must be positive"));
    }
    let g = gram(&kernel, inducing, 0.0)?;
    let lk = g.lower();
    let m = inducing.len();
    let kzx = cross_matrix(&kernel, inducing, x);
    let a = lk.solve_lower_triangular(&kzx).expect("triangular solve"); // M × N
    let ata = &a * a.transpose();
    let yv = DVector::from_column_slice(y);
    let aty = &a * &yv;
    let nyst: f64 = (0..x.len()).map(|i| kernel.variance - a.column(i).norm_squared()).sum();
    let s2 = noise_sd * noise_sd;
    let n = x.len() as f64;
    let tri = m * (m + 1) / 2;
    let mut params = vec![0.0; m + tri];
    params_from_lower(&DMatrix::identity(m, m), &mut params[m..]);
    let eval = |p: &[f64], grad: Option<&mut [f64]>| -> f64 {
        let mt = DVector::from_column_slice(&p[..m]);
        let lt = lower_from_params(&p[m..], m);
        let mu = a.tr_mul(&mt);
        let resid = &yv - &mu;
        let ata_l = &ata * &lt;
        let tr_var: f64 = lt.component_mul(&ata_l).sum();
        let logdet: f64 = (0..m).map(|i| lt[(i, i)].ln()).sum();
        let value = 0.5 * n * (LN_2PI + s2.ln())
            + (resid.norm_squared() + nyst + tr_var) / (2.0 * s2)
            + 0.5 * (lt.norm_squared() + mt.norm_squared() - m as f64)
            - logdet;
        if let Some(out) = grad {
            let gm = (&ata * &mt - &aty) / s2 + &mt;
            let inv_t = lt.solve_lower_triangular(&DMatrix::identity(m, m)).expect("positive diagonal").transpose();
            let gl = ata_l / s2 + &lt - inv_t;
            out[..m].copy_from_slice(gm.as_slice());
            let mut idx = m;
            for i in 0..m {
                for j in 0..=i {
                    out[idx] = if i == j { gl[(i, i)] * lt[(i, i)] } else { gl[(i, j)] };
                    idx += 1;
                }
            }
        }
        value
    };
    let mut opt = Adam::new(params.len(), learning_rate);
    let mut grad = vec![0.0; params.len()];
    let mut trace = Vec::with_capacity(iterations);
    for t in 0..iterations {
        trace.push(eval(&params, Some(&mut grad)));
        opt.step(&mut params, &grad, geometric_decay(t, iterations, 0.01));
    }
    trace.push(eval(&params, None));
    let mt = DVector::from_column_slice(&params[..m]);
    let lt = lower_from_params(&params[m..], m);
    let factor = SgpFactor::new(inducing.clone(), &lk * mt, &lk * lt, kernel)?;
    Ok((factor, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::sgp_marginal;
    use rand::Rng;

    fn toy_data(n: usize, k: usize, seed: u64) -> EnsembleData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let truth: Vec<f64> = xs.iter().map(|x| (6.0 * x).sin()).collect();
        let preds = DMatrix::from_fn(k, n, |kk, i| truth[i] + 0.3 * (kk as f64 - 1.0) * xs[i]);
        let y = truth.iter().map(|t| t + 0.1 * normal(&mut rng)).collect();
        let names = (0..k).map(|kk| format!("m{kk}")).collect();
        EnsembleData::new(Points::from_1d(&xs), y, BaseModelSet::new(names, preds).unwrap()).unwrap()
    }

    fn quick_cfg() -> FitConfig {
        FitConfig { iterations: 300, empirical_bayes: None, cdf_draws: 256, ..FitConfig::default() }
    }

    #[test]
    fn kl_hat_examples() {
        assert_eq!(kl_hat_density(1.0), 0.0);
        assert!((kl_hat(0.0, 0.0, 1.0, None) - 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!(kl_hat_density(0.0).is_finite());
    }

    #[test]
    fn cvm_hat_examples() {
        assert_eq!(cvm_hat(0.5, &[0.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).unwrap(), 0.0);
        assert!((cvm_hat(0.0, &[0.5; 4], &[-1.0, -0.5, 0.5, 1.0]).unwrap() - 0.25).abs() < 1e-15);
        let grid = [-1.0, 0.5, 1.0];
        let cdf: Vec<f64> = grid.iter().map(|&g| norm_cdf(g)).collect();
        assert!((cvm_hat(0.0, &cdf, &grid).unwrap() - 0.048_518).abs() < 1e-5);
    }

    #[test]
    fn composite_is_additive() {
        let grid = [-1.0, 0.0, 0.7, 2.0];
        let (y, m, s) = (0.3, 0.1, 0.8);
        assert_eq!(composite_divergence(y, m, s, None, &grid, DivergenceMode::KlOnly).unwrap(), kl_hat(y, m, s, None));
        let cdf: Vec<f64> = grid.iter().map(|&g| norm_cdf((g - m) / s)).collect();
        let manual = kl_hat(y, m, s, None) + cvm_hat(y, &cdf, &grid).unwrap();
        let got = composite_divergence(y, m, s, None, &grid, DivergenceMode::KlPlusCvm).unwrap();
        assert!((got - manual).abs() < 1e-14);
    }

    #[test]
    fn divergence_grid_policies() {
        let y = [0.0, 1.0, 2.0, 3.0, 10.0];
        let g = DivergenceGrid::build(&y, 8, GridPolicy::EvenSpan).unwrap();
        assert!((g.y_grid[0] + 1.0).abs() < 1e-12 && (g.y_grid[7] - 11.0).abs() < 1e-12);
        let q = DivergenceGrid::build(&y, 8, GridPolicy::EmpiricalQuantiles).unwrap();
        assert!(q.y_grid.windows(2).all(|w| w[1] > w[0]));
        assert!(DivergenceGrid::build(&y, 7, GridPolicy::EvenSpan).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = toy_data(7, 3, 1);
        let grid = DivergenceGrid::build(&data.y, 8, GridPolicy::EvenSpan).unwrap();
        let cfg = FitConfig { mean_inducing: 6, cov_inducing: 4, ..quick_cfg() };
        let problem = EnsembleProblem::new(&data, KernelSpec::rbf(0.2), KernelSpec::rbf(0.3), &grid, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params: Vec<f64> = problem.initial().iter().map(|p| p + 0.1 * normal(&mut rng)).collect();
        for mode in [DivergenceMode::KlOnly, DivergenceMode::KlPlusCvm] {
            let ev = problem.evaluate(&params, mode, 3, 17, true).unwrap();
            for j in 0..params.len() {
                let h = 1e-6;
                let mut p = params.clone();
                p[j] += h;
                let up = problem.evaluate(&p, mode, 3, 17, false).unwrap().value;
                p[j] -= 2.0 * h;
                let dn = problem.evaluate(&p, mode, 3, 17, false).unwrap().value;
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - ev.grad[j]).abs() < 1e-4 * (1.0 + fd.abs()), "{mode:?} param {j}: fd {fd} vs {}", ev.grad[j]);
            }
        }
    }

    #[test]
    fn objective_matches_direct_monte_carlo() {
        let data = toy_data(5, 2, 4);
        let grid = DivergenceGrid::build(&data.y, 8, GridPolicy::EvenSpan).unwrap();
        let cfg = FitConfig { iterations: 100, mean_inducing: 5, cov_inducing: 3, ..quick_cfg() };
        let problem = EnsembleProblem::new(&data, KernelSpec::rbf(0.2), KernelSpec::rbf(0.3), &grid, &cfg).unwrap();
        let raw = run_optimizer(&problem, DivergenceMode::KlOnly, &cfg, 100, 8).unwrap();
        let post = problem.to_posterior(&raw.params).unwrap();
        for mode in [DivergenceMode::KlOnly, DivergenceMode::KlPlusCvm] {
            let analytic = problem.evaluate(&raw.params, mode, 200_000, 5, false).unwrap().value;
            // Direct sampling of every latent, batches give a standard error.
            let batches: Vec<f64> =
                (0..20).map(|b| vi_objective(&data, &post, &grid, mode, None, 5000, 100 + b).unwrap()).collect();
            let m = mean(&batches);
            let se = sample_sd(&batches) / (batches.len() as f64).sqrt();
            assert!((m - analytic).abs() < 3.0 * se + 1e-3, "{mode:?}: direct {m} ± {se} vs analytic {analytic}");
        }
    }

    #[test]
    fn prior_equals_variational_gives_zero_kl() {
        let data = toy_data(6, 2, 5);
        let x = &data.x;
        let zm = place_inducing(x, 6);
        let zs = place_inducing(x, 3);
        let k = KernelSpec::rbf(0.2);
        let huge = DMatrix::identity(3, 3) * 1e6;
        let f = DgpFactor::new(zm, DVector::zeros(6), zs, huge, k).unwrap();
        let t = LogNormalFactor::new(0.0, 1.0).unwrap();
        let post = EnsemblePosterior {
            weight_gps: vec![f.clone(), f.clone()],
            residual_gp: f,
            temperature: t,
            noise_sd: t,
            kernel_mu: k,
            kernel_eps: k,
            temperature_prior: t,
            noise_prior: t,
            y_shift: 0.0,
            y_scale: 1.0,
        };
        assert!(posterior_kl(&post).unwrap().abs() < 1e-5);
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let data = toy_data(8, 2, 6);
        let grid = DivergenceGrid::build(&data.y, 8, GridPolicy::EvenSpan).unwrap();
        let cfg = FitConfig { iterations: 0, ..quick_cfg() };
        let fit = optimize_vi(&data, &grid, &cfg).unwrap();
        assert!(fit.trace.is_empty());
        assert!(fit.posterior.weight_gps.iter().all(|f| f.mean.iter().all(|&v| v == 0.0)));
        assert_eq!(fit.initial_objective, fit.final_objective);
    }

    #[test]
    fn optimization_is_deterministic_and_improves() {
        let data = toy_data(12, 3, 7);
        let grid = DivergenceGrid::build(&data.y, 10, GridPolicy::EvenSpan).unwrap();
        let cfg = quick_cfg();
        let a = optimize_vi(&data, &grid, &cfg).unwrap();
        let b = optimize_vi(&data, &grid, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.posterior.residual_gp.mean, b.posterior.residual_gp.mean);
        assert!(a.final_objective <= a.initial_objective);
    }

    #[test]
    fn single_perfect_model_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 30;
        let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let truth: Vec<f64> = xs.iter().map(|x| x + (4.0 * x).sin()).collect();
        let noise = 0.05;
        let y: Vec<f64> = truth.iter().map(|t| t + noise * normal(&mut rng)).collect();
        let bases = BaseModelSet::new(vec!["truth".into()], DMatrix::from_row_slice(1, n, &truth)).unwrap();
        let data = EnsembleData::new(Points::from_1d(&xs), y, bases).unwrap();
        let cfg = FitConfig { iterations: 1000, calibrate: false, ..quick_cfg() };
        let fit = gibbs_fit(&data, &cfg).unwrap();
        let rmse = (fit.uncalibrated.mean.iter().zip(&truth).map(|(m, t)| (m - t).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!(rmse <= 2.0 * noise, "rmse {rmse}");
    }

    #[test]
    fn calibration_disabled_gives_identity() {
        let data = toy_data(10, 2, 8);
        let cfg = FitConfig { calibrate: false, ..quick_cfg() };
        let fit = gibbs_fit(&data, &cfg).unwrap();
        assert!(fit.link.is_identity());
        assert_eq!(fit.calibrated.cdf, fit.uncalibrated.cdf);
    }

    #[test]
    fn sgp_regression_matches_exact_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let xs: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = xs.iter().map(|x| (5.0 * x).sin() + 0.1 * normal(&mut rng)).collect();
        let x = Points::from_1d(&xs);
        let kernel = KernelSpec::rbf(0.1);
        let noise = 0.1;
        let (factor, _) = fit_sgp_regression(&x, &y, &x, kernel, noise, 5000, 0.02).unwrap();
        let mut kn = gram_values(&kernel, &x);
        for i in 0..20 {
            kn[(i, i)] += noise * noise;
        }
        let exact = gram_values(&kernel, &x) * kn.cholesky().unwrap().solve(&DVector::from_column_slice(&y));
        let approx = sgp_marginal(&factor, &x).unwrap().mean;
        let rms = ((exact - approx).norm_squared() / 20.0).sqrt();
        assert!(rms < 1e-3, "rms {rms}");
    }
}
