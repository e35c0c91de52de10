//! Monotone GP link `G: [0,1] → [0,1]` applied to the systematic CDF.
//!
//! The link is parameterized as `G(p) = p + h(p)` with `h` a sparse GP over
//! evenly spaced inducing probabilities, so the prior is centred on the
//! identity map. With `pin_endpoints` the GP is replaced by its bridge
//! `h(p) − (1−p)·h(0) − p·h(1)`, which makes `G(0) = 0` and `G(1) = 1` hold
//! exactly. Monotonicity is encouraged through a probit likelihood on the
//! derivative `g = 1 + h'` at a grid of constraint points. The variational
//! factor is optimized in whitened coordinates `m = L m̃`, `S = L L̃ L̃ᵀ Lᵀ`
//! with `L L ᵀ = K_ZZ`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ensemble::{check_grid, PredictiveDistribution};
use crate::error::{Error, Result};
use crate::gp::{MarginalGaussian, SgpFactor};
use crate::kernels::{gram, rbf_derivative_blocks, KernelFamily, KernelSpec};
use crate::optim::{geometric_decay, Adam};
use crate::points::Points;
use crate::stats::{dlog_norm_cdf, log_norm_cdf};

const LOG_FLOOR: f64 = 1e-12;
/// Below this value `log g` is continued by its second-order Taylor expansion,
/// which keeps the fitting objective finite for Monte Carlo draws with `g ≤ 0`.
const SOFT_LOG_KNOT: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    pub inducing: usize,
    pub length_scale: f64,
    /// Candidate length-scales; when non-empty the best by final objective wins.
    pub length_scale_grid: Vec<f64>,
    pub variance: f64,
    /// Candidate prior variances, searched jointly with `length_scale_grid`.
    pub variance_grid: Vec<f64>,
    pub probit_scale: f64,
    pub constraint_points: usize,
    /// Use the bridge process so that `G(0) = 0` and `G(1) = 1` exactly;
    /// `anchor_weight` and `normalize` are then ignored.
    pub pin_endpoints: bool,
    pub anchor_weight: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub saa_draws: usize,
    /// Include `−N·log(G(1) − G(0))`, evaluated at the posterior mean, so the
    /// `log g` terms act as a normalized density.
    pub normalize: bool,
    pub seed: u64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            inducing: 16,
            length_scale: 0.3,
            length_scale_grid: Vec::new(),
            variance: 0.05,
            variance_grid: Vec::new(),
            probit_scale: 1e-2,
            constraint_points: 32,
            pin_endpoints: true,
            anchor_weight: 10.0,
            iterations: 8000,
            learning_rate: 0.03,
            saa_draws: 16,
            normalize: true,
            seed: 0,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inducing < 2 || self.constraint_points < 2 || self.saa_draws == 0 {
            return Err(Error::config("link needs >= 2 inducing points, >= 2 constraint points and >= 1 draw"));
        }
        let scales = std::iter::once(self.length_scale).chain(self.length_scale_grid.iter().copied());
        for l in scales {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::config(format!("link length-scale must be positive, got {l}")));
            }
        }
        if self.variance_grid.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config("link variance candidates must be positive"));
        }
        if !(self.variance > 0.0 && self.probit_scale > 0.0 && self.learning_rate > 0.0 && self.anchor_weight >= 0.0) {
            return Err(Error::config("link variance, probit scale and learning rate must be positive"));
        }
        Ok(())
    }
}

/// Quantile-to-quantile regression data: `F₀(y_j | x_i)` on the grid, the
/// indicators `𝕀(y_i < y_j)`, and `F₀(y_i | x_i)` for the derivative term.
#[derive(Clone, Debug)]
pub struct LinkData {
    pub cdf: DMatrix<f64>,
    pub indicators: DMatrix<f64>,
    pub pit: Vec<f64>,
}

impl LinkData {
    pub fn new(cdf: DMatrix<f64>, indicators: DMatrix<f64>, pit: Vec<f64>) -> Result<Self> {
        if cdf.shape() != indicators.shape() || cdf.nrows() != pit.len() || cdf.nrows() == 0 || cdf.ncols() == 0 {
            return Err(Error::input("link data shapes disagree or are empty"));
        }
        if cdf.iter().chain(pit.iter()).any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::input("CDF values must lie in [0, 1]"));
        }
        Ok(Self { cdf, indicators, pit })
    }

    /// Builds the regression data from a predictive distribution at the
    /// observation locations; `F₀(y_i)` is linearly interpolated on the grid.
    pub fn from_predictive(f0: &PredictiveDistribution, y: &[f64]) -> Result<Self> {
        if f0.n() != y.len() {
            return Err(Error::input("predictive rows must match observations"));
        }
        let grid = &f0.y_grid;
        let indicators = DMatrix::from_fn(y.len(), grid.len(), |i, j| if y[i] < grid[j] { 1.0 } else { 0.0 });
        let pit = y
            .iter()
            .enumerate()
            .map(|(i, &yi)| interpolate_row(grid, &f0.cdf.row(i).iter().copied().collect::<Vec<_>>(), yi))
            .collect();
        Self::new(f0.cdf.map(|v| v.clamp(0.0, 1.0)), indicators, pit)
    }

    pub fn n(&self) -> usize {
        self.cdf.nrows()
    }
}

fn interpolate_row(grid: &[f64], values: &[f64], y: f64) -> f64 {
    if y <= grid[0] {
        return values[0].clamp(0.0, 1.0);
    }
    let last = grid.len() - 1;
    if y >= grid[last] {
        return values[last].clamp(0.0, 1.0);
    }
    let j = grid.partition_point(|&g| g <= y);
    let t = (y - grid[j - 1]) / (grid[j] - grid[j - 1]);
    (values[j - 1] + t * (values[j] - values[j - 1])).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinkPosterior {
    /// Factor for `h = G − identity`; `None` encodes the identity link.
    pub value_factor: Option<SgpFactor>,
    /// Posterior of `g` on the constraint grid.
    pub derivative: MarginalGaussian,
    pub constraint_grid: Vec<f64>,
    pub probit_scale: f64,
    pub kernel: KernelSpec,
    /// `h` is the bridge process (see the module docs).
    #[serde(default)]
    pub pinned: bool,
    /// Objective trace of the selected fit (empty for the identity).
    pub trace: Vec<f64>,
}

impl LinkPosterior {
    pub fn identity() -> Self {
        let grid = even_grid(32);
        Self {
            derivative: MarginalGaussian {
                mean: DVector::from_element(grid.len(), 1.0),
                covariance: DMatrix::zeros(grid.len(), grid.len()),
            },
            constraint_grid: grid,
            value_factor: None,
            probit_scale: 1e-2,
            kernel: KernelSpec::rbf(0.3),
            pinned: false,
            trace: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.value_factor.is_none()
    }

    /// Posterior-mean evaluator for `G` and `g`.
    pub fn mean_map(&self) -> Result<LinkMean> {
        match &self.value_factor {
            None => Ok(LinkMean { inducing: Vec::new(), alpha: Vec::new(), kernel: self.kernel, ends: (0.0, 0.0) }),
            Some(f) => {
                let k = gram(&f.kernel, &f.inducing, 0.0)?;
                let alpha = k.cholesky_factor.solve(&f.mean);
                let mut map = LinkMean {
                    inducing: f.inducing.coord(0),
                    alpha: alpha.iter().copied().collect(),
                    kernel: f.kernel,
                    ends: (0.0, 0.0),
                };
                if self.pinned {
                    map.ends = (map.raw(0.0), map.raw(1.0));
                }
                Ok(map)
            }
        }
    }
}

/// `Ḡ(p) = p + h̄(p)` with `h̄(p) = k(p, Z) K⁻¹ m` (bridged when pinned) and
/// its derivative.
#[derive(Clone, Debug)]
pub struct LinkMean {
    inducing: Vec<f64>,
    alpha: Vec<f64>,
    kernel: KernelSpec,
    /// `(h̄(0), h̄(1))` of the unbridged mean, zero when not pinned.
    ends: (f64, f64),
}

impl LinkMean {
    fn raw(&self, p: f64) -> f64 {
        self.inducing.iter().zip(&self.alpha).map(|(&z, &a)| a * self.kernel.eval_1d(p, z)).sum()
    }

    pub fn value(&self, p: f64) -> f64 {
        let (h0, h1) = self.ends;
        p + self.raw(p) - (1.0 - p) * h0 - p * h1
    }

    pub fn derivative(&self, p: f64) -> f64 {
        let (h0, h1) = self.ends;
        1.0 + self
            .inducing
            .iter()
            .zip(&self.alpha)
            .map(|(&z, &a)| a * rbf_derivative_blocks(&self.kernel, p, z).dk_dz)
            .sum::<f64>()
            + h0
            - h1
    }
}

fn even_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

fn check_unit(points: &[f64]) -> Result<()> {
    if points.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::input("link inputs must lie in [0, 1]"));
    }
    Ok(())
}

/// Joint prior covariance of `(G(value_points), g(deriv_points))`.
pub fn joint_cov_blocks(kernel: &KernelSpec, value_points: &[f64], deriv_points: &[f64]) -> Result<DMatrix<f64>> {
    if kernel.family != KernelFamily::Rbf {
        return Err(Error::Unsupported("the link kernel must be differentiable (RBF)".into()));
    }
    check_unit(value_points)?;
    check_unit(deriv_points)?;
    let (nv, nd) = (value_points.len(), deriv_points.len());
    let mut c = DMatrix::zeros(nv + nd, nv + nd);
    for (i, &a) in value_points.iter().enumerate() {
        for (j, &b) in value_points.iter().enumerate() {
            c[(i, j)] = kernel.eval_1d(a, b);
        }
        for (j, &b) in deriv_points.iter().enumerate() {
            let blk = rbf_derivative_blocks(kernel, a, b);
            c[(i, nv + j)] = blk.dk_dz2;
            c[(nv + j, i)] = blk.dk_dz2;
        }
    }
    for (i, &a) in deriv_points.iter().enumerate() {
        for (j, &b) in deriv_points.iter().enumerate() {
            c[(nv + i, nv + j)] = rbf_derivative_blocks(kernel, a, b).d2k_dz_dz2;
        }
    }
    Ok(c)
}

/// `Σ_d ln Φ(g_d / ν)`.
pub fn constraint_loglik(g_values: &[f64], probit_scale: f64) -> Result<f64> {
    if !(probit_scale > 0.0) {
        return Err(Error::input("probit scale must be positive"));
    }
    Ok(g_values.iter().map(|&g| log_norm_cdf(g / probit_scale)).sum())
}

/// `ln g`, floored at `1e−12` with a linear penalty for the shortfall.
fn safe_log(g: f64) -> f64 {
    if g >= LOG_FLOOR {
        g.ln()
    } else {
        LOG_FLOOR.ln() - (LOG_FLOOR - g)
    }
}

/// `Σ_i [ −(1/M) Σ_j (G_ij − I_ij)² + ln g_i ]`.
pub fn calibration_loglik(g_cdf: &DMatrix<f64>, g_deriv: &[f64], indicators: &DMatrix<f64>) -> Result<f64> {
    if g_cdf.shape() != indicators.shape() || g_cdf.nrows() != g_deriv.len() {
        return Err(Error::input(format!(
            "calibration_loglik shapes disagree: G {:?}, indicators {:?}, g {}",
            g_cdf.shape(),
            indicators.shape(),
            g_deriv.len()
        )));
    }
    let m = g_cdf.ncols() as f64;
    Ok((0..g_cdf.nrows())
        .map(|i| {
            let cvm: f64 = g_cdf.row(i).iter().zip(indicators.row(i).iter()).map(|(g, t)| (g - t) * (g - t)).sum();
            -cvm / m + safe_log(g_deriv[i])
        })
        .sum())
}

/// `ln g` continued below `SOFT_LOG_KNOT` by its quadratic Taylor polynomial.
fn soft_log(g: f64) -> (f64, f64) {
    if g >= SOFT_LOG_KNOT {
        (g.ln(), 1.0 / g)
    } else {
        let u = (g - SOFT_LOG_KNOT) / SOFT_LOG_KNOT;
        (SOFT_LOG_KNOT.ln() + u - 0.5 * u * u, (1.0 - u) / SOFT_LOG_KNOT)
    }
}

#[derive(Clone, Copy)]
enum SaaKind {
    /// `−ω E[ln g]`
    NegLog,
    /// `−ω E[ln Φ(g/ν)]`
    NegLogProbit(f64),
    /// `+ω E[ln g]`
    PosLog,
}

/// One expectation over a scalar Gaussian `o + fᵀm̃ + s z` by sample averaging.
struct SaaTerm {
    feature: DVector<f64>,
    offset: f64,
    prior_var: f64,
    weight: f64,
    kind: SaaKind,
    draws: Vec<f64>,
}

struct LinkProblem {
    m: usize,
    chol_k: DMatrix<f64>,
    quad_a: DMatrix<f64>,
    quad_b: DVector<f64>,
    quad_c: f64,
    saa: Vec<SaaTerm>,
    /// Prior covariance of `g` on the constraint grid.
    prior_deriv: DMatrix<f64>,
}

/// Whitened features of `h(p)` and `h'(p)` plus their prior variances, for
/// either the plain GP or its bridge.
struct LinkBasis<'a> {
    kernel: KernelSpec,
    z: &'a [f64],
    chol_k: &'a nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pinned: bool,
    ends: (DVector<f64>, DVector<f64>),
}

impl<'a> LinkBasis<'a> {
    fn new(kernel: KernelSpec, z: &'a [f64], chol_k: &'a nalgebra::Cholesky<f64, nalgebra::Dyn>, pinned: bool) -> Self {
        let mut basis = Self { kernel, z, chol_k, pinned: false, ends: (DVector::zeros(z.len()), DVector::zeros(z.len())) };
        basis.ends = (basis.raw(0.0).0, basis.raw(1.0).0);
        basis.pinned = pinned;
        basis
    }

    fn raw(&self, p: f64) -> (DVector<f64>, DVector<f64>) {
        let kv = DVector::from_iterator(self.z.len(), self.z.iter().map(|&zi| self.kernel.eval_1d(p, zi)));
        let kd =
            DVector::from_iterator(self.z.len(), self.z.iter().map(|&zi| rbf_derivative_blocks(&self.kernel, p, zi).dk_dz));
        let l = self.chol_k.l_dirty();
        (l.solve_lower_triangular(&kv).expect("triangular solve"), l.solve_lower_triangular(&kd).expect("triangular solve"))
    }

    /// `(a, b)` with `h(p) ≈ aᵀm̃` and `h'(p) ≈ bᵀm̃`.
    fn features(&self, p: f64) -> (DVector<f64>, DVector<f64>) {
        let (mut a, mut b) = self.raw(p);
        if self.pinned {
            let (a0, a1) = &self.ends;
            a.axpy(-(1.0 - p), a0, 1.0);
            a.axpy(-p, a1, 1.0);
            b += a0 - a1;
        }
        (a, b)
    }

    /// `∂k(p, z)/∂p`.
    fn dk(&self, p: f64, z: f64) -> f64 {
        rbf_derivative_blocks(&self.kernel, p, z).dk_dz
    }

    fn value_var(&self, p: f64) -> f64 {
        let v = self.kernel.variance;
        if !self.pinned {
            return v;
        }
        let k = |a: f64, b: f64| self.kernel.eval_1d(a, b);
        let q = 1.0 - p;
        v * (1.0 + q * q + p * p) - 2.0 * q * k(p, 0.0) - 2.0 * p * k(p, 1.0) + 2.0 * p * q * k(0.0, 1.0)
    }

    /// Prior covariance of the derivative process at `p` and `r`.
    fn deriv_cov(&self, p: f64, r: f64) -> f64 {
        let base = rbf_derivative_blocks(&self.kernel, p, r).d2k_dz_dz2;
        if !self.pinned {
            return base;
        }
        let ends = 2.0 * (self.kernel.variance - self.kernel.eval_1d(0.0, 1.0));
        base + self.dk(p, 0.0) - self.dk(p, 1.0) + self.dk(r, 0.0) - self.dk(r, 1.0) + ends
    }
}

fn build_problem(data: &LinkData, kernel: &KernelSpec, cfg: &LinkConfig) -> Result<(LinkProblem, Vec<f64>, Vec<DVector<f64>>)> {
    let z = even_grid(cfg.inducing);
    let zp = Points::from_1d(&z);
    let g = gram(kernel, &zp, 0.0)?;
    let m = z.len();
    let v = kernel.variance;
    let basis = LinkBasis::new(*kernel, &z, &g.cholesky_factor, cfg.pin_endpoints);

    let mut quad_a = DMatrix::zeros(m, m);
    let mut quad_b = DVector::zeros(m);
    let mut quad_c = 0.0;
    let mut add_quad = |a: &DVector<f64>, resid: f64, prior_var: f64, w: f64| {
        quad_a.ger(w, a, a, 1.0);
        quad_b.axpy(w * resid, a, 1.0);
        quad_c += w * (resid * resid + (prior_var - a.norm_squared()).max(0.0));
    };
    let mw = 1.0 / data.cdf.ncols() as f64;
    for i in 0..data.n() {
        for j in 0..data.cdf.ncols() {
            let p = data.cdf[(i, j)];
            let (a, _) = basis.features(p);
            add_quad(&a, p - data.indicators[(i, j)], basis.value_var(p), mw);
        }
    }
    let (a0, _) = basis.features(0.0);
    let (a1, _) = basis.features(1.0);
    if !cfg.pin_endpoints {
        add_quad(&a0, 0.0, v, cfg.anchor_weight);
        add_quad(&a1, 0.0, v, cfg.anchor_weight);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draws = || (0..cfg.saa_draws).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>();
    let mut saa = Vec::new();
    for &p in &data.pit {
        let (_, b) = basis.features(p);
        saa.push(SaaTerm {
            feature: b,
            offset: 1.0,
            prior_var: basis.deriv_cov(p, p),
            weight: 1.0,
            kind: SaaKind::NegLog,
            draws: draws(),
        });
    }
    let grid = even_grid(cfg.constraint_points);
    let mut grid_features = Vec::with_capacity(grid.len());
    for &p in &grid {
        let (_, b) = basis.features(p);
        grid_features.push(b.clone());
        saa.push(SaaTerm {
            feature: b,
            offset: 1.0,
            prior_var: basis.deriv_cov(p, p),
            weight: 1.0,
            kind: SaaKind::NegLogProbit(cfg.probit_scale),
            draws: draws(),
        });
    }
    if cfg.normalize && !cfg.pin_endpoints {
        let diff = &a1 - &a0;
        let k01 = kernel.eval_1d(0.0, 1.0);
        saa.push(SaaTerm {
            feature: diff,
            offset: 1.0,
            prior_var: 2.0 * (v - k01),
            weight: data.n() as f64,
            kind: SaaKind::PosLog,
            draws: vec![0.0],
        });
    }
    let prior_deriv = DMatrix::from_fn(grid.len(), grid.len(), |i, j| basis.deriv_cov(grid[i], grid[j]));
    let chol_k = g.lower();
    Ok((LinkProblem { m, chol_k, quad_a, quad_b, quad_c, saa, prior_deriv }, grid, grid_features))
}

/// Unpacks `[m̃ (M), lower triangle of L̃ row-major with log diagonal]`.
fn unpack(params: &[f64], m: usize) -> (DVector<f64>, DMatrix<f64>) {
    let mean = DVector::from_column_slice(&params[..m]);
    let mut l = DMatrix::zeros(m, m);
    let mut idx = m;
    for i in 0..m {
        for j in 0..=i {
            l[(i, j)] = if i == j { params[idx].exp() } else { params[idx] };
            idx += 1;
        }
    }
    (mean, l)
}

fn pack_grad(gm: &DVector<f64>, gl: &DMatrix<f64>, l: &DMatrix<f64>, out: &mut [f64]) {
    let m = gm.len();
    out[..m].copy_from_slice(gm.as_slice());
    let mut idx = m;
    for i in 0..m {
        for j in 0..=i {
            out[idx] = if i == j { gl[(i, j)] * l[(i, i)] } else { gl[(i, j)] };
            idx += 1;
        }
    }
}

impl LinkProblem {
    fn dim(&self) -> usize {
        self.m + self.m * (self.m + 1) / 2
    }

    fn initial(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.dim()];
        let mut idx = self.m;
        for i in 0..self.m {
            for j in 0..=i {
                if i == j {
                    p[idx] = 0.5f64.ln();
                }
                idx += 1;
            }
        }
        p
    }

    /// Negative fitting objective and its gradient.
    fn eval(&self, params: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let m = self.m;
        let (mt, lt) = unpack(params, m);
        let am = &self.quad_a * &mt;
        let al = &self.quad_a * &lt;
        let trace_alt: f64 = lt.iter().zip(al.iter()).map(|(a, b)| a * b).sum();
        let mut value = mt.dot(&am) + 2.0 * self.quad_b.dot(&mt) + self.quad_c + trace_alt;
        let mut gm = 2.0 * (&am + &self.quad_b);
        let mut gl = 2.0 * al;

        for t in &self.saa {
            let proj = lt.tr_mul(&t.feature);
            let var = (t.prior_var - t.feature.norm_squared() + proj.norm_squared()).max(1e-12);
            let s = var.sqrt();
            let mu = t.offset + t.feature.dot(&mt);
            let (mut acc, mut dmu, mut ds) = (0.0, 0.0, 0.0);
            for &zr in &t.draws {
                let gv = mu + s * zr;
                let (f, df) = match t.kind {
                    SaaKind::NegLog => {
                        let (f, df) = soft_log(gv);
                        (-f, -df)
                    }
                    SaaKind::PosLog => soft_log(gv),
                    SaaKind::NegLogProbit(nu) => (-log_norm_cdf(gv / nu), -dlog_norm_cdf(gv / nu) / nu),
                };
                acc += f;
                dmu += df;
                ds += df * zr;
            }
            let w = t.weight / t.draws.len() as f64;
            value += w * acc;
            gm.axpy(w * dmu, &t.feature, 1.0);
            gl.ger(w * ds / s, &t.feature, &proj, 1.0);
        }

        let logdet: f64 = (0..m).map(|i| lt[(i, i)].ln()).sum();
        value += 0.5 * (lt.norm_squared() + mt.norm_squared() - m as f64) - logdet;
        if let Some(out) = grad {
            gm += &mt;
            gl += &lt;
            let inv_t = lt
                .solve_lower_triangular(&DMatrix::identity(m, m))
                .expect("positive diagonal")
                .transpose();
            gl -= inv_t;
            pack_grad(&gm, &gl.lower_triangle(), &lt, out);
        }
        value
    }
}

struct LinkFit {
    params: Vec<f64>,
    objective: f64,
    trace: Vec<f64>,
}

fn run_fit(problem: &LinkProblem, cfg: &LinkConfig) -> Result<LinkFit> {
    let mut params = problem.initial();
    let mut grad = vec![0.0; params.len()];
    let mut opt = Adam::new(params.len(), cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut bad = 0;
    let mut best = (f64::INFINITY, params.clone());
    for t in 0..cfg.iterations {
        let v = problem.eval(&params, Some(&mut grad));
        trace.push(v);
        if !v.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            bad += 1;
            if bad >= 50 {
                return Err(Error::Inference(format!("link objective non-finite for 50 consecutive steps at iteration {t}")));
            }
            continue;
        }
        bad = 0;
        if v < best.0 {
            best = (v, params.clone());
        }
        opt.step(&mut params, &grad, geometric_decay(t, cfg.iterations, 0.05));
    }
    let last = problem.eval(&params, None);
    trace.push(last);
    if last.is_finite() && last <= best.0 {
        best = (last, params);
    }
    if !best.0.is_finite() {
        return Err(Error::Inference("link objective never finite".into()));
    }
    Ok(LinkFit { params: best.1, objective: best.0, trace })
}

/// Fits the monotone link by maximizing the calibration and constraint
/// log-likelihoods minus the KL to the prior.
pub fn fit_link(data: &LinkData, cfg: &LinkConfig) -> Result<LinkPosterior> {
    cfg.validate()?;
    let scales = if cfg.length_scale_grid.is_empty() { vec![cfg.length_scale] } else { cfg.length_scale_grid.clone() };
    let variances = if cfg.variance_grid.is_empty() { vec![cfg.variance] } else { cfg.variance_grid.clone() };
    let mut best: Option<(f64, LinkPosterior)> = None;
    for (&l, &v) in scales.iter().flat_map(|l| variances.iter().map(move |v| (l, v))) {
        let kernel = KernelSpec::new(KernelFamily::Rbf, l, v)?;
        let (problem, grid, grid_features) = build_problem(data, &kernel, cfg)?;
        let fit = run_fit(&problem, cfg)?;
        let post = assemble(&problem, &fit, kernel, grid, &grid_features, cfg)?;
        // ties go to the smoother, closer-to-identity candidate
        let better = match &best {
            None => true,
            Some((obj, b)) => {
                fit.objective < *obj
                    || (fit.objective == *obj && (l, -v) > (b.kernel.length_scale, -b.kernel.variance))
            }
        };
        if better {
            best = Some((fit.objective, post));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

fn assemble(
    problem: &LinkProblem,
    fit: &LinkFit,
    kernel: KernelSpec,
    grid: Vec<f64>,
    grid_features: &[DVector<f64>],
    cfg: &LinkConfig,
) -> Result<LinkPosterior> {
    let (mt, lt) = unpack(&fit.params, problem.m);
    let mean = &problem.chol_k * &mt;
    let cov_chol = &problem.chol_k * &lt;
    let inducing = Points::from_1d(&even_grid(cfg.inducing));
    let factor = SgpFactor::new(inducing, mean, cov_chol, kernel)?;

    let d = grid.len();
    let bmat = DMatrix::from_fn(problem.m, d, |r, c| grid_features[c][r]);
    let proj = lt.transpose() * &bmat;
    let covariance = &problem.prior_deriv - bmat.transpose() * &bmat + proj.transpose() * proj;
    let dmean = DVector::from_iterator(d, (0..d).map(|c| 1.0 + bmat.column(c).dot(&mt)));
    Ok(LinkPosterior {
        value_factor: Some(factor),
        derivative: MarginalGaussian { mean: dmean, covariance },
        constraint_grid: grid,
        probit_scale: cfg.probit_scale,
        kernel,
        pinned: cfg.pin_endpoints,
        trace: fit.trace.clone(),
    })
}

/// Calibrated distribution `G[F₀]` with density `g[F₀]·f₀`, using the
/// posterior-mean link, a running maximum and clamping to `[0, 1]`.
pub fn apply_link(link: &LinkPosterior, f0: &PredictiveDistribution) -> Result<PredictiveDistribution> {
    check_grid(&f0.y_grid)?;
    if link.is_identity() {
        let mut out = f0.clone();
        out.cdf.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out.pdf.iter_mut().for_each(|v| *v = v.max(0.0));
        return Ok(out);
    }
    let map = link.mean_map()?;
    let (n, m) = f0.cdf.shape();
    let mut cdf = DMatrix::zeros(n, m);
    let mut pdf = DMatrix::zeros(n, m);
    for i in 0..n {
        let mut running = 0.0f64;
        for j in 0..m {
            let p = f0.cdf[(i, j)].clamp(0.0, 1.0);
            running = running.max(map.value(p).clamp(0.0, 1.0));
            cdf[(i, j)] = running;
            pdf[(i, j)] = (map.derivative(p) * f0.pdf[(i, j)]).max(0.0);
        }
    }
    let mut out = PredictiveDistribution {
        y_grid: f0.y_grid.clone(),
        cdf,
        pdf,
        mean: f0.mean.clone(),
        variance_components: f0.variance_components.clone(),
    };
    // Shift the Monte Carlo mean by the change in grid-implied mean so that
    // grid truncation error cancels.
    for i in 0..n {
        out.mean[i] += out.cdf_mean(i) - f0.cdf_mean(i);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::norm_cdf;
    use rand::Rng;

    #[test]
    fn joint_blocks_examples() {
        let k = KernelSpec::rbf(1.0);
        let c = joint_cov_blocks(&k, &[0.1, 0.4], &[]).unwrap();
        assert_eq!(c.shape(), (2, 2));
        assert!((c[(0, 1)] - k.eval_1d(0.1, 0.4)).abs() < 1e-15);
        let c = joint_cov_blocks(&k, &[0.3], &[0.3]).unwrap();
        assert_eq!(c[(0, 1)], 0.0);
        assert!((c[(1, 1)] - 2.0).abs() < 1e-15);
        assert!(matches!(joint_cov_blocks(&KernelSpec::ou(1.0), &[0.1], &[0.1]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn joint_blocks_are_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = KernelSpec::rbf(0.3);
        let vp: Vec<f64> = (0..6).map(|_| rng.random()).collect();
        let dp: Vec<f64> = (0..6).map(|_| rng.random()).collect();
        let mut c = joint_cov_blocks(&k, &vp, &dp).unwrap();
        for i in 0..c.nrows() {
            c[(i, i)] += 1e-8;
        }
        let eig = c.symmetric_eigenvalues();
        assert!(eig.min() >= -1e-8, "{}", eig.min());
    }

    #[test]
    fn constraint_examples() {
        assert!((constraint_loglik(&[0.0; 4], 0.01).unwrap() - 4.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!(constraint_loglik(&[0.1; 3], 0.01).unwrap() >= -1e-8);
        let v = constraint_loglik(&[-0.01, 0.01], 0.01).unwrap();
        let expected = norm_cdf(-1.0).ln() + norm_cdf(1.0).ln();
        assert!((v - expected).abs() < 1e-12 && (v + 2.01377).abs() < 1e-4);
    }

    #[test]
    fn calibration_loglik_examples() {
        let ind = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 1.0]);
        assert_eq!(calibration_loglik(&ind, &[1.0], &ind).unwrap(), 0.0);
        let g = DMatrix::from_element(1, 4, 0.5);
        let v = calibration_loglik(&g, &[1.0], &DMatrix::from_element(1, 4, 1.0)).unwrap();
        assert!((v + 0.25).abs() < 1e-15);
        assert!(calibration_loglik(&g, &[1.0, 1.0], &g).is_err());
    }

    #[test]
    fn calibration_loglik_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gc = DMatrix::from_fn(3, 5, |_, _| rng.random::<f64>());
        let ind = DMatrix::from_fn(3, 5, |_, _| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 });
        let gd: Vec<f64> = (0..3).map(|_| 0.5 + rng.random::<f64>()).collect();
        let mut brute = 0.0;
        for i in 0..3 {
            let mut s = 0.0;
            for j in 0..5 {
                s += (gc[(i, j)] - ind[(i, j)]).powi(2);
            }
            brute += -s / 5.0 + gd[i].ln();
        }
        assert!((calibration_loglik(&gc, &gd, &ind).unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn safe_log_penalizes_nonpositive() {
        assert!(safe_log(0.0) < LOG_FLOOR.ln());
        assert!(safe_log(-1.0) < safe_log(0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 12;
        let grid: Vec<f64> = (0..6).map(|j| -1.5 + 0.6 * j as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let cdf = DMatrix::from_fn(n, grid.len(), |_, j| norm_cdf(grid[j] / 1.3));
        let ind = DMatrix::from_fn(n, grid.len(), |i, j| if y[i] < grid[j] { 1.0 } else { 0.0 });
        let pit = y.iter().map(|v| norm_cdf(v / 1.3)).collect();
        let data = LinkData::new(cdf, ind, pit).unwrap();
        let cfg = LinkConfig { inducing: 5, constraint_points: 6, ..LinkConfig::default() };
        let kernel = KernelSpec::new(KernelFamily::Rbf, 0.3, 0.05).unwrap();
        let (problem, _, _) = build_problem(&data, &kernel, &cfg).unwrap();
        let params: Vec<f64> = (0..problem.dim()).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut grad = vec![0.0; params.len()];
        problem.eval(&params, Some(&mut grad));
        for k in 0..params.len() {
            let h = 1e-6;
            let mut p = params.clone();
            p[k] += h;
            let up = problem.eval(&p, None);
            p[k] -= 2.0 * h;
            let dn = problem.eval(&p, None);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-4 * (1.0 + fd.abs()), "param {k}: fd {fd} vs {}", grad[k]);
        }
    }

    fn identity_data(n: usize, sd_ratio: f64, seed: u64) -> LinkData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid: Vec<f64> = (0..30).map(|j| -3.0 + 6.0 * j as f64 / 29.0).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let cdf = DMatrix::from_fn(n, grid.len(), |_, j| norm_cdf(grid[j] / sd_ratio));
        let ind = DMatrix::from_fn(n, grid.len(), |i, j| if y[i] < grid[j] { 1.0 } else { 0.0 });
        let pit = y.iter().map(|v| norm_cdf(v / sd_ratio)).collect();
        LinkData::new(cdf, ind, pit).unwrap()
    }

    #[test]
    fn recovers_identity_for_calibrated_input() {
        let link = fit_link(&identity_data(200, 1.0, 4), &LinkConfig::default()).unwrap();
        let map = link.mean_map().unwrap();
        let worst = (0..=100).map(|i| i as f64 / 100.0).map(|p| (map.value(p) - p).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.05, "max |G(p) − p| = {worst}");
        assert!(link.derivative.mean.iter().all(|&g| g >= -1e-3));
    }

    /// `F₀` uniform on `[0, 1]` while the outcome follows `G_true(F₀)`.
    fn squared_link_data(n: usize, seed: u64) -> LinkData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = even_grid(30);
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>().sqrt()).collect();
        let cdf = DMatrix::from_fn(n, grid.len(), |_, j| grid[j]);
        let ind = DMatrix::from_fn(n, grid.len(), |i, j| if y[i] < grid[j] { 1.0 } else { 0.0 });
        LinkData::new(cdf, ind, y).unwrap()
    }

    #[test]
    fn recovers_a_squared_link() {
        let link = fit_link(&squared_link_data(500, 21), &LinkConfig::default()).unwrap();
        let map = link.mean_map().unwrap();
        let worst = link.constraint_grid.iter().map(|&p| (map.value(p) - p * p).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.08, "max |G(p) − p²| = {worst}");
        assert!(link.constraint_grid.iter().all(|&p| map.derivative(p) >= -1e-3));
    }

    #[test]
    fn pinned_link_fixes_the_endpoints() {
        let link = fit_link(&squared_link_data(60, 3), &LinkConfig { iterations: 300, ..LinkConfig::default() }).unwrap();
        let map = link.mean_map().unwrap();
        assert!(map.value(0.0).abs() < 1e-12 && (map.value(1.0) - 1.0).abs() < 1e-12);
        let h = 1e-6;
        let fd = (map.value(0.5 + h) - map.value(0.5 - h)) / (2.0 * h);
        assert!((fd - map.derivative(0.5)).abs() < 1e-6);
    }

    #[test]
    fn bridge_derivative_covariance_matches_finite_differences() {
        let kernel = KernelSpec::new(KernelFamily::Rbf, 0.3, 0.05).unwrap();
        let z = even_grid(6);
        let g = gram(&kernel, &Points::from_1d(&z), 0.0).unwrap();
        let basis = LinkBasis::new(kernel, &z, &g.cholesky_factor, true);
        let cov = |a: f64, b: f64| {
            let k = |x: f64, y: f64| kernel.eval_1d(x, y);
            k(a, b) - (1.0 - b) * k(a, 0.0) - b * k(a, 1.0) - (1.0 - a) * (k(0.0, b) - (1.0 - b) * k(0.0, 0.0) - b * k(0.0, 1.0))
                - a * (k(1.0, b) - (1.0 - b) * k(1.0, 0.0) - b * k(1.0, 1.0))
        };
        let h = 1e-4;
        for &(p, r) in &[(0.2, 0.7), (0.5, 0.5), (0.9, 0.1)] {
            let fd = (cov(p + h, r + h) - cov(p + h, r - h) - cov(p - h, r + h) + cov(p - h, r - h)) / (4.0 * h * h);
            assert!((fd - basis.deriv_cov(p, r)).abs() < 1e-5, "{p} {r}: {fd} vs {}", basis.deriv_cov(p, r));
            assert!((cov(p, p) - basis.value_var(p)).abs() < 1e-12);
        }
    }

    #[test]
    fn steepens_for_overdispersed_input() {
        let link = fit_link(&identity_data(200, 2.0, 8), &LinkConfig::default()).unwrap();
        let map = link.mean_map().unwrap();
        assert!(map.derivative(0.5) > 1.0, "slope {}", map.derivative(0.5));
    }

    #[test]
    fn identity_link_is_exact() {
        let f0 = PredictiveDistribution::gaussian(&[0.0, 1.0], &[1.0, 2.0], &[-2.0, 0.0, 2.0, 4.0]).unwrap();
        let out = apply_link(&LinkPosterior::identity(), &f0).unwrap();
        assert_eq!(out.cdf, f0.cdf);
        assert_eq!(out.pdf, f0.pdf);
    }
}
