//! Variational Gaussian-process families: sparse (SGP) and de-coupled (DGP)
//! inducing-point factors, their marginals and KL terms, multivariate-normal
//! sampling and lognormal scalar factors.
//!
//! SGP: `μ = K_XZ K_ZZ⁻¹ m`, `Σ = K_XX − K_XZ K_ZZ⁻¹ (K_ZZ − S) K_ZZ⁻¹ K_ZX`.
//!
//! DGP: `μ = K_XZm m`, `Σ = K_XX − K_XZs (K_ZsZs + S)⁻¹ K_ZsX`.
//!
//! The DGP covariance is sometimes printed as `K_XX − K_XZs (K_ZsZs⁻¹ + S)⁻¹ K_ZsX`.
//! That form mixes units of `K` and `K⁻¹` and is indefinite for many valid `S`
//! (see the `printed_dgp_form_can_be_indefinite` test), so the inverse is placed
//! on the sum instead. Both forms recover the prior as `S → ∞`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{cholesky_with_jitter, cross_matrix, gram, gram_values, KernelSpec};
use crate::points::Points;

const DEDUP_TOL: f64 = 1e-9;

fn lower_triangle(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut l = m.clone();
    for j in 0..l.ncols() {
        for i in 0..j.min(l.nrows()) {
            l[(i, j)] = 0.0;
        }
    }
    l
}

fn check_cov_factor(l: &DMatrix<f64>, m: usize, what: &str) -> Result<()> {
    if l.nrows() != m || l.ncols() != m {
        return Err(Error::input(format!("{what}: covariance factor must be {m}x{m}")));
    }
    if (0..m).any(|i| !(l[(i, i)] > 0.0)) {
        return Err(Error::input(format!("{what}: covariance factor needs a positive diagonal")));
    }
    Ok(())
}

fn check_distinct(z: &Points, what: &str) -> Result<()> {
    for i in 0..z.len() {
        for j in 0..i {
            let d2: f64 = z.row(i).iter().zip(z.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2.sqrt() <= DEDUP_TOL {
                return Err(Error::input(format!("{what}: inducing points {j} and {i} coincide")));
            }
        }
    }
    Ok(())
}

/// Remove points closer than the dedup tolerance to an earlier point.
pub fn dedup_points(points: &Points) -> Points {
    let mut keep: Vec<usize> = Vec::new();
    for i in 0..points.len() {
        let dup = keep.iter().any(|&j| {
            let d2: f64 =
                points.row(i).iter().zip(points.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() <= DEDUP_TOL
        });
        if !dup {
            keep.push(i);
        }
    }
    points.select(&keep)
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = pos - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// Inducing points at evenly spaced quantiles of the inputs, per dimension.
///
/// When `m` covers all distinct inputs, the inputs themselves are used. In two
/// dimensions the quantiles form a `q × q` grid with `q = ceil(sqrt(m))`.
pub fn place_inducing(inputs: &Points, m: usize) -> Points {
    let distinct = dedup_points(inputs);
    if m >= distinct.len() {
        return distinct;
    }
    let m = m.max(1);
    let dim = inputs.dim();
    let per_dim = if dim == 1 { m } else { (m as f64).powf(1.0 / dim as f64).ceil() as usize };
    let axes: Vec<Vec<f64>> = (0..dim)
        .map(|j| {
            let mut c = inputs.coord(j);
            c.sort_by(f64::total_cmp);
            (0..per_dim)
                .map(|i| {
                    let q = if per_dim == 1 { 0.5 } else { i as f64 / (per_dim - 1) as f64 };
                    quantile_sorted(&c, q)
                })
                .collect()
        })
        .collect();
    let mut rows: Vec<Vec<f64>> = vec![vec![]];
    for axis in &axes {
        rows = rows
            .iter()
            .flat_map(|r| {
                axis.iter().map(move |&v| {
                    let mut r = r.clone();
                    r.push(v);
                    r
                })
            })
            .collect();
    }
    dedup_points(&Points::from_rows(&rows).expect("grid rows are uniform"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SgpFactor {
    pub inducing: Points,
    pub mean: DVector<f64>,
    /// Lower Cholesky factor of `S`.
    pub cov_chol: DMatrix<f64>,
    pub kernel: KernelSpec,
}

impl SgpFactor {
    pub fn new(
        inducing: Points,
        mean: DVector<f64>,
        cov_chol: DMatrix<f64>,
        kernel: KernelSpec,
    ) -> Result<Self> {
        let m = inducing.len();
        if m == 0 {
            return Err(Error::input("SGP needs at least one inducing point"));
        }
        if mean.len() != m {
            return Err(Error::input("SGP mean length must match inducing count"));
        }
        check_cov_factor(&cov_chol, m, "SGP")?;
        check_distinct(&inducing, "SGP")?;
        Ok(Self { inducing, mean, cov_chol: lower_triangle(&cov_chol), kernel })
    }

    /// Factor equal to the prior: `m = 0`, `S = K_ZZ`.
    pub fn prior(inducing: Points, kernel: KernelSpec) -> Result<Self> {
        let g = gram(&kernel, &inducing, 0.0)?;
        let m = inducing.len();
        Self::new(inducing, DVector::zeros(m), g.lower(), kernel)
    }

    pub fn cov(&self) -> DMatrix<f64> {
        &self.cov_chol * self.cov_chol.transpose()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DgpFactor {
    pub mean_inducing: Points,
    pub mean: DVector<f64>,
    pub cov_inducing: Points,
    /// Lower Cholesky factor of `S`.
    pub cov_chol: DMatrix<f64>,
    pub kernel: KernelSpec,
}

impl DgpFactor {
    pub fn new(
        mean_inducing: Points,
        mean: DVector<f64>,
        cov_inducing: Points,
        cov_chol: DMatrix<f64>,
        kernel: KernelSpec,
    ) -> Result<Self> {
        let (mm, ms) = (mean_inducing.len(), cov_inducing.len());
        if ms == 0 || mm < ms {
            return Err(Error::input(format!(
                "DGP needs M_m >= M_S >= 1 (got M_m={mm}, M_S={ms})"
            )));
        }
        if mean.len() != mm {
            return Err(Error::input("DGP mean length must match mean inducing count"));
        }
        check_cov_factor(&cov_chol, ms, "DGP")?;
        Ok(Self { mean_inducing, mean, cov_inducing, cov_chol: lower_triangle(&cov_chol), kernel })
    }

    pub fn cov(&self) -> DMatrix<f64> {
        &self.cov_chol * self.cov_chol.transpose()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarginalGaussian {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl MarginalGaussian {
    pub fn variances(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().map(|v| v.max(0.0)).collect()
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn sgp_marginal(f: &SgpFactor, x: &Points) -> Result<MarginalGaussian> {
    if x.is_empty() {
        return Err(Error::input("sgp_marginal needs at least one point"));
    }
    let kzz = gram(&f.kernel, &f.inducing, 0.0)?;
    let kzx = cross_matrix(&f.kernel, &f.inducing, x);
    let a = kzz.solve(&kzx); // K_ZZ⁻¹ K_ZX
    let mean = a.transpose() * &f.mean;
    let proj = f.cov_chol.transpose() * &a;
    let mut covariance = gram_values(&f.kernel, x) - kzx.transpose() * &a + proj.transpose() * proj;
    symmetrize(&mut covariance);
    Ok(MarginalGaussian { mean, covariance })
}

/// Per-point mean and variance of an SGP factor, `O(NM²)` after the `O(M³)` factorization.
pub fn sgp_marginal_diag(f: &SgpFactor, x: &Points) -> Result<(Vec<f64>, Vec<f64>)> {
    let kzz = gram(&f.kernel, &f.inducing, 0.0)?;
    let kzx = cross_matrix(&f.kernel, &f.inducing, x);
    let a = kzz.solve(&kzx);
    let mean = (a.transpose() * &f.mean).iter().copied().collect();
    let proj = f.cov_chol.transpose() * &a;
    let var = (0..x.len())
        .map(|i| {
            let q: f64 = kzx.column(i).dot(&a.column(i));
            let s: f64 = proj.column(i).norm_squared();
            (f.kernel.variance - q + s).max(0.0)
        })
        .collect();
    Ok((mean, var))
}

/// `KL(q(u) ‖ p(u))` for `q = N(m, S)`, `p = N(0, K_ZZ)`.
pub fn sgp_kl(f: &SgpFactor) -> Result<f64> {
    let kzz = gram(&f.kernel, &f.inducing, 0.0)?;
    let m = f.inducing.len() as f64;
    let kinv_l = kzz.solve(&f.cov_chol);
    let trace: f64 = (0..f.cov_chol.ncols()).map(|j| f.cov_chol.column(j).dot(&kinv_l.column(j))).sum();
    let kinv_m = kzz.cholesky_factor.solve(&f.mean);
    let quad = f.mean.dot(&kinv_m);
    let logdet_s: f64 = (0..f.cov_chol.nrows()).map(|i| f.cov_chol[(i, i)].ln()).sum::<f64>() * 2.0;
    Ok(0.5 * (trace + quad - m + kzz.log_det() - logdet_s))
}

struct DgpCache {
    kxm: DMatrix<f64>,
    kxs: DMatrix<f64>,
    /// Cholesky of `K_ZsZs + S`.
    chol_p: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

fn dgp_cache(f: &DgpFactor, x: &Points) -> Result<DgpCache> {
    let kss = gram_values(&f.kernel, &f.cov_inducing);
    let p = kss + f.cov();
    let (chol_p, _) = cholesky_with_jitter(&p, 0.0, f.kernel.variance)?;
    Ok(DgpCache {
        kxm: cross_matrix(&f.kernel, x, &f.mean_inducing),
        kxs: cross_matrix(&f.kernel, x, &f.cov_inducing),
        chol_p,
    })
}

pub fn dgp_marginal(f: &DgpFactor, x: &Points) -> Result<MarginalGaussian> {
    if x.is_empty() {
        return Err(Error::input("dgp_marginal needs at least one point"));
    }
    let c = dgp_cache(f, x)?;
    let mean = &c.kxm * &f.mean;
    let w = c.chol_p.solve(&c.kxs.transpose()); // (K+S)⁻¹ K_ZsX
    let mut covariance = gram_values(&f.kernel, x) - &c.kxs * w;
    symmetrize(&mut covariance);
    Ok(MarginalGaussian { mean, covariance })
}

/// Per-point mean and variance of a DGP factor.
pub fn dgp_marginal_diag(f: &DgpFactor, x: &Points) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.is_empty() {
        return Err(Error::input("dgp_marginal needs at least one point"));
    }
    let c = dgp_cache(f, x)?;
    let mean = (&c.kxm * &f.mean).iter().copied().collect();
    let w = c.chol_p.solve(&c.kxs.transpose());
    let var = (0..x.len())
        .map(|i| (f.kernel.variance - c.kxs.row(i).transpose().dot(&w.column(i))).max(0.0))
        .collect();
    Ok((mean, var))
}

/// `KL(Q ‖ P)` for the de-coupled family: `½ mᵀK_mm m + ½[ln|K+S| − ln|S| − tr(K (K+S)⁻¹)]`.
pub fn dgp_kl(f: &DgpFactor) -> Result<f64> {
    let kmm = gram_values(&f.kernel, &f.mean_inducing);
    let mean_term = 0.5 * f.mean.dot(&(&kmm * &f.mean));
    let kss = gram_values(&f.kernel, &f.cov_inducing);
    let p = &kss + f.cov();
    let (chol_p, _) = cholesky_with_jitter(&p, 0.0, f.kernel.variance)?;
    let lp = chol_p.l_dirty();
    let logdet_p: f64 = (0..lp.nrows()).map(|i| lp[(i, i)].ln()).sum::<f64>() * 2.0;
    let logdet_s: f64 = (0..f.cov_chol.nrows()).map(|i| f.cov_chol[(i, i)].ln()).sum::<f64>() * 2.0;
    let trace = chol_p.solve(&kss).trace();
    Ok(mean_term + 0.5 * (logdet_p - logdet_s - trace))
}

/// Draws from `N(μ, Σ)` as a `count × N` matrix. ChaCha8 seeded from `seed`;
/// standard normals are consumed column by column (draw-major).
pub fn mvn_sample(g: &MarginalGaussian, count: usize, seed: u64) -> Result<DMatrix<f64>> {
    if count == 0 {
        return Err(Error::input("mvn_sample needs count >= 1"));
    }
    let n = g.mean.len();
    let scale = g.covariance.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::from_fn(n, count, |_, _| StandardNormal.sample(&mut rng));
    let mut out = DMatrix::zeros(count, n);
    if scale == 0.0 {
        for d in 0..count {
            out.row_mut(d).copy_from(&g.mean.transpose());
        }
        return Ok(out);
    }
    let (chol, _) = cholesky_with_jitter(&g.covariance, 0.0, scale)?;
    let lz = chol.l() * z;
    for d in 0..count {
        for i in 0..n {
            out[(d, i)] = g.mean[i] + lz[(i, d)];
        }
    }
    Ok(out)
}

/// `X = exp(location + scale · Z)`, `Z ~ N(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogNormalFactor {
    pub location: f64,
    pub scale: f64,
}

impl LogNormalFactor {
    pub fn new(location: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite() && location.is_finite()) {
            return Err(Error::input(format!("lognormal needs finite location and scale > 0, got ({location}, {scale})")));
        }
        Ok(Self { location, scale })
    }

    pub fn median(&self) -> f64 {
        self.location.exp()
    }

    /// `E[X^p] = exp(p·loc + p²·scale²/2)`.
    pub fn moment(&self, p: f64) -> f64 {
        (p * self.location + 0.5 * p * p * self.scale * self.scale).exp()
    }

    pub fn entropy(&self) -> f64 {
        self.location + 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * self.scale * self.scale).ln()
    }

    /// KL divergence to another lognormal (equal to the KL of the underlying normals).
    pub fn kl_to(&self, prior: &LogNormalFactor) -> f64 {
        let (s, s0) = (self.scale, prior.scale);
        (s0 / s).ln() + (s * s + (self.location - prior.location).powi(2)) / (2.0 * s0 * s0) - 0.5
    }
}

pub fn lognormal_sample_and_entropy(f: &LogNormalFactor, count: usize, seed: u64) -> Result<(Vec<f64>, f64)> {
    if count == 0 {
        return Err(Error::input("lognormal sampling needs count >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = (0..count)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (f.location + f.scale * z).exp()
        })
        .collect();
    Ok((draws, f.entropy()))
}
