//! Covariance functions, the derivative blocks used by the monotone link, and
//! Gram matrices with a jitter-escalating Cholesky factorization.
//!
//! The RBF family is `variance * exp(-|z - z'|^2 / l)` (the squared distance is
//! divided by `l`, not `2 l^2`). The OU family is `variance * exp(-|z - z'| / l)`.
//! Distances are Euclidean over all coordinates.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::Points;

/// First jitter tried after an exact factorization fails, relative to the kernel variance.
pub const JITTER_START: f64 = 1e-8;
/// Largest jitter tried, relative to the kernel variance.
pub const JITTER_CAP: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Rbf,
    Ou,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub length_scale: f64,
    pub variance: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, length_scale: f64, variance: f64) -> Result<Self> {
        if !(length_scale > 0.0 && length_scale.is_finite()) {
            return Err(Error::input(format!("length_scale must be positive, got {length_scale}")));
        }
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::input(format!("variance must be positive, got {variance}")));
        }
        Ok(Self { family, length_scale, variance })
    }

    pub fn rbf(length_scale: f64) -> Self {
        Self::new(KernelFamily::Rbf, length_scale, 1.0).expect("invalid RBF length-scale")
    }

    pub fn ou(length_scale: f64) -> Self {
        Self::new(KernelFamily::Ou, length_scale, 1.0).expect("invalid OU length-scale")
    }

    pub fn with_variance(self, variance: f64) -> Result<Self> {
        Self::new(self.family, self.length_scale, variance)
    }

    /// Covariance between two points of equal dimension. Dimensions are not checked.
    #[inline]
    pub fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.eval_sq_dist(d2)
    }

    #[inline]
    pub fn eval_sq_dist(&self, d2: f64) -> f64 {
        match self.family {
            KernelFamily::Rbf => self.variance * (-d2 / self.length_scale).exp(),
            KernelFamily::Ou => self.variance * (-d2.sqrt() / self.length_scale).exp(),
        }
    }

    #[inline]
    pub fn eval_1d(&self, a: f64, b: f64) -> f64 {
        self.eval_sq_dist((a - b) * (a - b))
    }
}

pub fn kernel_eval(spec: &KernelSpec, z: &[f64], z2: &[f64]) -> Result<f64> {
    if z.len() != z2.len() {
        return Err(Error::input(format!(
            "point dimensions differ: {} vs {}",
            z.len(),
            z2.len()
        )));
    }
    Ok(spec.eval_unchecked(z, z2))
}

/// Joint covariance blocks of a process and its derivative at a pair of scalar inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerivativeBlocks {
    /// `k(z, z')`
    pub k: f64,
    /// `∂k/∂z'`, i.e. `Cov(G(z), g(z'))`
    pub dk_dz2: f64,
    /// `∂k/∂z`, i.e. `Cov(g(z), G(z'))`
    pub dk_dz: f64,
    /// `∂²k/∂z∂z'`, i.e. `Cov(g(z), g(z'))`
    pub d2k_dz_dz2: f64,
}

pub fn kernel_derivative_blocks(spec: &KernelSpec, z: f64, z2: f64) -> Result<DerivativeBlocks> {
    if spec.family != KernelFamily::Rbf {
        return Err(Error::Unsupported(
            "derivative blocks need a differentiable kernel; OU is not differentiable at zero lag".into(),
        ));
    }
    Ok(rbf_derivative_blocks(spec, z, z2))
}

#[inline]
pub(crate) fn rbf_derivative_blocks(spec: &KernelSpec, z: f64, z2: f64) -> DerivativeBlocks {
    let l = spec.length_scale;
    let diff = z - z2;
    let k = spec.eval_sq_dist(diff * diff);
    let dk_dz = -2.0 * diff / l * k;
    DerivativeBlocks {
        k,
        dk_dz2: -dk_dz,
        dk_dz,
        d2k_dz_dz2: (2.0 / l - 4.0 * diff * diff / (l * l)) * k,
    }
}

/// Cross-covariance matrix `K[i, j] = k(a_i, b_j)`.
pub fn cross_matrix(spec: &KernelSpec, a: &Points, b: &Points) -> DMatrix<f64> {
    debug_assert_eq!(a.dim(), b.dim());
    DMatrix::from_fn(a.len(), b.len(), |i, j| spec.eval_unchecked(a.row(i), b.row(j)))
}

/// Symmetric Gram matrix on one point set (exactly symmetric by construction).
pub fn gram_values(spec: &KernelSpec, points: &Points) -> DMatrix<f64> {
    let n = points.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = spec.variance;
        for j in 0..i {
            let v = spec.eval_unchecked(points.row(i), points.row(j));
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct GramMatrix {
    pub values: DMatrix<f64>,
    pub jitter_applied: f64,
    pub cholesky_factor: Cholesky<f64, Dyn>,
}

impl GramMatrix {
    pub fn lower(&self) -> DMatrix<f64> {
        self.cholesky_factor.l()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.cholesky_factor.solve(b)
    }

    /// `2 Σ ln L_ii`.
    pub fn log_det(&self) -> f64 {
        let l = self.cholesky_factor.l_dirty();
        (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
    }
}

/// Factorize `matrix + jitter * I`, starting from `jitter` and escalating by ×10
/// (first escalation to `JITTER_START * scale`) until it succeeds or exceeds
/// `JITTER_CAP * scale`.
pub fn cholesky_with_jitter(
    matrix: &DMatrix<f64>,
    jitter: f64,
    scale: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if jitter < 0.0 || !jitter.is_finite() {
        return Err(Error::input(format!("jitter must be >= 0, got {jitter}")));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical { message: "matrix has non-finite entries".into(), jitter });
    }
    let cap = JITTER_CAP * scale;
    let mut current = jitter;
    loop {
        let mut m = matrix.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += current;
        }
        if let Some(ch) = Cholesky::new(m) {
            return Ok((ch, current));
        }
        let next = if current < JITTER_START * scale { JITTER_START * scale } else { current * 10.0 };
        if next > cap * (1.0 + 1e-12) || next == 0.0 {
            return Err(Error::Numerical {
                message: format!("Cholesky failed for {}x{} matrix", matrix.nrows(), matrix.ncols()),
                jitter: current,
            });
        }
        current = next;
    }
}

pub fn gram(spec: &KernelSpec, points: &Points, jitter: f64) -> Result<GramMatrix> {
    if points.is_empty() {
        return Err(Error::input("gram needs at least one point"));
    }
    let values = gram_values(spec, points);
    let (cholesky_factor, jitter_applied) = cholesky_with_jitter(&values, jitter, spec.variance)?;
    Ok(GramMatrix { values, jitter_applied, cholesky_factor })
}
