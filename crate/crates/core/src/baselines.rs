//! Kernel ridge base learners and the competing ensemble methods: simple
//! averaging, simplex-constrained stacking, linear stacking, additive spline
//! stacking and a linear stack with a smoothing spline in the inputs.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{BaseModelSet, PredictiveDistribution};
use crate::error::{Error, Result};
use crate::kernels::{cholesky_with_jitter, cross_matrix, gram_values, KernelSpec};
use crate::points::Points;

pub const BASE_LENGTH_SCALES: [f64; 4] = [0.2, 0.1, 0.02, 0.01];
pub const BASE_RIDGE: f64 = 1e-3;
pub const DEFAULT_FOLDS: usize = 5;
pub const SEARCH_CANDIDATES: usize = 1000;
const COLLINEAR_RIDGE: f64 = 1e-8;
const SPLINE_RIDGE: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Base learners

/// Kernel ridge regressor on centred targets: `f(x) = ȳ + k(x, X) α`,
/// `α = (K + ridge I)⁻¹ (y − ȳ)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelRidge {
    pub kernel: KernelSpec,
    pub train_x: Points,
    pub alpha: Vec<f64>,
    pub offset: f64,
}

impl KernelRidge {
    pub fn fit(x: &Points, y: &[f64], kernel: KernelSpec, ridge: f64) -> Result<Self> {
        if x.len() != y.len() || y.is_empty() {
            return Err(Error::input("kernel ridge needs matching non-empty x and y"));
        }
        if !(ridge >= 0.0) {
            return Err(Error::input("ridge must be >= 0"));
        }
        let offset = y.iter().sum::<f64>() / y.len() as f64;
        let mut k = gram_values(&kernel, x);
        for i in 0..k.nrows() {
            k[(i, i)] += ridge;
        }
        let (chol, _) = cholesky_with_jitter(&k, 0.0, kernel.variance)?;
        let alpha = chol.solve(&DVector::from_iterator(y.len(), y.iter().map(|v| v - offset)));
        Ok(Self { kernel, train_x: x.clone(), alpha: alpha.iter().copied().collect(), offset })
    }

    pub fn predict(&self, x: &Points) -> Vec<f64> {
        let kx = cross_matrix(&self.kernel, x, &self.train_x);
        let a = DVector::from_column_slice(&self.alpha);
        (kx * a).iter().map(|v| v + self.offset).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaseModels {
    pub names: Vec<String>,
    pub models: Vec<KernelRidge>,
}

impl BaseModels {
    pub fn predict(&self, x: &Points) -> Result<BaseModelSet> {
        let cols: Vec<Vec<f64>> = self.models.iter().map(|m| m.predict(x)).collect();
        BaseModelSet::new(self.names.clone(), DMatrix::from_fn(cols.len(), x.len(), |k, i| cols[k][i]))
    }
}

/// One RBF kernel ridge model per length-scale. `train` holds either one
/// training set shared by all models or one set per model.
pub fn fit_base_models(train: &[(Points, Vec<f64>)], length_scales: &[f64], ridge: f64) -> Result<BaseModels> {
    if length_scales.is_empty() {
        return Err(Error::input("need at least one length-scale"));
    }
    if train.len() != 1 && train.len() != length_scales.len() {
        return Err(Error::input("provide one training set or one per length-scale"));
    }
    let models = length_scales
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            let (x, y) = &train[if train.len() == 1 { 0 } else { k }];
            KernelRidge::fit(x, y, KernelSpec::rbf(l), ridge)
        })
        .collect::<Result<Vec<_>>>()?;
    let names = length_scales.iter().map(|l| format!("krr_l{l}")).collect();
    Ok(BaseModels { names, models })
}

// ---------------------------------------------------------------------------
// Stacks

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackWeights {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub constrained: bool,
}

impl StackWeights {
    pub fn predict(&self, bases: &BaseModelSet) -> Result<Vec<f64>> {
        if bases.k() != self.weights.len() {
            return Err(Error::input("base model count differs from the stack"));
        }
        Ok((0..bases.n())
            .map(|i| self.intercept + self.weights.iter().enumerate().map(|(k, w)| w * bases.predictions[(k, i)]).sum::<f64>())
            .collect())
    }
}

pub fn avg_ensemble(preds: &DMatrix<f64>) -> Vec<f64> {
    let k = preds.nrows() as f64;
    preds.column_iter().map(|c| c.sum() / k).collect()
}

/// Seeded shuffle, then round-robin fold labels.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::input("need at least 2 folds"));
    }
    if n < folds {
        return Err(Error::input(format!("{n} rows leave at least one of {folds} folds empty")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut label = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        label[i] = pos % folds;
    }
    Ok(label)
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    let w: Vec<f64> = v.iter().map(|x| (x - theta).max(0.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

/// Summed held-out squared error over the folds for fixed weights.
pub fn cv_stack_objective(y: &[f64], bases: &BaseModelSet, labels: &[usize], folds: usize, w: &[f64]) -> f64 {
    (0..folds)
        .map(|f| {
            (0..y.len())
                .filter(|&i| labels[i] == f)
                .map(|i| {
                    let p: f64 = w.iter().enumerate().map(|(k, wk)| wk * bases.predictions[(k, i)]).sum();
                    (y[i] - p).powi(2)
                })
                .sum::<f64>()
        })
        .sum()
}

/// Simplex weights minimising the out-of-fold squared error. The base models
/// are trained on separate data, so their predictions on each held-out fold
/// are already out-of-fold; projected gradient descent starts from uniform.
pub fn cv_stack(y: &[f64], bases: &BaseModelSet, folds: usize, seed: u64) -> Result<StackWeights> {
    check_stack_input(y, bases)?;
    let labels = fold_assignment(y.len(), folds, seed)?;
    let k = bases.k();
    let f = &bases.predictions;
    let fft = f * f.transpose();
    let lipschitz = 2.0 * fft.symmetric_eigenvalues().max().max(1e-300);
    let step = 1.0 / lipschitz;
    let yv = DVector::from_column_slice(y);
    let fy = f * &yv;
    let mut w = DVector::from_element(k, 1.0 / k as f64);
    for _ in 0..200_000 {
        let grad = 2.0 * (&fft * &w - &fy);
        let next = DVector::from_vec(project_simplex((&w - step * grad).as_slice()));
        let delta = (&next - &w).amax();
        w = next;
        if delta < 1e-14 {
            break;
        }
    }
    let weights: Vec<f64> = w.iter().copied().collect();
    debug_assert!(cv_stack_objective(y, bases, &labels, folds, &weights).is_finite());
    Ok(StackWeights { weights, intercept: 0.0, constrained: true })
}

fn check_stack_input(y: &[f64], bases: &BaseModelSet) -> Result<()> {
    if bases.n() != y.len() {
        return Err(Error::input("base predictions and targets differ in length"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("targets must be finite"));
    }
    Ok(())
}

/// Least squares with a ridge fallback on numerical rank deficiency.
fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let svd = x.clone().svd(true, true);
    let sv = &svd.singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if smax > 0.0 && smin / smax > 1e-10 {
        if let Ok(b) = svd.solve(y, 0.0) {
            return b;
        }
    }
    let mut a = x.transpose() * x;
    for i in 0..a.nrows() {
        a[(i, i)] += COLLINEAR_RIDGE;
    }
    let rhs = x.transpose() * y;
    match cholesky_with_jitter(&a, 0.0, 1.0) {
        Ok((ch, _)) => ch.solve(&rhs),
        Err(_) => DVector::zeros(x.ncols()),
    }
}

fn design_with_intercept(bases: &BaseModelSet) -> DMatrix<f64> {
    DMatrix::from_fn(bases.n(), bases.k() + 1, |i, c| if c == 0 { 1.0 } else { bases.predictions[(c - 1, i)] })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearStack {
    pub weights: StackWeights,
    pub residual_var: f64,
}

impl LinearStack {
    pub fn predict(&self, bases: &BaseModelSet) -> Result<Vec<f64>> {
        self.weights.predict(bases)
    }
}

/// OLS with intercept; the predictive variance is the unbiased residual variance.
pub fn lnr_stack(y: &[f64], bases: &BaseModelSet) -> Result<LinearStack> {
    check_stack_input(y, bases)?;
    let (n, k) = (y.len(), bases.k());
    if n <= k + 1 {
        return Err(Error::input(format!("linear stacking needs N > K + 1, got N={n}, K={k}")));
    }
    let x = design_with_intercept(bases);
    let yv = DVector::from_column_slice(y);
    let beta = least_squares(&x, &yv);
    let rss = (&yv - &x * &beta).norm_squared();
    Ok(LinearStack {
        weights: StackWeights { weights: beta.iter().skip(1).copied().collect(), intercept: beta[0], constrained: false },
        residual_var: rss / (n - k - 1) as f64,
    })
}

// ---------------------------------------------------------------------------
// Penalised B-splines

/// Cubic (by default) B-spline on evenly spaced knots, extended linearly
/// beyond its boundary knots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineModel {
    pub knots: Vec<f64>,
    pub degree: usize,
    pub coefficients: Vec<f64>,
    pub penalty: f64,
}

/// `count` evenly spaced knots on `[lo, hi]`, continued `degree` steps past
/// each end so that the second-difference penalty's null space is exactly the
/// linear functions.
pub fn uniform_knots(lo: f64, hi: f64, count: usize, degree: usize) -> Result<Vec<f64>> {
    if count < 2 || !(hi > lo) {
        return Err(Error::input("need at least 2 knots on a non-degenerate interval"));
    }
    let h = (hi - lo) / (count - 1) as f64;
    Ok((0..count + 2 * degree).map(|j| lo + (j as f64 - degree as f64) * h).collect())
}

pub fn basis_size(knots: &[f64], degree: usize) -> usize {
    knots.len() - degree - 1
}

fn find_span(knots: &[f64], degree: usize, x: f64) -> usize {
    let n = basis_size(knots, degree);
    if x >= knots[n] {
        return n - 1;
    }
    let (mut lo, mut hi) = (degree, n);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if x < knots[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// All basis functions at `x ∈ [t_p, t_n]` (Cox–de Boor).
pub fn bspline_basis(knots: &[f64], degree: usize, x: f64) -> Vec<f64> {
    let n = basis_size(knots, degree);
    let span = find_span(knots, degree, x);
    let mut nvals = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    nvals[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom != 0.0 { nvals[r] / denom } else { 0.0 };
            nvals[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        nvals[j] = saved;
    }
    let mut out = vec![0.0; n];
    for (j, v) in nvals.into_iter().enumerate() {
        out[span - degree + j] = v;
    }
    out
}

/// First derivatives of all basis functions at `x`.
pub fn bspline_basis_derivative(knots: &[f64], degree: usize, x: f64) -> Vec<f64> {
    let n = basis_size(knots, degree);
    if degree == 0 {
        return vec![0.0; n];
    }
    let lower = bspline_basis(knots, degree - 1, x);
    let p = degree as f64;
    let term = |i: usize| {
        let d = knots[i + degree] - knots[i];
        if d > 0.0 { lower[i] / d } else { 0.0 }
    };
    (0..n).map(|i| p * (term(i) - term(i + 1))).collect()
}

/// Design row with linear continuation outside `[lo, hi]`.
pub fn spline_design_row(knots: &[f64], degree: usize, x: f64) -> Vec<f64> {
    let n = basis_size(knots, degree);
    let (lo, hi) = (knots[degree], knots[n]);
    if x >= lo && x <= hi {
        return bspline_basis(knots, degree, x);
    }
    let edge = if x < lo { lo } else { hi };
    let dx = x - edge;
    bspline_basis(knots, degree, edge)
        .into_iter()
        .zip(bspline_basis_derivative(knots, degree, edge))
        .map(|(b, d)| b + d * dx)
        .collect()
}

impl SplineModel {
    pub fn eval(&self, x: f64) -> f64 {
        spline_design_row(&self.knots, self.degree, x).iter().zip(&self.coefficients).map(|(b, c)| b * c).sum()
    }

    pub fn basis_len(&self) -> usize {
        basis_size(&self.knots, self.degree)
    }
}

/// `Dᵀ D` for the second-order difference operator on `n` coefficients.
pub fn second_difference_penalty(n: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(n, n);
    for r in 0..n.saturating_sub(2) {
        let d = [(r, 1.0), (r + 1, -2.0), (r + 2, 1.0)];
        for &(a, va) in &d {
            for &(b, vb) in &d {
                p[(a, b)] += va * vb;
            }
        }
    }
    p
}

struct PenalisedFit {
    beta: DVector<f64>,
    edf: f64,
    rss: f64,
}

fn penalised_ls(x: &DMatrix<f64>, y: &DVector<f64>, pen: &DMatrix<f64>) -> Result<PenalisedFit> {
    let xtx = x.transpose() * x;
    let a = &xtx + pen;
    let scale = (a.trace() / a.nrows() as f64).max(1e-12);
    let (ch, _) = cholesky_with_jitter(&a, 0.0, scale)?;
    let beta = ch.solve(&(x.transpose() * y));
    let edf = ch.solve(&xtx).trace();
    let rss = (y - x * &beta).norm_squared();
    Ok(PenalisedFit { beta, edf, rss })
}

/// A block of spline columns: one variable, its knots and penalty.
#[derive(Clone, Debug)]
struct SplineBlock {
    knots: Vec<f64>,
}

impl SplineBlock {
    fn new(values: &[f64], knot_count: usize) -> Result<Self> {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        Ok(Self { knots: uniform_knots(lo, hi, knot_count, 3)? })
    }

    fn len(&self) -> usize {
        basis_size(&self.knots, 3)
    }
}

/// Design `[1 | linear columns | spline blocks]` and its penalty.
fn build_design(
    rows: usize,
    linear: &[&[f64]],
    blocks: &[(&SplineBlock, &[f64])],
    penalty: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = 1 + linear.len() + blocks.iter().map(|(b, _)| b.len()).sum::<usize>();
    let mut x = DMatrix::zeros(rows, p);
    let mut pen = DMatrix::zeros(p, p);
    for i in 0..rows {
        x[(i, 0)] = 1.0;
        for (c, col) in linear.iter().enumerate() {
            x[(i, 1 + c)] = col[i];
        }
    }
    let mut off = 1 + linear.len();
    for (block, values) in blocks {
        let n = block.len();
        for i in 0..rows {
            for (j, v) in spline_design_row(&block.knots, 3, values[i]).into_iter().enumerate() {
                x[(i, off + j)] = v;
            }
        }
        let d = second_difference_penalty(n);
        for a in 0..n {
            for b in 0..n {
                pen[(off + a, off + b)] = penalty * d[(a, b)];
            }
            pen[(off + a, off + a)] += SPLINE_RIDGE;
        }
        off += n;
    }
    (x, pen)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineHyper {
    pub knot_count: usize,
    pub penalty: f64,
}

/// `count` random `(knots ∈ [4, 20], penalty log-uniform on [1e-6, 1e2])` draws.
pub fn random_hyper_candidates(count: usize, seed: u64) -> Vec<SplineHyper> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| SplineHyper { knot_count: rng.random_range(4..=20), penalty: 10f64.powf(rng.random_range(-6.0..=2.0)) })
        .collect()
}

/// Index of the smallest finite score, first on ties.
fn argmin(scores: &[f64]) -> Option<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_finite())
        .fold(None, |best: Option<(usize, f64)>, (i, &s)| match best {
            Some((_, b)) if b <= s => best,
            _ => Some((i, s)),
        })
        .map(|(i, _)| i)
}

fn cv_search<F>(n: usize, folds: usize, seed: u64, candidates: &[SplineHyper], fold_error: F) -> Result<(SplineHyper, f64)>
where
    F: Fn(&SplineHyper, &[usize], &[usize]) -> Result<f64> + Sync,
{
    let labels = fold_assignment(n, folds, seed)?;
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..folds)
        .map(|f| ((0..n).filter(|&i| labels[i] != f).collect(), (0..n).filter(|&i| labels[i] == f).collect()))
        .collect();
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|h| {
            splits
                .iter()
                .map(|(tr, te)| fold_error(h, tr, te))
                .sum::<Result<f64>>()
                .unwrap_or(f64::INFINITY)
        })
        .collect();
    let best = argmin(&scores).ok_or_else(|| Error::Numerical { message: "no spline candidate could be fitted".into(), jitter: 0.0 })?;
    Ok((candidates[best], scores[best]))
}

fn pick(values: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| values[i]).collect()
}

fn base_columns(bases: &BaseModelSet) -> Vec<Vec<f64>> {
    (0..bases.k()).map(|k| bases.predictions.row(k).iter().copied().collect()).collect()
}

/// Additive penalised spline stack `y = β₀ + Σ_k s_k(f̂_k)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdditiveSplineStack {
    pub intercept: f64,
    pub splines: Vec<SplineModel>,
    pub hyper: SplineHyper,
    pub residual_var: f64,
    pub cv_error: f64,
}

impl AdditiveSplineStack {
    pub fn predict(&self, bases: &BaseModelSet) -> Result<Vec<f64>> {
        if bases.k() != self.splines.len() {
            return Err(Error::input("base model count differs from the stack"));
        }
        Ok((0..bases.n())
            .map(|i| self.intercept + self.splines.iter().enumerate().map(|(k, s)| s.eval(bases.predictions[(k, i)])).sum::<f64>())
            .collect())
    }
}

fn fit_additive(cols: &[Vec<f64>], y: &[f64], hyper: SplineHyper) -> Result<(AdditiveSplineStack, f64)> {
    let blocks = cols.iter().map(|c| SplineBlock::new(c, hyper.knot_count)).collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(&SplineBlock, &[f64])> = blocks.iter().zip(cols).map(|(b, c)| (b, c.as_slice())).collect();
    let (x, pen) = build_design(y.len(), &[], &pairs, hyper.penalty);
    let fit = penalised_ls(&x, &DVector::from_column_slice(y), &pen)?;
    let mut off = 1;
    let splines = blocks
        .iter()
        .map(|b| {
            let c = fit.beta.rows(off, b.len()).iter().copied().collect();
            off += b.len();
            SplineModel { knots: b.knots.clone(), degree: 3, coefficients: c, penalty: hyper.penalty }
        })
        .collect();
    let dof = (y.len() as f64 - fit.edf).max(1.0);
    Ok((
        AdditiveSplineStack { intercept: fit.beta[0], splines, hyper, residual_var: fit.rss / dof, cv_error: f64::NAN },
        fit.edf,
    ))
}

pub fn nlr_stack_with(y: &[f64], bases: &BaseModelSet, hyper: SplineHyper) -> Result<AdditiveSplineStack> {
    check_stack_input(y, bases)?;
    Ok(fit_additive(&base_columns(bases), y, hyper)?.0)
}

/// Random search over `candidates` by K-fold CV, then a refit on all rows.
pub fn nlr_stack(y: &[f64], bases: &BaseModelSet, candidates: &[SplineHyper], folds: usize, seed: u64) -> Result<AdditiveSplineStack> {
    check_stack_input(y, bases)?;
    if y.len() < 10 {
        return Err(Error::input("spline stacking needs N >= 10"));
    }
    let cols = base_columns(bases);
    let (hyper, cv_error) = cv_search(y.len(), folds, seed, candidates, |h, tr, te| {
        let train_cols: Vec<Vec<f64>> = cols.iter().map(|c| pick(c, tr)).collect();
        let (model, _) = fit_additive(&train_cols, &pick(y, tr), *h)?;
        let test = bases.select_columns(te);
        Ok(model.predict(&test)?.iter().zip(te).map(|(p, &i)| (y[i] - p).powi(2)).sum())
    })?;
    let mut model = fit_additive(&cols, y, hyper)?.0;
    model.cv_error = cv_error;
    Ok(model)
}

/// Linear stack plus a centred smoothing spline in each input coordinate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GamFit {
    pub stack: StackWeights,
    /// One spline per input dimension; each is centred over the training inputs.
    pub splines: Vec<SplineModel>,
    pub hyper: SplineHyper,
    pub residual_var: f64,
    pub cycles: usize,
    pub converged: bool,
    pub cv_error: f64,
}

impl GamFit {
    pub fn spline_part(&self, x: &Points) -> Vec<f64> {
        x.iter().map(|p| self.splines.iter().enumerate().map(|(d, s)| s.eval(p[d])).sum()).collect()
    }

    pub fn predict(&self, x: &Points, bases: &BaseModelSet) -> Result<Vec<f64>> {
        if x.len() != bases.n() {
            return Err(Error::input("inputs and base predictions differ in length"));
        }
        Ok(self.stack.predict(bases)?.iter().zip(self.spline_part(x)).map(|(a, b)| a + b).collect())
    }
}

fn gam_blocks(x: &Points, knot_count: usize) -> Result<Vec<SplineBlock>> {
    (0..x.dim()).map(|d| SplineBlock::new(&x.coord(d), knot_count)).collect()
}

/// Direct solve of the joint penalised normal equations.
fn gam_joint(x: &Points, cols: &[Vec<f64>], y: &[f64], hyper: SplineHyper) -> Result<(GamFit, f64)> {
    let blocks = gam_blocks(x, hyper.knot_count)?;
    let coords: Vec<Vec<f64>> = (0..x.dim()).map(|d| x.coord(d)).collect();
    let lin: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
    let pairs: Vec<(&SplineBlock, &[f64])> = blocks.iter().zip(&coords).map(|(b, c)| (b, c.as_slice())).collect();
    let (design, pen) = build_design(y.len(), &lin, &pairs, hyper.penalty);
    let fit = penalised_ls(&design, &DVector::from_column_slice(y), &pen)?;
    let k = cols.len();
    let mut off = 1 + k;
    let mut splines: Vec<SplineModel> = blocks
        .iter()
        .map(|b| {
            let c = fit.beta.rows(off, b.len()).iter().copied().collect();
            off += b.len();
            SplineModel { knots: b.knots.clone(), degree: 3, coefficients: c, penalty: hyper.penalty }
        })
        .collect();
    let mut intercept = fit.beta[0];
    for (s, c) in splines.iter_mut().zip(&coords) {
        intercept += center_spline(s, c);
    }
    let stack = StackWeights { weights: fit.beta.rows(1, k).iter().copied().collect(), intercept, constrained: false };
    let dof = (y.len() as f64 - fit.edf).max(1.0);
    Ok((
        GamFit { stack, splines, hyper, residual_var: fit.rss / dof, cycles: 0, converged: true, cv_error: f64::NAN },
        fit.edf,
    ))
}

/// Shifts the spline to zero mean over `values`; returns the removed mean.
/// B-splines partition unity, so a constant shift moves every coefficient.
fn center_spline(s: &mut SplineModel, values: &[f64]) -> f64 {
    let m = values.iter().map(|&v| s.eval(v)).sum::<f64>() / values.len() as f64;
    for c in s.coefficients.iter_mut() {
        *c -= m;
    }
    m
}

fn fit_spline_smoother(blocks: &[SplineBlock], coords: &[Vec<f64>], r: &[f64], penalty: f64) -> Result<(Vec<SplineModel>, f64)> {
    let pairs: Vec<(&SplineBlock, &[f64])> = blocks.iter().zip(coords).map(|(b, c)| (b, c.as_slice())).collect();
    let (design, pen) = build_design(r.len(), &[], &pairs, penalty);
    let fit = penalised_ls(&design, &DVector::from_column_slice(r), &pen)?;
    let mut off = 1;
    let mut splines: Vec<SplineModel> = blocks
        .iter()
        .map(|b| {
            let c = fit.beta.rows(off, b.len()).iter().copied().collect();
            off += b.len();
            SplineModel { knots: b.knots.clone(), degree: 3, coefficients: c, penalty }
        })
        .collect();
    for (s, c) in splines.iter_mut().zip(coords) {
        center_spline(s, c);
    }
    Ok((splines, fit.edf - 1.0))
}

fn flat_coefficients(g: &GamFit) -> Vec<f64> {
    std::iter::once(g.stack.intercept)
        .chain(g.stack.weights.iter().copied())
        .chain(g.splines.iter().flat_map(|s| s.coefficients.iter().copied()))
        .collect()
}

/// One backfitting cycle: OLS of `y − s(x)` on the bases, then the spline
/// smoother on the remaining residual.
fn backfit_cycle(g: &GamFit, x: &Points, bases: &BaseModelSet, y: &[f64], blocks: &[SplineBlock]) -> Result<(GamFit, f64)> {
    let s = g.spline_part(x);
    let partial: Vec<f64> = y.iter().zip(&s).map(|(a, b)| a - b).collect();
    let lin = lnr_fit_unchecked(&partial, bases);
    let lin_pred = lin.predict(bases)?;
    let r: Vec<f64> = y.iter().zip(&lin_pred).map(|(a, b)| a - b).collect();
    let coords: Vec<Vec<f64>> = (0..x.dim()).map(|d| x.coord(d)).collect();
    let (splines, edf) = fit_spline_smoother(blocks, &coords, &r, g.hyper.penalty)?;
    let mut next = GamFit { stack: lin, splines, ..g.clone() };
    let rss: f64 = next.predict(x, bases)?.iter().zip(y).map(|(p, t)| (t - p).powi(2)).sum();
    let dof = (y.len() as f64 - (bases.k() + 1) as f64 - edf).max(1.0);
    next.residual_var = rss / dof;
    Ok((next, rss))
}

fn lnr_fit_unchecked(y: &[f64], bases: &BaseModelSet) -> StackWeights {
    let beta = least_squares(&design_with_intercept(bases), &DVector::from_column_slice(y));
    StackWeights { weights: beta.iter().skip(1).copied().collect(), intercept: beta[0], constrained: false }
}

pub const BACKFIT_MAX_CYCLES: usize = 50;
pub const BACKFIT_TOL: f64 = 1e-8;

/// Backfitting from the joint penalised solution until the coefficients move
/// by less than the tolerance. Non-convergence leaves `converged = false` and
/// returns the iterate with the smallest residual sum of squares.
pub fn gam_with(x: &Points, y: &[f64], bases: &BaseModelSet, hyper: SplineHyper) -> Result<GamFit> {
    check_stack_input(y, bases)?;
    if x.len() != y.len() {
        return Err(Error::input("inputs and targets differ in length"));
    }
    let blocks = gam_blocks(x, hyper.knot_count)?;
    let (mut current, _) = gam_joint(x, &base_columns(bases), y, hyper)?;
    let mut best = current.clone();
    let mut best_rss = f64::INFINITY;
    current.converged = false;
    for cycle in 1..=BACKFIT_MAX_CYCLES {
        let (next, rss) = backfit_cycle(&current, x, bases, y, &blocks)?;
        let change = flat_coefficients(&next)
            .iter()
            .zip(flat_coefficients(&current))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        current = next;
        current.cycles = cycle;
        if rss < best_rss {
            best_rss = rss;
            best = current.clone();
        }
        if change < BACKFIT_TOL {
            current.converged = true;
            return Ok(current);
        }
    }
    if !current.converged {
        log::warn!("gam backfitting did not converge in {BACKFIT_MAX_CYCLES} cycles");
    }
    best.converged = false;
    Ok(best)
}

pub fn gam_ensemble(
    x: &Points,
    y: &[f64],
    bases: &BaseModelSet,
    candidates: &[SplineHyper],
    folds: usize,
    seed: u64,
) -> Result<GamFit> {
    check_stack_input(y, bases)?;
    if y.len() <= bases.k() + 1 {
        return Err(Error::input("gam needs N > K + 1"));
    }
    let cols = base_columns(bases);
    let (hyper, cv_error) = cv_search(y.len(), folds, seed, candidates, |h, tr, te| {
        let train_cols: Vec<Vec<f64>> = cols.iter().map(|c| pick(c, tr)).collect();
        let (model, _) = gam_joint(&x.select(tr), &train_cols, &pick(y, tr), *h)?;
        let pred = model.predict(&x.select(te), &bases.select_columns(te))?;
        Ok(pred.iter().zip(te).map(|(p, &i)| (y[i] - p).powi(2)).sum())
    })?;
    let mut fit = gam_with(x, y, bases, hyper)?;
    fit.cv_error = cv_error;
    Ok(fit)
}

/// Homoscedastic Gaussian predictive from a residual variance.
pub fn gaussian_predictive(mean: &[f64], residual_var: f64, y_grid: &[f64]) -> Result<PredictiveDistribution> {
    if !(residual_var >= 0.0) {
        return Err(Error::input("residual variance must be >= 0"));
    }
    PredictiveDistribution::gaussian(mean, &vec![residual_var.sqrt(); mean.len()], y_grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bases_from(rows: Vec<Vec<f64>>) -> BaseModelSet {
        let k = rows.len();
        let n = rows[0].len();
        BaseModelSet::new((0..k).map(|i| format!("m{i}")).collect(), DMatrix::from_fn(k, n, |a, b| rows[a][b])).unwrap()
    }

    fn rng_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.random::<f64>()).collect()
    }

    #[test]
    fn kernel_ridge_interpolates_and_keeps_constants() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64 / 9.0).collect();
        let x = Points::from_1d(&xs);
        let y: Vec<f64> = xs.iter().map(|v| (3.0 * v).sin()).collect();
        let m = KernelRidge::fit(&x, &y, KernelSpec::rbf(0.01), 1e-12).unwrap();
        for (p, t) in m.predict(&x).iter().zip(&y) {
            assert!((p - t).abs() < 1e-6);
        }
        let c = KernelRidge::fit(&x, &vec![2.5; 10], KernelSpec::rbf(0.2), 1e-3).unwrap();
        let grid = Points::from_1d(&rng_vec(50, 1));
        assert!(c.predict(&grid).iter().all(|p| (p - 2.5).abs() <= 1e-3 * 2.5));
    }

    #[test]
    fn smoother_base_model_has_less_variation() {
        let d = crate::data::synth_1d(20, 3, crate::data::NoiseKind::Input).unwrap();
        let models = fit_base_models(&[(d.inputs.clone(), d.targets.clone())], &[0.2, 0.02], BASE_RIDGE).unwrap();
        let grid = crate::data::validation_1d(500, 0, crate::data::NoiseKind::Input).unwrap().inputs;
        let preds = models.predict(&grid).unwrap();
        let tv = |k: usize| preds.predictions.row(k).iter().collect::<Vec<_>>().windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>();
        assert!(tv(0) < tv(1));
    }

    #[test]
    fn averaging_examples() {
        assert_eq!(avg_ensemble(&DMatrix::from_row_slice(2, 1, &[1.0, 3.0])), vec![2.0]);
        let same = DMatrix::from_fn(3, 4, |_, j| j as f64 * 0.7);
        for (j, a) in avg_ensemble(&same).iter().enumerate() {
            assert!((a - same[(0, j)]).abs() < 1e-15);
        }
        let r = rng_vec(40, 2);
        let m = DMatrix::from_row_slice(4, 10, &r);
        let avg = avg_ensemble(&m);
        for j in 0..10 {
            let expect = (0..4).map(|i| r[i * 10 + j]).sum::<f64>() / 4.0;
            assert!((avg[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn cv_stack_recovers_the_true_model() {
        let n = 40;
        let truth: Vec<f64> = rng_vec(n, 5).iter().map(|v| 3.0 * v).collect();
        let mut rows = vec![truth.clone()];
        for s in 0..3 {
            rows.push(rng_vec(n, 10 + s).iter().map(|v| 3.0 * v).collect());
        }
        let b = bases_from(rows);
        let w = cv_stack(&truth, &b, 5, 0).unwrap();
        assert!(w.weights[0] >= 0.95, "{:?}", w.weights);
        assert!(w.weights.iter().all(|&v| v >= 0.0));
        assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cv_stack_ties_and_local_optimality() {
        let f = rng_vec(20, 1);
        let y = rng_vec(20, 2);
        let b = bases_from(vec![f.clone(), f.clone(), f]);
        let w = cv_stack(&y, &b, 5, 0).unwrap();
        for v in &w.weights {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let b = bases_from(vec![rng_vec(20, 3), rng_vec(20, 4), rng_vec(20, 5)]);
        let w = cv_stack(&y, &b, 5, 0).unwrap();
        let labels = fold_assignment(20, 5, 0).unwrap();
        let obj = |w: &[f64]| cv_stack_objective(&y, &b, &labels, 5, w);
        let at = obj(&w.weights);
        assert!(at <= obj(&[1.0 / 3.0; 3]) + 1e-12);
        for k in 0..3 {
            let mut e = [0.0; 3];
            e[k] = 1.0;
            assert!(at <= obj(&e) + 1e-12);
        }
        assert!(cv_stack(&y[..3], &bases_from(vec![vec![0.0; 3]]), 5, 0).is_err());
    }

    #[test]
    fn lnr_stack_examples() {
        let f1 = rng_vec(15, 1);
        let f2 = rng_vec(15, 2);
        let y: Vec<f64> = f1.iter().map(|v| 2.0 * v).collect();
        let s = lnr_stack(&y, &bases_from(vec![f1.clone(), f2.clone()])).unwrap();
        assert!((s.weights.weights[0] - 2.0).abs() < 1e-8);
        assert!(s.weights.weights[1].abs() < 1e-8);
        assert!(s.weights.intercept.abs() < 1e-8);
        let s = lnr_stack(&y, &bases_from(vec![f1.clone(), f1.clone()])).unwrap();
        assert!(s.weights.weights.iter().all(|w| w.is_finite()));
        // independent normal-equation recomputation
        let noisy: Vec<f64> = y.iter().zip(&f2).map(|(a, b)| a + 0.3 * b * b).collect();
        let s = lnr_stack(&noisy, &bases_from(vec![f1.clone(), f2.clone()])).unwrap();
        let x = DMatrix::from_fn(15, 3, |i, c| match c {
            0 => 1.0,
            1 => f1[i],
            _ => f2[i],
        });
        let yv = DVector::from_column_slice(&noisy);
        let beta = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &yv;
        let var = (&yv - &x * beta).norm_squared() / 12.0;
        assert!((s.residual_var - var).abs() < 1e-10);
    }

    #[test]
    fn bspline_partition_of_unity() {
        let t = uniform_knots(-1.0, 2.0, 7, 3).unwrap();
        for i in 0..=100 {
            let x = -1.0 + 3.0 * i as f64 / 100.0;
            let s: f64 = bspline_basis(&t, 3, x).iter().sum();
            assert!((s - 1.0).abs() < 1e-10);
        }
        assert!(t.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn spline_extends_linearly() {
        let t = uniform_knots(0.0, 1.0, 6, 3).unwrap();
        let s = SplineModel { knots: t.clone(), degree: 3, coefficients: rng_vec(basis_size(&t, 3), 9), penalty: 0.0 };
        let h = 1e-5;
        let slope = (-3.0 * s.eval(0.0) + 4.0 * s.eval(h) - s.eval(2.0 * h)) / (2.0 * h);
        assert!((s.eval(-0.5) - (s.eval(0.0) - 0.5 * slope)).abs() < 1e-6);
        let slope = (3.0 * s.eval(1.0) - 4.0 * s.eval(1.0 - h) + s.eval(1.0 - 2.0 * h)) / (2.0 * h);
        assert!((s.eval(1.3) - (s.eval(1.0) + 0.3 * slope)).abs() < 1e-6);
    }

    #[test]
    fn nlr_recovers_linear_map_and_penalty_limit() {
        let f1: Vec<f64> = rng_vec(30, 1).iter().map(|v| 4.0 * v - 1.0).collect();
        let f2 = rng_vec(30, 2);
        let y: Vec<f64> = f1.iter().map(|v| 0.5 + 1.5 * v).collect();
        let b = bases_from(vec![f1.clone(), f2.clone()]);
        let cands = random_hyper_candidates(50, 1);
        let m = nlr_stack(&y, &b, &cands, 5, 0).unwrap();
        let pred = m.predict(&b).unwrap();
        let rms = (pred.iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / 30.0).sqrt();
        assert!(rms < 0.05, "{rms}");
        // heavy penalty: each component is linear in its input
        let curved: Vec<f64> = f1.iter().map(|v| v * v).collect();
        let m = nlr_stack_with(&curved, &b, SplineHyper { knot_count: 8, penalty: 1e8 }).unwrap();
        let s = &m.splines[0];
        let (a, c) = (s.eval(-1.0), s.eval(3.0));
        for i in 0..=20 {
            let x = -1.0 + 4.0 * i as f64 / 20.0;
            let lin = a + (c - a) * (x + 1.0) / 4.0;
            assert!((s.eval(x) - lin).abs() < 1e-3 * (1.0 + lin.abs()));
        }
    }

    #[test]
    fn gam_null_spline_and_fixed_point() {
        let n = 30;
        let xs = rng_vec(n, 4);
        let x = Points::from_1d(&xs);
        let f1 = rng_vec(n, 5);
        let f2 = rng_vec(n, 6);
        let y: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| 0.2 + 1.3 * a - 0.7 * b).collect();
        let b = bases_from(vec![f1, f2]);
        let g = gam_ensemble(&x, &y, &b, &random_hyper_candidates(40, 2), 5, 0).unwrap();
        let sd = crate::stats::sample_sd(&y);
        assert!(g.spline_part(&x).iter().all(|s| s.abs() <= 0.05 * sd));
        assert!(g.converged);
        let blocks = gam_blocks(&x, g.hyper.knot_count).unwrap();
        let (again, _) = backfit_cycle(&g, &x, &b, &y, &blocks).unwrap();
        for (a, c) in flat_coefficients(&again).iter().zip(flat_coefficients(&g)) {
            assert!((a - c).abs() < 1e-8);
        }
    }

    #[test]
    fn gam_with_null_bases_is_spline_regression() {
        let n = 30;
        let xs = rng_vec(n, 7);
        let x = Points::from_1d(&xs);
        let y: Vec<f64> = xs.iter().map(|v| (6.0 * v).sin()).collect();
        let b = bases_from(vec![vec![0.0; n]]);
        let hyper = SplineHyper { knot_count: 10, penalty: 1e-3 };
        let g = gam_with(&x, &y, &b, hyper).unwrap();
        let pred = g.predict(&x, &b).unwrap();
        let rms = (pred.iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!(rms < 0.02, "{rms}");
    }

    #[test]
    fn gaussian_predictive_is_valid() {
        let grid: Vec<f64> = (0..50).map(|i| -3.0 + 0.12 * i as f64).collect();
        let pd = gaussian_predictive(&[0.0, 0.5], 0.25, &grid).unwrap();
        for i in 0..2 {
            let row: Vec<f64> = pd.cdf.row(i).iter().copied().collect();
            assert!(row.windows(2).all(|w| w[1] >= w[0]));
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
