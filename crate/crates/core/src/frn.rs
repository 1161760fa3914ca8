//! The feature map reconstruction head.
//!
//! Each class pools the feature vectors of all its support images into one
//! `kr × d` matrix `S`. A query feature map `Q` (`r × d`) is reconstructed as
//! the ridge-regression optimum `Q̄ = ρ·W̄·S`, and the mean squared
//! reconstruction error over the `r` locations becomes a negative logit.
//!
//! Two algebraically equivalent closed forms are provided:
//!
//! * direct: `Q̄ = ρ·Q·Sᵀ·(S·Sᵀ + λI)⁻¹·S`, which inverts a `kr × kr` system;
//! * Woodbury: `Q̄ = ρ·Q·(Sᵀ·S + λI)⁻¹·Sᵀ·S`, which inverts a `d × d` system.
//!
//! [`choose_formulation`] picks the cheaper one from the shapes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gram, matmul, matmul_nt, Cholesky, GramMode, Matrix, Real};

/// Smallest regularizer ever handed to the solver.
pub const LAMBDA_FLOOR: f64 = 1e-8;

/// One image's `r × d` grid of feature vectors, flattened to rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap<T = f64> {
    values: Matrix<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(values: Matrix<T>) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::Argument(format!(
                "feature map must have r >= 1 and d >= 1, got {}x{}",
                values.rows(),
                values.cols()
            )));
        }
        values.check_finite()?;
        Ok(FeatureMap { values })
    }

    pub fn r(&self) -> usize {
        self.values.rows()
    }

    pub fn d(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.values
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            values: self.values.cast(),
        }
    }
}

/// All support features of one class stacked into a `kr × d` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportPool<T = f64> {
    class_id: usize,
    k: usize,
    r: usize,
    values: Matrix<T>,
}

impl<T: Real> SupportPool<T> {
    /// Row-concatenates `k` feature maps of identical shape.
    pub fn from_maps(class_id: usize, maps: &[FeatureMap<T>]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Argument("support pool needs at least one map".into()))?;
        let (r, d) = (first.r(), first.d());
        if let Some(bad) = maps.iter().find(|m| m.r() != r || m.d() != d) {
            return Err(Error::Argument(format!(
                "support maps disagree in shape: {r}x{d} vs {}x{}",
                bad.r(),
                bad.d()
            )));
        }
        let parts: Vec<&Matrix<T>> = maps.iter().map(|m| m.values()).collect();
        Ok(SupportPool {
            class_id,
            k: maps.len(),
            r,
            values: Matrix::vstack(&parts)?,
        })
    }

    /// Wraps an already pooled matrix. `values.rows()` must equal `k * r`.
    pub fn from_matrix(class_id: usize, k: usize, r: usize, values: Matrix<T>) -> Result<Self> {
        if k == 0 || r == 0 || values.rows() != k * r || values.cols() == 0 {
            return Err(Error::Argument(format!(
                "pool of {}x{} cannot hold k={k}, r={r}",
                values.rows(),
                values.cols()
            )));
        }
        values.check_finite()?;
        Ok(SupportPool {
            class_id,
            k,
            r,
            values,
        })
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn d(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    /// The `i`-th support image's feature map.
    pub fn map(&self, i: usize) -> FeatureMap<T> {
        FeatureMap {
            values: self.values.slice_rows(i * self.r, self.r),
        }
    }

    pub fn cast<U: Real>(&self) -> SupportPool<U> {
        SupportPool {
            class_id: self.class_id,
            k: self.k,
            r: self.r,
            values: self.values.cast(),
        }
    }
}

/// Which head scalars receive gradient updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnableMask {
    pub alpha: bool,
    pub beta: bool,
    pub gamma: bool,
}

impl Default for LearnableMask {
    fn default() -> Self {
        LearnableMask {
            alpha: true,
            beta: true,
            gamma: true,
        }
    }
}

impl LearnableMask {
    pub fn frozen() -> Self {
        LearnableMask {
            alpha: false,
            beta: false,
            gamma: false,
        }
    }
}

/// The head's three scalars. `λ` and `ρ` are derived as `(kr/d)·e^α` and
/// `e^β` so they stay positive for any finite `α`, `β`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub learnable: LearnableMask,
}

impl HeadParams {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let p = HeadParams {
            alpha,
            beta,
            gamma,
            learnable: LearnableMask::default(),
        };
        p.validate()?;
        Ok(p)
    }

    /// `α = β = 0` and temperature `1/d`.
    pub fn initial(d: usize) -> Self {
        HeadParams {
            alpha: 0.0,
            beta: 0.0,
            gamma: 1.0 / d.max(1) as f64,
            learnable: LearnableMask::default(),
        }
    }

    pub fn with_mask(mut self, learnable: LearnableMask) -> Self {
        self.learnable = learnable;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Argument("alpha and beta must be finite".into()));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::Argument(format!(
                "temperature must be positive, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    pub fn rho(&self) -> f64 {
        self.beta.exp()
    }

    pub fn lambda(&self, k: usize, r: usize, d: usize) -> f64 {
        effective_lambda(self, k, r, d)
    }
}

/// `(k·r/d)·e^α`, floored at [`LAMBDA_FLOOR`].
pub fn effective_lambda(params: &HeadParams, k: usize, r: usize, d: usize) -> f64 {
    lambda_for_rows(params.alpha, k * r, d)
}

pub(crate) fn lambda_for_rows(alpha: f64, support_rows: usize, d: usize) -> f64 {
    let scale = support_rows as f64 / d as f64;
    (scale * alpha.exp()).max(LAMBDA_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    /// Inverts `S·Sᵀ + λI` (`kr × kr`).
    Direct,
    /// Inverts `Sᵀ·S + λI` (`d × d`).
    Woodbury,
}

/// Formulation request, with `Auto` deferring to [`choose_formulation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FormulationChoice {
    #[default]
    Auto,
    Direct,
    Woodbury,
}

impl FormulationChoice {
    pub fn resolve(self, support_rows: usize, d: usize) -> Formulation {
        match self {
            FormulationChoice::Auto => choose_formulation(support_rows, 1, d),
            FormulationChoice::Direct => Formulation::Direct,
            FormulationChoice::Woodbury => Formulation::Woodbury,
        }
    }
}

/// Direct iff `d > k·r`; ties go to Woodbury.
pub fn choose_formulation(k: usize, r: usize, d: usize) -> Formulation {
    if d > k * r {
        Formulation::Direct
    } else {
        Formulation::Woodbury
    }
}

/// A single query's reconstruction against one class.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction<T = f64> {
    pub class_id: usize,
    /// `ρ·W̄·S`, `r × d`.
    pub q_bar: Matrix<T>,
    /// `‖Q − Q̄‖²_F / r`, accumulated in f64.
    pub sq_error: f64,
}

fn check_query_shape<T: Real>(queries: &Matrix<T>, pool: &SupportPool<T>) -> Result<()> {
    if queries.cols() != pool.d() {
        return Err(crate::linalg::LinalgError::Shape {
            op: "reconstruct",
            left: queries.shape(),
            right: pool.values().shape(),
        }
        .into());
    }
    if queries.rows() == 0 || queries.rows() % pool.r() != 0 {
        return Err(Error::Argument(format!(
            "query batch of {} rows is not a whole number of r={} maps",
            queries.rows(),
            pool.r()
        )));
    }
    Ok(())
}

/// `ρ·Q·Sᵀ·(S·Sᵀ + λI)⁻¹·S`, left to right. Rows of `queries` are
/// independent; `queries` may hold any number of stacked maps.
pub fn reconstruct_matrix_direct<T: Real>(
    queries: &Matrix<T>,
    support: &Matrix<T>,
    lambda: f64,
    rho: f64,
) -> Result<Matrix<T>> {
    let weights = ridge_weights(queries, support, lambda)?;
    let q_bar = matmul(&weights, support)?;
    Ok(q_bar.scale(T::from_f64(rho)))
}

/// Minimizer `W̄ = Q·Sᵀ·(S·Sᵀ + λI)⁻¹` of `‖Q − W·S‖² + λ‖W‖²`, one row per
/// query row.
pub fn ridge_weights<T: Real>(queries: &Matrix<T>, support: &Matrix<T>, lambda: f64) -> Result<Matrix<T>> {
    let mut system = gram(support, GramMode::Outer);
    system.add_diagonal(T::from_f64(lambda));
    let chol = Cholesky::factor(&system)?;
    let qst = matmul_nt(queries, support)?;
    Ok(chol.solve_right(&qst)?)
}

/// `ρ·Q·(Sᵀ·S + λI)⁻¹·Sᵀ·S`, right to left.
pub fn reconstruct_matrix_woodbury<T: Real>(
    queries: &Matrix<T>,
    support: &Matrix<T>,
    lambda: f64,
    rho: f64,
) -> Result<Matrix<T>> {
    let sts = gram(support, GramMode::Inner);
    let mut system = sts.clone();
    system.add_diagonal(T::from_f64(lambda));
    let hat = Cholesky::factor(&system)?.solve(&sts)?;
    let q_bar = matmul(queries, &hat)?;
    Ok(q_bar.scale(T::from_f64(rho)))
}

/// Per-map squared error `‖Q − Q̄‖²/r` for a stack of maps, in f64.
pub fn blockwise_sq_error<T: Real>(queries: &Matrix<T>, q_bar: &Matrix<T>, r: usize) -> Vec<f64> {
    let d = queries.cols();
    let q = queries.as_slice();
    let qb = q_bar.as_slice();
    (0..queries.rows() / r)
        .map(|b| {
            let span = b * r * d..(b + 1) * r * d;
            let sum: f64 = q[span.clone()]
                .iter()
                .zip(&qb[span])
                .map(|(&x, &y)| {
                    let diff = x.as_f64() - y.as_f64();
                    diff * diff
                })
                .sum();
            sum / r as f64
        })
        .collect()
}

fn split_reconstructions<T: Real>(
    queries: &Matrix<T>,
    q_bar: Matrix<T>,
    pool: &SupportPool<T>,
) -> Vec<Reconstruction<T>> {
    let r = pool.r();
    let errors = blockwise_sq_error(queries, &q_bar, r);
    errors
        .into_iter()
        .enumerate()
        .map(|(b, sq_error)| Reconstruction {
            class_id: pool.class_id(),
            q_bar: q_bar.slice_rows(b * r, r),
            sq_error,
        })
        .collect()
}

/// Reconstructs each `r`-row map in `queries` via the direct form.
pub fn reconstruct_direct<T: Real>(
    queries: &Matrix<T>,
    pool: &SupportPool<T>,
    params: &HeadParams,
) -> Result<Vec<Reconstruction<T>>> {
    reconstruct(queries, pool, params, Formulation::Direct)
}

/// Reconstructs each `r`-row map in `queries` via the Woodbury form.
pub fn reconstruct_woodbury<T: Real>(
    queries: &Matrix<T>,
    pool: &SupportPool<T>,
    params: &HeadParams,
) -> Result<Vec<Reconstruction<T>>> {
    reconstruct(queries, pool, params, Formulation::Woodbury)
}

pub fn reconstruct<T: Real>(
    queries: &Matrix<T>,
    pool: &SupportPool<T>,
    params: &HeadParams,
    formulation: Formulation,
) -> Result<Vec<Reconstruction<T>>> {
    check_query_shape(queries, pool)?;
    let lambda = lambda_for_rows(params.alpha, pool.values().rows(), pool.d());
    let rho = params.rho();
    let q_bar = match formulation {
        Formulation::Direct => reconstruct_matrix_direct(queries, pool.values(), lambda, rho)?,
        Formulation::Woodbury => reconstruct_matrix_woodbury(queries, pool.values(), lambda, rho)?,
    };
    Ok(split_reconstructions(queries, q_bar, pool))
}

/// Per-class logits and probabilities for one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    /// The distance each logit was derived from.
    pub distances: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ClassScores {
    /// `logit_c = −γ·distance_c / normalizer`.
    pub fn from_distances(distances: Vec<f64>, gamma: f64, normalizer: f64) -> Self {
        let logits: Vec<f64> = distances.iter().map(|&e| -gamma * e / normalizer).collect();
        let probs = softmax(&logits);
        ClassScores {
            distances,
            logits,
            probs,
        }
    }

    /// Index of the largest logit; the first one wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.logits)
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Log-sum-exp with max subtraction.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

fn check_pools<T: Real>(pools: &[SupportPool<T>]) -> Result<(usize, usize)> {
    let first = pools
        .first()
        .ok_or_else(|| Error::Argument("no support pools given".into()))?;
    let (r, d) = (first.r(), first.d());
    if pools.iter().any(|p| p.d() != d || p.r() != r) {
        return Err(Error::Argument(
            "support pools disagree in feature shape".into(),
        ));
    }
    Ok((r, d))
}

/// Scores a single query map against every class.
pub fn class_scores<T: Real>(
    query: &FeatureMap<T>,
    pools: &[SupportPool<T>],
    params: &HeadParams,
) -> Result<ClassScores> {
    let mut out = score_queries(
        std::slice::from_ref(query),
        pools,
        params,
        FormulationChoice::Auto,
    )?;
    Ok(out.remove(0))
}

/// Scores a batch of query maps. All queries are stacked into one
/// `b·r × d` matrix so each class runs the solver exactly once; classes are
/// processed in parallel and reassembled in pool order.
pub fn score_queries<T: Real>(
    queries: &[FeatureMap<T>],
    pools: &[SupportPool<T>],
    params: &HeadParams,
    choice: FormulationChoice,
) -> Result<Vec<ClassScores>> {
    let (r, d) = check_pools(pools)?;
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(q) = queries.iter().find(|q| q.d() != d || q.r() != r) {
        return Err(Error::Argument(format!(
            "query map {}x{} does not match support maps {r}x{d}",
            q.r(),
            q.d()
        )));
    }
    let stacked = Matrix::vstack(&queries.iter().map(|q| q.values()).collect::<Vec<_>>())?;
    let per_class: Vec<Vec<f64>> = pools
        .par_iter()
        .map(|pool| {
            let formulation = choice.resolve(pool.values().rows(), d);
            let recs = reconstruct(&stacked, pool, params, formulation)?;
            Ok(recs.into_iter().map(|rec| rec.sq_error).collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..queries.len())
        .map(|qi| {
            let distances = per_class.iter().map(|errs| errs[qi]).collect();
            ClassScores::from_distances(distances, params.gamma, 1.0)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(rows: &[&[f64]], k: usize, r: usize) -> SupportPool<f64> {
        SupportPool::from_matrix(0, k, r, Matrix::from_rows(rows)).unwrap()
    }

    #[test]
    fn lambda_resnet_shapes() {
        let p = HeadParams::initial(640);
        assert_eq!(effective_lambda(&p, 5, 25, 640), 0.1953125);
    }

    #[test]
    fn lambda_balanced_and_shifted() {
        let p = HeadParams::initial(16);
        assert_eq!(effective_lambda(&p, 1, 16, 16), 1.0);
        let p = HeadParams::new(2f64.ln(), 0.0, 1.0).unwrap();
        assert!((effective_lambda(&p, 2, 1, 2) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn lambda_is_floored() {
        let p = HeadParams::new(-100.0, 0.0, 1.0).unwrap();
        assert_eq!(effective_lambda(&p, 1, 1, 1), LAMBDA_FLOOR);
    }

    #[test]
    fn head_params_reject_bad_gamma() {
        assert!(HeadParams::new(0.0, 0.0, 0.0).is_err());
        assert!(HeadParams::new(0.0, 0.0, -1.0).is_err());
        assert!(HeadParams::new(f64::NAN, 0.0, 1.0).is_err());
    }

    #[test]
    fn identity_support_halves_query() {
        // k=2, r=1, d=2 with α=0 gives λ=1, so Q̄ = Q/2.
        let s = pool(&[&[1.0, 0.0], &[0.0, 1.0]], 2, 1);
        let q = Matrix::from_rows(&[&[1.0, 0.0]]);
        let params = HeadParams::new(0.0, 0.0, 1.0).unwrap();
        for f in [Formulation::Direct, Formulation::Woodbury] {
            let rec = reconstruct(&q, &s, &params, f).unwrap().remove(0);
            assert!(rec.q_bar.max_abs_diff(&Matrix::from_rows(&[&[0.5, 0.0]])) < 1e-15);
            assert!((rec.sq_error - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn member_query_is_reconstructed_exactly() {
        let s = pool(&[&[1.0, 2.0, 0.0], &[0.0, 1.0, 3.0]], 2, 1);
        let q = Matrix::from_rows(&[&[1.0, 2.0, 0.0]]);
        // α chosen so that λ hits the floor.
        let params = HeadParams::new(-40.0, 0.0, 1.0).unwrap();
        for f in [Formulation::Direct, Formulation::Woodbury] {
            let rec = reconstruct(&q, &s, &params, f).unwrap().remove(0);
            assert!(rec.sq_error <= 1e-6, "{f:?}: {}", rec.sq_error);
        }
    }

    #[test]
    fn three_row_support_matches_hand_inverse() {
        // λ = 3/2. (SᵀS + λI) = [[3.5,1],[1,3.5]], det 11.25, so
        // Q̄ = Q·A⁻¹·SᵀS = [1.2, 0.8] and the error is 0.8² + 0.2² = 0.68.
        let s = pool(&[&[1.0, 0.0], &[1.0, 1.0], &[0.0, 1.0]], 3, 1);
        let q = Matrix::from_rows(&[&[2.0, 1.0]]);
        let params = HeadParams::new(0.0, 0.0, 1.0).unwrap();
        for f in [Formulation::Direct, Formulation::Woodbury] {
            let rec = reconstruct(&q, &s, &params, f).unwrap().remove(0);
            assert!((rec.q_bar.get(0, 0) - 1.2).abs() < 1e-14);
            assert!((rec.q_bar.get(0, 1) - 0.8).abs() < 1e-14);
            assert!((rec.sq_error - 0.68).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_support_reconstructs_origin() {
        let s = SupportPool::from_matrix(0, 2, 2, Matrix::<f64>::zeros(4, 3)).unwrap();
        let q = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[0.0, -1.0, 1.0]]);
        let params = HeadParams::new(0.0, 0.0, 1.0).unwrap();
        for f in [Formulation::Direct, Formulation::Woodbury] {
            let rec = reconstruct(&q, &s, &params, f).unwrap().remove(0);
            assert_eq!(rec.q_bar, Matrix::zeros(2, 3));
            assert!((rec.sq_error - 16.0 / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn formulation_choice() {
        assert_eq!(choose_formulation(1, 25, 640), Formulation::Direct);
        assert_eq!(choose_formulation(5, 25, 64), Formulation::Woodbury);
        assert_eq!(choose_formulation(1, 25, 25), Formulation::Woodbury);
    }

    #[test]
    fn reconstruct_rejects_bad_shapes() {
        let s = pool(&[&[1.0, 0.0], &[0.0, 1.0]], 2, 1);
        let params = HeadParams::initial(2);
        assert!(reconstruct_direct(&Matrix::zeros(1, 3), &s, &params).is_err());
        let s2 = SupportPool::from_matrix(0, 1, 2, Matrix::<f64>::identity(2)).unwrap();
        assert!(reconstruct_woodbury(&Matrix::zeros(3, 2), &s2, &params).is_err());
    }

    #[test]
    fn identical_pools_give_uniform_probs() {
        let p = pool(&[&[1.0, 0.5], &[0.2, 1.0]], 2, 1);
        let pools: Vec<_> = (0..4)
            .map(|c| SupportPool::from_matrix(c, 2, 1, p.values().clone()).unwrap())
            .collect();
        let q = FeatureMap::new(Matrix::from_rows(&[&[0.3, -0.7]])).unwrap();
        let scores = class_scores(&q, &pools, &HeadParams::initial(2)).unwrap();
        for &pr in &scores.probs {
            assert!((pr - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_two_errors() {
        let s = ClassScores::from_distances(vec![0.1, 0.3], 1.0, 1.0);
        // e^0.2 / (1 + e^0.2)
        let expected = 1.0 / (1.0 + (-0.2f64).exp());
        assert!((s.probs[0] - expected).abs() < 1e-15);
        assert!((s.probs[0] - 0.549_833_997_312_478).abs() < 1e-12);
        assert!((s.probs[1] - (1.0 - expected)).abs() < 1e-15);
    }

    #[test]
    fn large_temperature_saturates() {
        let s = ClassScores::from_distances(vec![0.5, 0.4, 0.9], 1e4, 1.0);
        assert!(s.probs[1] > 1.0 - 1e-12);
        assert_eq!(s.argmax(), 1);
    }

    #[test]
    fn class_scores_requires_pools() {
        let q = FeatureMap::new(Matrix::<f64>::identity(2)).unwrap();
        assert!(matches!(
            class_scores(&q, &[], &HeadParams::initial(2)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn feature_map_validation() {
        assert!(FeatureMap::new(Matrix::<f64>::zeros(0, 3)).is_err());
        assert!(FeatureMap::new(Matrix::from_rows(&[&[f64::INFINITY]])).is_err());
    }

    #[test]
    fn pool_from_maps_concatenates() {
        let a = FeatureMap::new(Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let b = FeatureMap::new(Matrix::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]])).unwrap();
        let p = SupportPool::from_maps(3, &[a.clone(), b.clone()]).unwrap();
        assert_eq!((p.k(), p.r(), p.d(), p.class_id()), (2, 2, 2, 3));
        assert_eq!(p.map(1), b);
        let c = FeatureMap::new(Matrix::from_rows(&[&[1.0, 2.0]])).unwrap();
        assert!(SupportPool::from_maps(0, &[a, c]).is_err());
    }
}
