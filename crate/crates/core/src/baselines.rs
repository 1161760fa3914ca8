//! Comparison heads: prototypes (no feature map, no regression), subspace
//! projection on pooled features (regression, no feature map) and attention
//! reconstruction (feature map, no regression).
//!
//! Baseline logits are divided by the feature dimension, the usual logit
//! normalization for these heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frn::{blockwise_sq_error, reconstruct_matrix_direct, reconstruct_matrix_woodbury};
use crate::frn::{choose_formulation, ClassScores, FeatureMap, Formulation, SupportPool};
use crate::linalg::{matmul, matmul_nt, LinalgError, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub lambda_fixed: f64,
    /// The projection subspace always passes through the origin; the
    /// centroid-recentered variant is not implemented.
    pub include_origin: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            lambda_fixed: 0.01,
            include_origin: true,
        }
    }
}

impl ProjectionConfig {
    pub fn new(lambda_fixed: f64) -> Result<Self> {
        let cfg = ProjectionConfig {
            lambda_fixed,
            include_origin: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_fixed > 0.0) || !self.lambda_fixed.is_finite() {
            return Err(Error::Argument(format!(
                "projection regularizer must be positive, got {}",
                self.lambda_fixed
            )));
        }
        if !self.include_origin {
            return Err(Error::Argument(
                "only origin-anchored projection is supported".into(),
            ));
        }
        Ok(())
    }
}

/// Key and value projections for the attention head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtxParams {
    pub key_proj: Matrix<f64>,
    pub value_proj: Matrix<f64>,
    /// Skip the projections entirely (both act as the identity).
    pub identity_mode: bool,
}

impl CtxParams {
    pub fn identity(d: usize) -> Self {
        CtxParams {
            key_proj: Matrix::identity(d),
            value_proj: Matrix::identity(d),
            identity_mode: true,
        }
    }

    pub fn new(key_proj: Matrix<f64>, value_proj: Matrix<f64>) -> Result<Self> {
        if key_proj.rows() != value_proj.rows() {
            return Err(LinalgError::Shape {
                op: "ctx projections",
                left: key_proj.shape(),
                right: value_proj.shape(),
            }
            .into());
        }
        key_proj.check_finite()?;
        value_proj.check_finite()?;
        Ok(CtxParams {
            key_proj,
            value_proj,
            identity_mode: false,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.key_proj.rows()
    }

    pub fn key_dim(&self) -> usize {
        self.key_proj.cols()
    }

    pub fn value_dim(&self) -> usize {
        self.value_proj.cols()
    }

    fn keys(&self, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        if self.identity_mode {
            Ok(x.clone())
        } else {
            Ok(matmul(x, &self.key_proj)?)
        }
    }

    fn values(&self, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        if self.identity_mode {
            Ok(x.clone())
        } else {
            Ok(matmul(x, &self.value_proj)?)
        }
    }
}

fn check_inputs(queries: &[FeatureMap], pools: &[SupportPool]) -> Result<(usize, usize)> {
    let first = pools
        .first()
        .ok_or_else(|| Error::Argument("no support pools given".into()))?;
    let (r, d) = (first.r(), first.d());
    if pools.iter().any(|p| p.r() != r || p.d() != d) {
        return Err(Error::Argument(
            "support pools disagree in feature shape".into(),
        ));
    }
    if queries.iter().any(|q| q.r() != r || q.d() != d) {
        return Err(Error::Argument(
            "query map does not match support shape".into(),
        ));
    }
    Ok((r, d))
}

/// Average-pools each of the `k` support maps, giving a `k × d` matrix.
pub fn pooled_supports(pool: &SupportPool) -> Matrix<f64> {
    let parts: Vec<Matrix<f64>> = (0..pool.k())
        .map(|i| pool.map(i).values().mean_rows())
        .collect();
    Matrix::vstack(&parts.iter().collect::<Vec<_>>()).expect("pooled rows share d")
}

fn pooled_queries(queries: &[FeatureMap]) -> Matrix<f64> {
    let parts: Vec<Matrix<f64>> = queries.iter().map(|q| q.values().mean_rows()).collect();
    Matrix::vstack(&parts.iter().collect::<Vec<_>>()).expect("pooled rows share d")
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assemble(per_class: Vec<Vec<f64>>, n_queries: usize, gamma: f64, d: usize) -> Vec<ClassScores> {
    (0..n_queries)
        .map(|qi| {
            let distances = per_class.iter().map(|c| c[qi]).collect();
            ClassScores::from_distances(distances, gamma, d as f64)
        })
        .collect()
}

pub fn proto_score_queries(
    queries: &[FeatureMap],
    pools: &[SupportPool],
    gamma: f64,
) -> Result<Vec<ClassScores>> {
    let (_, d) = check_inputs(queries, pools)?;
    let q = pooled_queries(queries);
    let per_class = pools
        .iter()
        .map(|pool| {
            let proto = pooled_supports(pool).mean_rows();
            (0..q.rows())
                .map(|i| sq_dist(q.row(i), proto.row(0)))
                .collect()
        })
        .collect();
    Ok(assemble(per_class, queries.len(), gamma, d))
}

/// Squared Euclidean distance of the average-pooled query to each class
/// prototype (mean of pooled supports).
pub fn proto_scores(query: &FeatureMap, pools: &[SupportPool], gamma: f64) -> Result<ClassScores> {
    Ok(proto_score_queries(std::slice::from_ref(query), pools, gamma)?.remove(0))
}

pub fn dsn_score_queries(
    queries: &[FeatureMap],
    pools: &[SupportPool],
    cfg: &ProjectionConfig,
    gamma: f64,
) -> Result<Vec<ClassScores>> {
    cfg.validate()?;
    let (_, d) = check_inputs(queries, pools)?;
    let q = pooled_queries(queries);
    let per_class = pools
        .iter()
        .map(|pool| {
            let basis = pooled_supports(pool);
            let proj = match choose_formulation(basis.rows(), 1, d) {
                Formulation::Direct => reconstruct_matrix_direct(&q, &basis, cfg.lambda_fixed, 1.0)?,
                Formulation::Woodbury => {
                    reconstruct_matrix_woodbury(&q, &basis, cfg.lambda_fixed, 1.0)?
                }
            };
            Ok(blockwise_sq_error(&q, &proj, 1))
        })
        .collect::<Result<_>>()?;
    Ok(assemble(per_class, queries.len(), gamma, d))
}

/// Squared residual of the ridge projection of the pooled query onto the
/// span of the pooled supports.
pub fn dsn_scores(
    query: &FeatureMap,
    pools: &[SupportPool],
    cfg: &ProjectionConfig,
    gamma: f64,
) -> Result<ClassScores> {
    Ok(dsn_score_queries(std::slice::from_ref(query), pools, cfg, gamma)?.remove(0))
}

/// In-place row-wise softmax.
pub fn row_softmax(m: &mut Matrix<f64>) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Attention weights `softmax(Q₁·S₁ᵀ / √d_k)` for stacked query rows.
pub fn ctx_attention(queries: &Matrix<f64>, pool: &SupportPool, params: &CtxParams) -> Result<Matrix<f64>> {
    let q1 = params.keys(queries)?;
    let s1 = params.keys(pool.values())?;
    let mut logits = matmul_nt(&q1, &s1)?.scale(1.0 / (q1.cols() as f64).sqrt());
    row_softmax(&mut logits);
    Ok(logits)
}

pub fn ctx_score_queries(
    queries: &[FeatureMap],
    pools: &[SupportPool],
    params: &CtxParams,
    gamma: f64,
) -> Result<Vec<ClassScores>> {
    let (r, d) = check_inputs(queries, pools)?;
    if params.input_dim() != d && !params.identity_mode {
        return Err(Error::Argument(format!(
            "projection expects d={}, features have d={d}",
            params.input_dim()
        )));
    }
    let stacked = Matrix::vstack(&queries.iter().map(|q| q.values()).collect::<Vec<_>>())?;
    let q2 = params.values(&stacked)?;
    let per_class = pools
        .iter()
        .map(|pool| {
            let attn = ctx_attention(&stacked, pool, params)?;
            let s2 = params.values(pool.values())?;
            let recon = matmul(&attn, &s2)?;
            Ok(blockwise_sq_error(&q2, &recon, r))
        })
        .collect::<Result<_>>()?;
    let dv = if params.identity_mode { d } else { params.value_dim() };
    Ok(assemble(per_class, queries.len(), gamma, dv))
}

/// Attention reconstruction of the value-projected query from the class's
/// value-projected supports.
pub fn ctx_scores(
    query: &FeatureMap,
    pools: &[SupportPool],
    params: &CtxParams,
    gamma: f64,
) -> Result<ClassScores> {
    Ok(ctx_score_queries(std::slice::from_ref(query), pools, params, gamma)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmap(rows: &[&[f64]]) -> FeatureMap {
        FeatureMap::new(Matrix::from_rows(rows)).unwrap()
    }

    fn pool1(class: usize, rows: &[&[f64]], r: usize) -> SupportPool {
        let m = Matrix::from_rows(rows);
        SupportPool::from_matrix(class, m.rows() / r, r, m).unwrap()
    }

    #[test]
    fn proto_single_shot_prototype_is_pooled_support() {
        let p = pool1(0, &[&[1.0, 3.0], &[3.0, 5.0]], 2);
        assert_eq!(pooled_supports(&p).mean_rows(), Matrix::from_rows(&[&[2.0, 4.0]]));
        let q = fmap(&[&[2.0, 4.0], &[2.0, 4.0]]);
        let other = pool1(1, &[&[0.0, 0.0], &[1.0, 1.0]], 2);
        let s = proto_scores(&q, &[other, p], 1.0).unwrap();
        assert_eq!(s.distances[1], 0.0);
        assert_eq!(s.argmax(), 1);
    }

    #[test]
    fn proto_nearer_class_wins() {
        let a = pool1(0, &[&[0.0, 0.0]], 1);
        let b = pool1(1, &[&[2.0, 0.0]], 1);
        let q = fmap(&[&[1.1, 0.0]]);
        let s = proto_scores(&q, &[a, b], 1.0).unwrap();
        assert!((s.distances[0] - 1.21).abs() < 1e-12);
        assert!((s.distances[1] - 0.81).abs() < 1e-12);
        assert_eq!(s.argmax(), 1);
    }

    #[test]
    fn dsn_in_span_query_has_no_residual() {
        let p = pool1(0, &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 1.0]], 1);
        let q = fmap(&[&[2.0, -3.0, -3.0]]);
        let cfg = ProjectionConfig::new(1e-8).unwrap();
        let s = dsn_scores(&q, &[p], &cfg, 1.0).unwrap();
        assert!(s.distances[0] <= 1e-6);
    }

    #[test]
    fn dsn_orthogonal_query_keeps_full_norm() {
        let p = pool1(0, &[&[1.0, 0.0]], 1);
        let q = fmap(&[&[0.0, 1.0]]);
        let s = dsn_scores(&q, &[p], &ProjectionConfig::new(1e-8).unwrap(), 1.0).unwrap();
        assert!((s.distances[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dsn_plane_projection() {
        // Projection of (1,1,1) onto the e₁–e₂ plane leaves (0,0,1).
        let p = pool1(0, &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]], 1);
        let q = fmap(&[&[1.0, 1.0, 1.0]]);
        let s = dsn_scores(&q, &[p], &ProjectionConfig::new(1e-8).unwrap(), 1.0).unwrap();
        assert!((s.distances[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn projection_config_validation() {
        assert!(ProjectionConfig::new(0.0).is_err());
        assert_eq!(ProjectionConfig::default().lambda_fixed, 0.01);
        let cfg = ProjectionConfig {
            lambda_fixed: 0.01,
            include_origin: false,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ctx_single_key_copies_support_row() {
        let p = pool1(0, &[&[0.3, -1.0, 2.0]], 1);
        let q = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[-4.0, 0.0, 1.0]]);
        let params = CtxParams::identity(3);
        let attn = ctx_attention(&q, &p, &params).unwrap();
        assert_eq!(attn, Matrix::filled(2, 1, 1.0));
        let recon = matmul(&attn, p.values()).unwrap();
        for i in 0..2 {
            assert_eq!(recon.row(i), p.values().row(0));
        }
    }

    #[test]
    fn ctx_attention_concentrates_on_matching_row() {
        let p = pool1(0, &[&[10.0, 0.0], &[0.0, 10.0]], 1);
        let q = Matrix::from_rows(&[&[10.0, 0.0]]);
        let attn = ctx_attention(&q, &p, &CtxParams::identity(2)).unwrap();
        // logits 100/√2 and 0
        let expected = 1.0 / (1.0 + (-100.0 / 2f64.sqrt()).exp());
        assert!((attn.get(0, 0) - expected).abs() < 1e-15);
        assert!(attn.get(0, 1) < 1e-30);
    }

    #[test]
    fn ctx_projection_shapes_checked() {
        assert!(CtxParams::new(Matrix::identity(3), Matrix::identity(2)).is_err());
        let params = CtxParams::new(Matrix::identity(3), Matrix::identity(3)).unwrap();
        let p = pool1(0, &[&[1.0, 0.0]], 1);
        let q = fmap(&[&[1.0, 0.0]]);
        assert!(ctx_scores(&q, &[p], &params, 1.0).is_err());
    }

    #[test]
    fn baselines_need_pools() {
        let q = fmap(&[&[1.0]]);
        assert!(proto_scores(&q, &[], 1.0).is_err());
        assert!(dsn_scores(&q, &[], &ProjectionConfig::default(), 1.0).is_err());
        assert!(ctx_scores(&q, &[], &CtxParams::identity(1), 1.0).is_err());
    }
}
