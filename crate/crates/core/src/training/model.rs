//! Learnable model state and its episode loss, both as a plain forward pass
//! and on the gradient tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baselines::{CtxParams, ProjectionConfig};
use crate::episode::{Episode, Head};
use crate::error::{Error, Result};
use crate::frn::{ClassScores, FeatureMap, Formulation, FormulationChoice, HeadParams, SupportPool, LAMBDA_FLOOR};
use crate::grad::{Gradients, Graph, Var};
use crate::heads::{CtxHead, DsnHead, FrnHead, HeadKind, ProtoHead};
use crate::linalg::{matmul, Matrix, Precision};
use crate::losses::{aux_orthogonality, cross_entropy, LossValue, AUX_ORTHOGONALITY, CROSS_ENTROPY};

pub const EMBED_WEIGHT: &str = "embed.weight";
pub const EMBED_BIAS: &str = "embed.bias";
pub const ALPHA: &str = "alpha";
pub const BETA: &str = "beta";
pub const GAMMA: &str = "gamma";
pub const CTX_KEY: &str = "ctx.key";
pub const CTX_VALUE: &str = "ctx.value";

/// Smallest temperature kept after an update.
pub const GAMMA_MIN: f64 = 1e-6;

/// Named parameter tensors. Scalars are 1×1.
pub type ParamSet = BTreeMap<String, Matrix<f64>>;

/// `x ↦ (x·W + b)·scale`, applied to every location of an `r × d_in` map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    pub weight: Matrix<f64>,
    pub bias: Matrix<f64>,
    pub output_scale: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedInit {
    Identity,
    #[default]
    Random,
}

impl EmbeddingModel {
    /// Identity map (zero-padded or truncated when `d_in != d`).
    pub fn identity(d_in: usize, d: usize) -> Self {
        EmbeddingModel {
            weight: Matrix::from_fn(d_in, d, |i, j| if i == j { 1.0 } else { 0.0 }),
            bias: Matrix::zeros(1, d),
            output_scale: 1.0,
        }
    }

    /// Weights drawn from `N(0, 1/d_in)`, zero bias.
    pub fn random<R: Rng + ?Sized>(d_in: usize, d: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        EmbeddingModel {
            weight: Matrix::from_fn(d_in, d, |_, _| std * rng.sample::<f64, _>(StandardNormal)),
            bias: Matrix::zeros(1, d),
            output_scale: 1.0,
        }
    }

    pub fn init<R: Rng + ?Sized>(how: EmbedInit, d_in: usize, d: usize, rng: &mut R) -> Self {
        match how {
            EmbedInit::Identity => Self::identity(d_in, d),
            EmbedInit::Random => Self::random(d_in, d, rng),
        }
    }

    /// Divides outputs by `√d`.
    pub fn with_downscale(mut self, on: bool) -> Self {
        self.output_scale = if on { 1.0 / (self.d_out() as f64).sqrt() } else { 1.0 };
        self
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn apply_matrix(&self, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        let mut y = matmul(x, &self.weight)?;
        for i in 0..y.rows() {
            for (v, &b) in y.row_mut(i).iter_mut().zip(self.bias.row(0)) {
                *v += b;
            }
        }
        Ok(y.scale(self.output_scale))
    }

    pub fn apply(&self, x: &FeatureMap) -> Result<FeatureMap> {
        FeatureMap::new(self.apply_matrix(x.values())?)
    }

    pub fn apply_pool(&self, pool: &SupportPool) -> Result<SupportPool> {
        SupportPool::from_matrix(pool.class_id(), pool.k(), pool.r(), self.apply_matrix(pool.values())?)
    }
}

/// Head-specific learnable state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadState {
    Frn { params: HeadParams },
    Proto { gamma: f64 },
    Dsn { gamma: f64, cfg: ProjectionConfig },
    Ctx { gamma: f64, params: CtxParams },
}

impl HeadState {
    /// Zero `α`, `β`, temperature `1/d`, identity projections.
    pub fn initial(kind: HeadKind, d: usize) -> Self {
        let gamma = 1.0 / d as f64;
        match kind {
            HeadKind::Frn => HeadState::Frn {
                params: HeadParams::initial(d),
            },
            HeadKind::Proto => HeadState::Proto { gamma },
            HeadKind::Dsn => HeadState::Dsn {
                gamma,
                cfg: ProjectionConfig::default(),
            },
            HeadKind::Ctx => HeadState::Ctx {
                gamma,
                params: CtxParams::new(Matrix::identity(d), Matrix::identity(d)).expect("identity is finite"),
            },
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            HeadState::Frn { .. } => HeadKind::Frn,
            HeadState::Proto { .. } => HeadKind::Proto,
            HeadState::Dsn { .. } => HeadKind::Dsn,
            HeadState::Ctx { .. } => HeadKind::Ctx,
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            HeadState::Frn { params } => params.gamma,
            HeadState::Proto { gamma } | HeadState::Dsn { gamma, .. } | HeadState::Ctx { gamma, .. } => *gamma,
        }
    }
}

/// An embedding followed by a head; the unit that is trained, saved and
/// evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub embedding: EmbeddingModel,
    pub head: HeadState,
    pub formulation: FormulationChoice,
    pub precision: Precision,
}

impl TrainedModel {
    pub fn new(embedding: EmbeddingModel, head: HeadState) -> Self {
        TrainedModel {
            embedding,
            head,
            formulation: FormulationChoice::Auto,
            precision: Precision::F64,
        }
    }

    pub fn kind(&self) -> HeadKind {
        self.head.kind()
    }

    /// Every tensor the model owns, by name.
    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(EMBED_WEIGHT.into(), self.embedding.weight.clone());
        p.insert(EMBED_BIAS.into(), self.embedding.bias.clone());
        let scalar = |v: f64| Matrix::filled(1, 1, v);
        match &self.head {
            HeadState::Frn { params } => {
                p.insert(ALPHA.into(), scalar(params.alpha));
                p.insert(BETA.into(), scalar(params.beta));
                p.insert(GAMMA.into(), scalar(params.gamma));
            }
            HeadState::Proto { gamma } | HeadState::Dsn { gamma, .. } => {
                p.insert(GAMMA.into(), scalar(*gamma));
            }
            HeadState::Ctx { gamma, params } => {
                p.insert(GAMMA.into(), scalar(*gamma));
                if !params.identity_mode {
                    p.insert(CTX_KEY.into(), params.key_proj.clone());
                    p.insert(CTX_VALUE.into(), params.value_proj.clone());
                }
            }
        }
        p
    }

    /// Overwrites the named tensors present in `p`; unknown names and shape
    /// changes are rejected.
    pub fn set_params(&mut self, p: &ParamSet) -> Result<()> {
        let current = self.params();
        for (name, value) in p {
            let old = current
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no parameter `{name}`")))?;
            if old.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` is {:?}, got {:?}",
                    old.shape(),
                    value.shape()
                )));
            }
        }
        let get = |n: &str| p.get(n);
        if let Some(w) = get(EMBED_WEIGHT) {
            self.embedding.weight = w.clone();
        }
        if let Some(b) = get(EMBED_BIAS) {
            self.embedding.bias = b.clone();
        }
        let s = |n: &str| get(n).map(|m| m.get(0, 0));
        match &mut self.head {
            HeadState::Frn { params } => {
                if let Some(v) = s(ALPHA) {
                    params.alpha = v;
                }
                if let Some(v) = s(BETA) {
                    params.beta = v;
                }
                if let Some(v) = s(GAMMA) {
                    params.gamma = v;
                }
            }
            HeadState::Proto { gamma } | HeadState::Dsn { gamma, .. } => {
                if let Some(v) = s(GAMMA) {
                    *gamma = v;
                }
            }
            HeadState::Ctx { gamma, params } => {
                if let Some(v) = s(GAMMA) {
                    *gamma = v;
                }
                if let Some(k) = get(CTX_KEY) {
                    params.key_proj = k.clone();
                }
                if let Some(v) = get(CTX_VALUE) {
                    params.value_proj = v.clone();
                }
            }
        }
        Ok(())
    }

    /// Embeds support and queries with this model.
    pub fn embed_episode(&self, support: &[SupportPool], queries: &[FeatureMap]) -> Result<(Vec<SupportPool>, Vec<FeatureMap>)> {
        let s = support
            .iter()
            .map(|p| self.embedding.apply_pool(p))
            .collect::<Result<Vec<_>>>()?;
        let q = queries
            .iter()
            .map(|m| self.embedding.apply(m))
            .collect::<Result<Vec<_>>>()?;
        Ok((s, q))
    }

    fn score_embedded(&self, support: &[SupportPool], queries: &[FeatureMap]) -> Result<Vec<ClassScores>> {
        match &self.head {
            HeadState::Frn { params } => FrnHead {
                params: *params,
                formulation: self.formulation,
                precision: self.precision,
            }
            .score(support, queries),
            HeadState::Proto { gamma } => ProtoHead { gamma: *gamma }.score(support, queries),
            HeadState::Dsn { gamma, cfg } => DsnHead { cfg: *cfg, gamma: *gamma }.score(support, queries),
            HeadState::Ctx { gamma, params } => CtxHead {
                params: params.clone(),
                gamma: *gamma,
            }
            .score(support, queries),
        }
    }
}

impl Head for TrainedModel {
    fn name(&self) -> String {
        self.kind().to_string()
    }

    fn score(&self, support: &[SupportPool], queries: &[FeatureMap]) -> Result<Vec<ClassScores>> {
        let (s, q) = self.embed_episode(support, queries)?;
        self.score_embedded(&s, &q)
    }
}

/// Episode loss computed with the plain forward pass only.
pub fn episode_loss(model: &TrainedModel, ep: &Episode, aux_scale: Option<f64>) -> Result<LossValue> {
    let (support, queries) = model.embed_episode(&ep.support, &ep.queries)?;
    let scores = model.score_embedded(&support, &queries)?;
    let mut loss = cross_entropy(&scores, &ep.labels)?;
    if let Some(scale) = aux_scale {
        loss = loss.combine(aux_orthogonality(&support, scale));
    }
    Ok(loss)
}

/// Leaves for every parameter, keyed by name.
pub(crate) fn declare(g: &mut Graph, params: &ParamSet) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(n, v)| (n.clone(), g.param(n.clone(), v.clone())))
        .collect()
}

pub(crate) fn embed_graph(g: &mut Graph, vars: &BTreeMap<String, Var>, raw: &Matrix<f64>, scale: f64) -> Result<Var> {
    let x = g.constant(raw.clone());
    let xw = g.matmul(x, vars[EMBED_WEIGHT])?;
    let biased = g.add_row_bias(xw, vars[EMBED_BIAS])?;
    Ok(g.scale(biased, scale))
}

/// `ρ·Q(SᵀS+λI)⁻¹SᵀS` or `ρ·QSᵀ(SSᵀ+λI)⁻¹S` on the tape.
pub(crate) fn reconstruct_graph(
    g: &mut Graph,
    q: Var,
    s: Var,
    lambda: Var,
    rho: Option<Var>,
    formulation: Formulation,
) -> Result<Var> {
    let q_bar = match formulation {
        Formulation::Direct => {
            let sst = g.matmul_nt(s, s)?;
            let a = g.add_diag(sst, lambda)?;
            let qst = g.matmul_nt(q, s)?;
            let rhs = g.transpose(qst);
            let x = g.solve_spd(a, rhs)?;
            let w = g.transpose(x);
            g.matmul(w, s)?
        }
        Formulation::Woodbury => {
            let st = g.transpose(s);
            let sts = g.matmul(st, s)?;
            let a = g.add_diag(sts, lambda)?;
            let hat = g.solve_spd(a, sts)?;
            g.matmul(q, hat)?
        }
    };
    match rho {
        Some(rho) => g.scale_by(q_bar, rho),
        None => Ok(q_bar),
    }
}

/// Per-query squared error, `b × 1`.
pub(crate) fn block_error_graph(g: &mut Graph, q: Var, q_bar: Var, r: usize) -> Result<Var> {
    let diff = g.sub(q, q_bar)?;
    let e = g.block_sq_norm(diff, r)?;
    Ok(g.scale(e, 1.0 / r as f64))
}

/// `−γ·E/normalizer` for the `b × n` distance matrix `E`.
pub(crate) fn logits_graph(g: &mut Graph, distances: &[Var], gamma: Var, normalizer: f64) -> Result<Var> {
    let e = g.hstack(distances)?;
    let scaled = g.scale_by(e, gamma)?;
    Ok(g.scale(scaled, -1.0 / normalizer))
}

fn head_logits_graph(
    g: &mut Graph,
    vars: &BTreeMap<String, Var>,
    model: &TrainedModel,
    supports: &[(Var, usize)],
    q: Var,
    r: usize,
    d: usize,
) -> Result<Var> {
    let gamma = vars[GAMMA];
    match &model.head {
        HeadState::Frn { params } => {
            let rho = g.exp(vars[BETA]);
            let mut dist = Vec::with_capacity(supports.len());
            for &(s, k) in supports {
                let rows = k * r;
                let scale = rows as f64 / d as f64;
                let lambda = if scale * params.alpha.exp() < LAMBDA_FLOOR {
                    g.scalar(LAMBDA_FLOOR)
                } else {
                    let e = g.exp(vars[ALPHA]);
                    g.scale(e, scale)
                };
                let formulation = model.formulation.resolve(rows, d);
                let q_bar = reconstruct_graph(g, q, s, lambda, Some(rho), formulation)?;
                dist.push(block_error_graph(g, q, q_bar, r)?);
            }
            logits_graph(g, &dist, gamma, 1.0)
        }
        HeadState::Proto { .. } => {
            let qp = g.block_mean(q, r)?;
            let mut dist = Vec::with_capacity(supports.len());
            for &(s, k) in supports {
                let pooled = g.block_mean(s, r)?;
                let proto = g.block_mean(pooled, k)?;
                let neg = g.scale(proto, -1.0);
                let diff = g.add_row_bias(qp, neg)?;
                dist.push(g.block_sq_norm(diff, 1)?);
            }
            logits_graph(g, &dist, gamma, d as f64)
        }
        HeadState::Dsn { cfg, .. } => {
            cfg.validate()?;
            let qp = g.block_mean(q, r)?;
            let lambda = g.scalar(cfg.lambda_fixed);
            let mut dist = Vec::with_capacity(supports.len());
            for &(s, k) in supports {
                let basis = g.block_mean(s, r)?;
                let formulation = crate::frn::choose_formulation(k, 1, d);
                let proj = reconstruct_graph(g, qp, basis, lambda, None, formulation)?;
                dist.push(block_error_graph(g, qp, proj, 1)?);
            }
            logits_graph(g, &dist, gamma, d as f64)
        }
        HeadState::Ctx { params, .. } => {
            let (wk, wv, dk, dv) = if params.identity_mode {
                (None, None, d, d)
            } else {
                (Some(vars[CTX_KEY]), Some(vars[CTX_VALUE]), params.key_dim(), params.value_dim())
            };
            let project = |g: &mut Graph, x: Var, w: Option<Var>| -> Result<Var> {
                match w {
                    Some(w) => g.matmul(x, w),
                    None => Ok(x),
                }
            };
            let q1 = project(g, q, wk)?;
            let q2 = project(g, q, wv)?;
            let mut dist = Vec::with_capacity(supports.len());
            for &(s, _) in supports {
                let s1 = project(g, s, wk)?;
                let s2 = project(g, s, wv)?;
                let att = g.matmul_nt(q1, s1)?;
                let att = g.scale(att, 1.0 / (dk as f64).sqrt());
                let att = g.row_softmax(att);
                let rec = g.matmul(att, s2)?;
                dist.push(block_error_graph(g, q2, rec, r)?);
            }
            logits_graph(g, &dist, gamma, dv as f64)
        }
    }
}

/// `scale · Σ_{i≠j} ‖N(Sᵢ)N(Sⱼ)ᵀ‖²` on the tape.
pub(crate) fn aux_graph(g: &mut Graph, supports: &[Var], scale: f64) -> Result<Option<Var>> {
    let normed: Vec<Var> = supports.iter().map(|&s| g.row_normalize(s)).collect();
    let mut total: Option<Var> = None;
    for (i, &a) in normed.iter().enumerate() {
        for (j, &b) in normed.iter().enumerate() {
            if i == j {
                continue;
            }
            let prod = g.matmul_nt(a, b)?;
            let sq = g.sum_sq(prod);
            total = Some(match total {
                Some(t) => g.add(t, sq)?,
                None => sq,
            });
        }
    }
    Ok(total.map(|t| g.scale(t, scale)))
}

/// Episode loss and gradients for every parameter of `model`.
pub fn episode_loss_and_grads(
    model: &TrainedModel,
    ep: &Episode,
    aux_scale: Option<f64>,
) -> Result<(LossValue, Gradients)> {
    let first = ep
        .support
        .first()
        .ok_or_else(|| Error::Argument("episode has no support".into()))?;
    let r = first.r();
    let d = model.embedding.d_out();
    let mut g = Graph::new();
    let vars = declare(&mut g, &model.params());
    let scale = model.embedding.output_scale;
    let supports = ep
        .support
        .iter()
        .map(|p| Ok((embed_graph(&mut g, &vars, p.values(), scale)?, p.k())))
        .collect::<Result<Vec<_>>>()?;
    let stacked = Matrix::vstack(&ep.queries.iter().map(|m| m.values()).collect::<Vec<_>>())?;
    let q = embed_graph(&mut g, &vars, &stacked, scale)?;
    let logits = head_logits_graph(&mut g, &vars, model, &supports, q, r, d)?;
    let ce = g.cross_entropy(logits, &ep.labels)?;
    let mut loss = LossValue::single(CROSS_ENTROPY, g.scalar_value(ce));
    let mut total = ce;
    if let Some(s) = aux_scale {
        let vars: Vec<Var> = supports.iter().map(|&(v, _)| v).collect();
        let aux_value = match aux_graph(&mut g, &vars, s)? {
            Some(aux) => {
                total = g.add(total, aux)?;
                g.scalar_value(aux)
            }
            None => 0.0,
        };
        loss = loss.combine(LossValue::single(AUX_ORTHOGONALITY, aux_value));
    }
    let grads = g.backward(total)?;
    Ok((loss, grads))
}
