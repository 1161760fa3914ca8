//! Non-episodic pre-training against one learnable dummy feature map per
//! base class. `α = β = 0` stay fixed, so `ρ = 1` and `λ = r/d` (the
//! one-shot shape); only the embedding, the dummy maps and `γ` move. The
//! dummy maps are discarded afterwards.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::episode::{episode_accuracy, stream_rng, Dataset};
use crate::error::{Error, ErrorClass, Result};
use crate::frn::{score_queries, ClassScores, FeatureMap, Formulation, FormulationChoice, HeadParams, SupportPool, LAMBDA_FLOOR};
use crate::grad::{Gradients, Graph};
use crate::linalg::Matrix;
use crate::losses::cross_entropy;

use super::meta::{Divergence, HistoryEntry};
use super::model::{
    block_error_graph, declare, embed_graph, logits_graph, reconstruct_graph, EmbedInit, EmbeddingModel, HeadState,
    ParamSet, TrainedModel, EMBED_BIAS, EMBED_WEIGHT, GAMMA, GAMMA_MIN,
};
use super::optim::{OptimConfig, OptimState};

/// One learnable `r × d` map per base class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DummyClassMaps {
    pub maps: BTreeMap<usize, Matrix<f64>>,
}

impl DummyClassMaps {
    /// Independent `N(0, σ²)` entries for every class.
    pub fn random<R: Rng + ?Sized>(classes: impl IntoIterator<Item = usize>, r: usize, d: usize, sigma: f64, rng: &mut R) -> Self {
        let maps = classes
            .into_iter()
            .map(|c| (c, Matrix::from_fn(r, d, |_, _| sigma * rng.sample::<f64, _>(StandardNormal))))
            .collect();
        DummyClassMaps { maps }
    }

    pub fn param_name(class: usize) -> String {
        format!("dummy.{class}")
    }

    pub fn validate(&self, r: usize, d: usize) -> Result<()> {
        for (c, m) in &self.maps {
            if m.shape() != (r, d) {
                return Err(Error::Argument(format!("dummy map {c} is {:?}, expected ({r}, {d})", m.shape())));
            }
            m.check_finite()?;
        }
        Ok(())
    }

    fn pools(&self) -> Result<Vec<SupportPool>> {
        self.maps
            .iter()
            .map(|(&c, m)| SupportPool::from_matrix(c, 1, m.rows(), m.clone()))
            .collect()
    }

    fn label_of(&self, class: usize) -> Result<usize> {
        self.maps
            .keys()
            .position(|&c| c == class)
            .ok_or_else(|| Error::Argument(format!("no dummy map for class {class}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Standard deviation of the initial dummy maps.
    pub dummy_sigma: f64,
    pub embed_dim: Option<usize>,
    pub embed_init: EmbedInit,
    pub downscale: bool,
    pub learn_gamma: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 200,
            batch_size: 32,
            optim: OptimConfig::default(),
            dummy_sigma: 0.1,
            embed_dim: None,
            embed_init: EmbedInit::default(),
            downscale: false,
            learn_gamma: true,
            seed: 0,
        }
    }
}

/// Everything pre-training learns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainState {
    pub embedding: EmbeddingModel,
    pub dummies: DummyClassMaps,
    pub gamma: f64,
}

impl PretrainState {
    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(EMBED_WEIGHT.into(), self.embedding.weight.clone());
        p.insert(EMBED_BIAS.into(), self.embedding.bias.clone());
        p.insert(GAMMA.into(), Matrix::filled(1, 1, self.gamma));
        for (&c, m) in &self.dummies.maps {
            p.insert(DummyClassMaps::param_name(c), m.clone());
        }
        p
    }

    pub fn set_params(&mut self, p: &ParamSet) -> Result<()> {
        let current = self.params();
        for (name, v) in p {
            match current.get(name) {
                Some(old) if old.shape() == v.shape() => {}
                _ => return Err(Error::Checkpoint(format!("bad pre-training parameter `{name}`"))),
            }
        }
        if let Some(w) = p.get(EMBED_WEIGHT) {
            self.embedding.weight = w.clone();
        }
        if let Some(b) = p.get(EMBED_BIAS) {
            self.embedding.bias = b.clone();
        }
        if let Some(g) = p.get(GAMMA) {
            self.gamma = g.get(0, 0);
        }
        for (&c, m) in self.dummies.maps.iter_mut() {
            if let Some(v) = p.get(&DummyClassMaps::param_name(c)) {
                *m = v.clone();
            }
        }
        Ok(())
    }

    fn head_params(&self) -> HeadParams {
        HeadParams {
            alpha: 0.0,
            beta: 0.0,
            gamma: self.gamma,
            learnable: Default::default(),
        }
    }

    /// Scores every map against every dummy class with the plain forward pass.
    pub fn scores(&self, maps: &[&FeatureMap]) -> Result<Vec<ClassScores>> {
        let embedded = maps.iter().map(|m| self.embedding.apply(m)).collect::<Result<Vec<_>>>()?;
        score_queries(&embedded, &self.dummies.pools()?, &self.head_params(), FormulationChoice::Woodbury)
    }

    /// Mean cross-entropy of `(class, map)` pairs, forward pass only.
    pub fn loss(&self, batch: &[(usize, &FeatureMap)]) -> Result<f64> {
        let maps: Vec<&FeatureMap> = batch.iter().map(|(_, m)| *m).collect();
        let labels = batch
            .iter()
            .map(|&(c, _)| self.dummies.label_of(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(cross_entropy(&self.scores(&maps)?, &labels)?.value)
    }

    pub fn loss_and_grads(&self, batch: &[(usize, &FeatureMap)]) -> Result<(f64, Gradients)> {
        let first = batch.first().ok_or_else(|| Error::Argument("empty batch".into()))?;
        let r = first.1.r();
        let d = self.embedding.d_out();
        let labels = batch
            .iter()
            .map(|&(c, _)| self.dummies.label_of(c))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let vars = declare(&mut g, &self.params());
        let stacked = Matrix::vstack(&batch.iter().map(|(_, m)| m.values()).collect::<Vec<_>>())?;
        let q = embed_graph(&mut g, &vars, &stacked, self.embedding.output_scale)?;
        let lambda = g.scalar((r as f64 / d as f64).max(LAMBDA_FLOOR));
        let mut dist = Vec::with_capacity(self.dummies.maps.len());
        for &c in self.dummies.maps.keys() {
            let m = vars[&DummyClassMaps::param_name(c)];
            let q_bar = reconstruct_graph(&mut g, q, m, lambda, None, Formulation::Woodbury)?;
            dist.push(block_error_graph(&mut g, q, q_bar, r)?);
        }
        let logits = logits_graph(&mut g, &dist, vars[GAMMA], 1.0)?;
        let ce = g.cross_entropy(logits, &labels)?;
        let value = g.scalar_value(ce);
        Ok((value, g.backward(ce)?))
    }

    /// Top-1 accuracy over every item of `ds`.
    pub fn accuracy(&self, ds: &Dataset) -> Result<f64> {
        let items: Vec<(usize, &FeatureMap)> = ds.iter().collect();
        let maps: Vec<&FeatureMap> = items.iter().map(|(_, m)| *m).collect();
        let labels = items
            .iter()
            .map(|&(c, _)| self.dummies.label_of(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(episode_accuracy(&self.scores(&maps)?, &labels))
    }

    /// The FRN model that carries on from here: this embedding and `γ`,
    /// with `α = β = 0`.
    pub fn into_model(self) -> TrainedModel {
        TrainedModel::new(self.embedding, HeadState::Frn {
            params: HeadParams {
                alpha: 0.0,
                beta: 0.0,
                gamma: self.gamma,
                learnable: Default::default(),
            },
        })
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub state: PretrainState,
    pub history: Vec<HistoryEntry>,
    pub train_accuracy: f64,
    pub diverged: Option<Divergence>,
}

pub fn initial_state(base: &Dataset, cfg: &PretrainConfig) -> PretrainState {
    let d = cfg.embed_dim.unwrap_or(base.d());
    let mut rng = stream_rng(cfg.seed, u64::MAX);
    let embedding = EmbeddingModel::init(cfg.embed_init, base.d(), d, &mut rng).with_downscale(cfg.downscale);
    let dummies = DummyClassMaps::random(base.class_ids(), base.r(), d, cfg.dummy_sigma, &mut rng);
    PretrainState {
        embedding,
        dummies,
        gamma: 1.0 / d as f64,
    }
}

/// Minibatch cross-entropy over all base classes.
pub fn pretrain(base: &Dataset, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    cfg.optim.validate()?;
    if cfg.batch_size == 0 || base.num_classes() < 2 {
        return Err(Error::Config("pre-training needs a positive batch and at least 2 classes".into()));
    }
    let mut state = initial_state(base, cfg);
    let items: Vec<(usize, &FeatureMap)> = base.iter().collect();
    let mut trainable = vec![EMBED_WEIGHT.to_string(), EMBED_BIAS.to_string()];
    trainable.extend(state.dummies.maps.keys().map(|&c| DummyClassMaps::param_name(c)));
    if cfg.learn_gamma {
        trainable.push(GAMMA.into());
    }
    let mut opt = OptimState::new(cfg.optim.clone(), [EMBED_WEIGHT.to_string()])?;
    let mut params = state.params();
    let mut history = Vec::with_capacity(cfg.steps);
    let mut diverged = None;
    for step in 0..cfg.steps {
        let mut rng = stream_rng(cfg.seed, step as u64);
        let batch: Vec<(usize, &FeatureMap)> = sample(&mut rng, items.len(), cfg.batch_size.min(items.len()))
            .into_iter()
            .map(|i| items[i])
            .collect();
        let (loss, grads) = match state.loss_and_grads(&batch) {
            Ok(v) => v,
            Err(e) if e.class() == ErrorClass::Numerical => {
                log::warn!("pre-training step {step}: {e}");
                diverged = Some(Divergence { step, loss: f64::NAN });
                break;
            }
            Err(e) => return Err(e),
        };
        opt.step(&mut params, &grads, &trainable)?;
        if let Some(g) = params.get_mut(GAMMA) {
            if g.get(0, 0) < GAMMA_MIN {
                g.set(0, 0, GAMMA_MIN);
            }
        }
        if params.values().any(|m| !m.is_finite()) {
            diverged = Some(Divergence { step, loss });
            break;
        }
        state.set_params(&params)?;
        history.push(HistoryEntry {
            step,
            loss,
            val_accuracy: None,
        });
    }
    let train_accuracy = state.accuracy(base)?;
    log::info!("pre-training accuracy {train_accuracy:.4}");
    Ok(PretrainOutcome {
        state,
        history,
        train_accuracy,
        diverged,
    })
}
