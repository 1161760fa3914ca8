//! Episodic meta-training.

use serde::{Deserialize, Serialize};

use crate::episode::{evaluate, sample_episode, stream_rng, Dataset, EvalSpec, TEST_QUERIES, TRAIN_QUERIES};
use crate::error::{Error, ErrorClass, Result};
use crate::frn::{FormulationChoice, LearnableMask};
use crate::heads::HeadKind;
use crate::losses::AUX_SCALE;

use super::model::{
    episode_loss_and_grads, EmbedInit, EmbeddingModel, HeadState, ParamSet, TrainedModel, ALPHA, BETA, CTX_KEY,
    CTX_VALUE, EMBED_BIAS, EMBED_WEIGHT, GAMMA, GAMMA_MIN,
};
use super::optim::{OptimConfig, OptimState};

/// Offset separating validation streams from training streams.
const VAL_SEED_SALT: u64 = 0x5e_ed0f_7a11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub head: HeadKind,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub episodes: usize,
    pub optim: OptimConfig,
    /// Validate every this many episodes (0 disables periodic validation).
    pub val_every: usize,
    pub val_trials: usize,
    pub val_way: usize,
    pub val_shot: usize,
    pub val_query: usize,
    /// Weight of the orthogonality term, if used.
    pub aux_scale: Option<f64>,
    pub learnable: LearnableMask,
    pub train_embedding: bool,
    pub embed_dim: Option<usize>,
    pub embed_init: EmbedInit,
    pub downscale: bool,
    pub formulation: FormulationChoice,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(head: HeadKind, way: usize, shot: usize) -> Self {
        TrainConfig {
            head,
            way,
            shot,
            query: TRAIN_QUERIES,
            episodes: 200,
            optim: OptimConfig::default(),
            val_every: 50,
            val_trials: 100,
            val_way: way,
            val_shot: shot,
            val_query: TEST_QUERIES,
            aux_scale: (head == HeadKind::Frn).then_some(AUX_SCALE),
            learnable: LearnableMask::default(),
            train_embedding: true,
            embed_dim: None,
            embed_init: EmbedInit::default(),
            downscale: false,
            formulation: FormulationChoice::Auto,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.way < 2 || self.shot == 0 || self.query == 0 {
            return Err(Error::Config("need way >= 2 and positive shot and query".into()));
        }
        if self.val_every > 0 && self.val_trials < 2 {
            return Err(Error::Config("validation needs at least 2 trials".into()));
        }
        Ok(())
    }

    fn val_spec(&self) -> EvalSpec {
        EvalSpec {
            way: self.val_way,
            shot: self.val_shot,
            query: self.val_query,
            trials: self.val_trials,
            seed: self.seed ^ VAL_SEED_SALT,
        }
    }
}

/// One line of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation model, or the last one if validation is off. After a
    /// divergence this is the last finite model.
    pub model: TrainedModel,
    pub best_val: Option<f64>,
    pub history: Vec<HistoryEntry>,
    pub steps: usize,
    pub diverged: Option<Divergence>,
}

impl TrainOutcome {
    /// Turns a divergence into [`Error::Divergence`].
    pub fn into_result(self) -> Result<Self> {
        match self.diverged {
            Some(d) => Err(Error::Divergence {
                step: d.step,
                loss: d.loss,
            }),
            None => Ok(self),
        }
    }
}

/// A fresh model for `cfg` on inputs of width `d_in`.
pub fn initial_model(cfg: &TrainConfig, d_in: usize) -> TrainedModel {
    let d = cfg.embed_dim.unwrap_or(d_in);
    let mut rng = stream_rng(cfg.seed, u64::MAX);
    let embedding = EmbeddingModel::init(cfg.embed_init, d_in, d, &mut rng).with_downscale(cfg.downscale);
    let mut head = HeadState::initial(cfg.head, d);
    if let HeadState::Frn { params } = &mut head {
        params.learnable = cfg.learnable;
    }
    let mut m = TrainedModel::new(embedding, head);
    m.formulation = cfg.formulation;
    m
}

/// Names of the parameters `cfg` lets the optimizer move.
pub fn trainable_names(model: &TrainedModel, cfg: &TrainConfig) -> Vec<String> {
    let mut names = Vec::new();
    if cfg.train_embedding {
        names.push(EMBED_WEIGHT.to_string());
        names.push(EMBED_BIAS.to_string());
    }
    let mask = cfg.learnable;
    match &model.head {
        HeadState::Frn { .. } => {
            if mask.alpha {
                names.push(ALPHA.into());
            }
            if mask.beta {
                names.push(BETA.into());
            }
        }
        HeadState::Ctx { params, .. } if !params.identity_mode => {
            names.push(CTX_KEY.into());
            names.push(CTX_VALUE.into());
        }
        _ => {}
    }
    if mask.gamma {
        names.push(GAMMA.into());
    }
    names
}

fn clamp_gamma(p: &mut ParamSet) {
    if let Some(g) = p.get_mut(GAMMA) {
        if g.get(0, 0) < GAMMA_MIN {
            g.set(0, 0, GAMMA_MIN);
        }
    }
}

/// Minimizes episode cross-entropy (plus the optional orthogonality term)
/// with SGD, validating periodically on `val`. `init` continues from an
/// existing model, e.g. a pre-trained embedding.
pub fn meta_train(base: &Dataset, val: &Dataset, cfg: &TrainConfig, init: Option<TrainedModel>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = match init {
        Some(m) => {
            if m.embedding.d_in() != base.d() {
                return Err(Error::Config(format!(
                    "model expects d_in = {}, data has d = {}",
                    m.embedding.d_in(),
                    base.d()
                )));
            }
            m
        }
        None => initial_model(cfg, base.d()),
    };
    if let HeadState::Frn { params } = &mut model.head {
        params.learnable = cfg.learnable;
    }
    model.formulation = cfg.formulation;
    let trainable = trainable_names(&model, cfg);
    let mut opt = OptimState::new(cfg.optim.clone(), [EMBED_WEIGHT.to_string()])?;
    let mut params = model.params();
    let mut history = Vec::with_capacity(cfg.episodes);
    let validate = |m: &TrainedModel| -> Result<f64> { Ok(evaluate(val, m, &cfg.val_spec())?.accuracy_mean) };

    let mut best = if cfg.val_every > 0 {
        let acc = validate(&model)?;
        Some((acc, model.clone()))
    } else {
        None
    };
    let mut diverged = None;
    let mut steps = 0;
    for step in 0..cfg.episodes {
        let mut rng = stream_rng(cfg.seed, step as u64);
        let ep = sample_episode(base, cfg.way, cfg.shot, cfg.query, &mut rng)?;
        let result = episode_loss_and_grads(&model, &ep, cfg.aux_scale);
        let (loss, grads) = match result {
            Ok((l, g)) if l.value.is_finite() => (l, g),
            Ok((l, _)) => {
                diverged = Some(Divergence { step, loss: l.value });
                break;
            }
            Err(e) if e.class() == ErrorClass::Numerical => {
                log::warn!("step {step}: {e}");
                diverged = Some(Divergence { step, loss: f64::NAN });
                break;
            }
            Err(e) => return Err(e),
        };
        opt.step(&mut params, &grads, &trainable)?;
        clamp_gamma(&mut params);
        if params.values().any(|m| !m.is_finite()) {
            diverged = Some(Divergence { step, loss: loss.value });
            break;
        }
        model.set_params(&params)?;
        steps = step + 1;
        let mut entry = HistoryEntry {
            step,
            loss: loss.value,
            val_accuracy: None,
        };
        let at_end = step + 1 == cfg.episodes;
        if cfg.val_every > 0 && ((step + 1) % cfg.val_every == 0 || at_end) {
            let acc = validate(&model)?;
            entry.val_accuracy = Some(acc);
            log::info!("step {step}: loss {:.4}, val {:.4}", loss.value, acc);
            if best.as_ref().map_or(true, |(b, _)| acc > *b) {
                best = Some((acc, model.clone()));
            }
        }
        history.push(entry);
    }
    if let Some(d) = &diverged {
        log::error!("training diverged at step {} (loss {})", d.step, d.loss);
    }
    let (best_val, model) = match best {
        Some((acc, m)) => (Some(acc), m),
        None => (None, model),
    };
    Ok(TrainOutcome {
        model,
        best_val,
        history,
        steps,
        diverged,
    })
}
