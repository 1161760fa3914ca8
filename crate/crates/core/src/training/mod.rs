//! Gradient-based training of heads, embeddings and pre-training dummies.

pub mod checkpoint;
pub mod meta;
pub mod model;
pub mod optim;
pub mod pretrain;

pub use checkpoint::{Checkpoint, RngState};
pub use meta::{initial_model, meta_train, Divergence, HistoryEntry, TrainConfig, TrainOutcome};
pub use model::{episode_loss, episode_loss_and_grads, EmbedInit, EmbeddingModel, HeadState, ParamSet, TrainedModel};
pub use optim::{OptimConfig, OptimState};
pub use pretrain::{pretrain, DummyClassMaps, PretrainConfig, PretrainOutcome, PretrainState};
