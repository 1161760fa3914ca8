//! Few-shot classification by closed-form ridge reconstruction of query
//! feature maps from pooled support features, plus the baseline heads,
//! losses, episodic evaluation, training, synthetic data and benchmarks
//! around it.

pub mod ablation;
pub mod baselines;
pub mod bench;
pub mod config;
pub mod container;
pub mod episode;
pub mod error;
pub mod frn;
pub mod grad;
pub mod heads;
pub mod linalg;
pub mod losses;
pub mod synth;
pub mod training;

pub use error::{Error, ErrorClass, Result};
pub use frn::{FeatureMap, Formulation, FormulationChoice, HeadParams, SupportPool};
pub use linalg::{Matrix, Precision};
