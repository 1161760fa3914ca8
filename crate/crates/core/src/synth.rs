//! Synthetic feature-map datasets.
//!
//! * `gaussian-prototype`: each class has one latent `r × d` map; items add
//!   isotropic noise.
//! * `pose-permutation`: each class has `r` latent location features; every
//!   item shuffles them across locations before adding noise.
//! * `equal-mean-multiset`: like pose-permutation, but all classes share the
//!   same location-wise mean, so average pooling cannot tell them apart.
//!
//! Optionally the last `nuisance_dims` channels carry no class signal, only
//! noise of scale `nuisance_sigma`. A learned embedding can suppress them,
//! which gives training something to do.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::episode::Dataset;
use crate::error::{Error, Result};
use crate::frn::FeatureMap;
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenKind {
    GaussianPrototype,
    PosePermutation,
    EqualMeanMultiset,
}

impl fmt::Display for GenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GenKind::GaussianPrototype => "gaussian-prototype",
            GenKind::PosePermutation => "pose-permutation",
            GenKind::EqualMeanMultiset => "equal-mean-multiset",
        })
    }
}

impl FromStr for GenKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-prototype" | "gaussian" => Ok(GenKind::GaussianPrototype),
            "pose-permutation" | "pose" => Ok(GenKind::PosePermutation),
            "equal-mean-multiset" | "equal-mean" => Ok(GenKind::EqualMeanMultiset),
            other => Err(Error::Config(format!("unknown dataset kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub n_classes: usize,
    pub items_per_class: usize,
    pub r: usize,
    pub d: usize,
    pub noise_sigma: f64,
    pub kind: GenKind,
    pub seed: u64,
    /// Trailing channels that carry only noise.
    #[serde(default)]
    pub nuisance_dims: usize,
    #[serde(default)]
    pub nuisance_sigma: f64,
    /// Scale of the paired offsets in the equal-mean construction.
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    1.0
}

impl GenSpec {
    pub fn new(kind: GenKind, n_classes: usize, items_per_class: usize, r: usize, d: usize) -> Self {
        GenSpec {
            n_classes,
            items_per_class,
            r,
            d,
            noise_sigma: 0.0,
            kind,
            seed: 0,
            nuisance_dims: 0,
            nuisance_sigma: 0.0,
            delta: default_delta(),
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_nuisance(mut self, dims: usize, sigma: f64) -> Self {
        self.nuisance_dims = dims;
        self.nuisance_sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.items_per_class == 0 || self.r == 0 || self.d == 0 {
            return Err(Error::Generation("counts and shapes must be at least 1".into()));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("nuisance_sigma", self.nuisance_sigma),
            ("delta", self.delta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Generation(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.nuisance_dims >= self.d {
            return Err(Error::Generation(format!(
                "{} nuisance channels leave no signal in d = {}",
                self.nuisance_dims, self.d
            )));
        }
        match self.kind {
            GenKind::GaussianPrototype => {}
            GenKind::PosePermutation if self.r < 2 => {
                return Err(Error::Generation("pose permutation needs r >= 2".into()))
            }
            GenKind::EqualMeanMultiset if self.r < 2 || self.n_classes < 2 => {
                return Err(Error::Generation(
                    "equal-mean construction needs r >= 2 and at least 2 classes".into(),
                ))
            }
            GenKind::EqualMeanMultiset if self.delta == 0.0 => {
                return Err(Error::Generation("equal-mean construction needs delta > 0".into()))
            }
            _ => {}
        }
        Ok(())
    }

    fn signal_dims(&self) -> usize {
        self.d - self.nuisance_dims
    }
}

/// A generated dataset together with the noiseless per-class latents.
#[derive(Clone, Debug)]
pub struct Generated {
    pub dataset: Dataset,
    /// Class `c`'s `r × d` latent map, in the unpermuted location order.
    pub latents: Vec<Matrix<f64>>,
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn signal_only(m: Matrix<f64>, signal: usize) -> Matrix<f64> {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| if j < signal { m.get(i, j) } else { 0.0 })
}

fn class_latents(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Matrix<f64>>> {
    let (r, d, signal) = (spec.r, spec.d, spec.signal_dims());
    match spec.kind {
        GenKind::GaussianPrototype | GenKind::PosePermutation => Ok((0..spec.n_classes)
            .map(|_| signal_only(normal_matrix(r, d, rng), signal))
            .collect()),
        GenKind::EqualMeanMultiset => {
            let base = signal_only(normal_matrix(r, d, rng), signal);
            let mut out: Vec<Matrix<f64>> = Vec::with_capacity(spec.n_classes);
            for c in 0..spec.n_classes {
                let mut locs: Vec<usize> = (0..r).collect();
                locs.shuffle(rng);
                let mut m = base.clone();
                for pair in locs.chunks_exact(2) {
                    for j in 0..signal {
                        let delta: f64 = spec.delta * rng.sample::<f64, _>(StandardNormal);
                        m.set(pair[0], j, m.get(pair[0], j) + delta);
                        m.set(pair[1], j, m.get(pair[1], j) - delta);
                    }
                }
                if let Some(prev) = out.iter().position(|p| same_multiset(p, &m)) {
                    return Err(Error::Generation(format!(
                        "classes {prev} and {c} drew the same feature multiset"
                    )));
                }
                out.push(m);
            }
            Ok(out)
        }
    }
}

fn sorted_rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = (0..m.rows()).map(|i| m.row(i).to_vec()).collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rows
}

fn same_multiset(a: &Matrix<f64>, b: &Matrix<f64>) -> bool {
    sorted_rows(a) == sorted_rows(b)
}

/// Deterministic in `spec.seed`.
pub fn generate(spec: &GenSpec) -> Result<Generated> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let latents = class_latents(spec, &mut rng)?;
    let permute = spec.kind != GenKind::GaussianPrototype;
    let signal = spec.signal_dims();
    let mut classes = BTreeMap::new();
    for (c, latent) in latents.iter().enumerate() {
        let mut items = Vec::with_capacity(spec.items_per_class);
        for _ in 0..spec.items_per_class {
            let base = if permute {
                let mut perm: Vec<usize> = (0..spec.r).collect();
                perm.shuffle(&mut rng);
                latent.permute_rows(&perm)
            } else {
                latent.clone()
            };
            let values = Matrix::from_fn(spec.r, spec.d, |i, j| {
                let sigma = if j < signal { spec.noise_sigma } else { spec.nuisance_sigma };
                let z: f64 = rng.sample(StandardNormal);
                base.get(i, j) + sigma * z
            });
            items.push(FeatureMap::new(values)?);
        }
        classes.insert(c, items);
    }
    Ok(Generated {
        dataset: Dataset::new(classes)?,
        latents,
    })
}

fn generate_kind(spec: &GenSpec, kind: GenKind) -> Result<Dataset> {
    let spec = GenSpec { kind, ..spec.clone() };
    Ok(generate(&spec)?.dataset)
}

pub fn gen_gaussian(spec: &GenSpec) -> Result<Dataset> {
    generate_kind(spec, GenKind::GaussianPrototype)
}

pub fn gen_pose_permutation(spec: &GenSpec) -> Result<Dataset> {
    generate_kind(spec, GenKind::PosePermutation)
}

pub fn gen_equal_mean(spec: &GenSpec) -> Result<Dataset> {
    generate_kind(spec, GenKind::EqualMeanMultiset)
}

/// Largest distance between a class's mean location feature and the mean
/// over all classes.
pub fn max_mean_deviation(latents: &[Matrix<f64>]) -> f64 {
    let means: Vec<Matrix<f64>> = latents.iter().map(Matrix::mean_rows).collect();
    let Some(first) = means.first() else { return 0.0 };
    let mut global = Matrix::zeros(1, first.cols());
    for m in &means {
        global = global.add(m).expect("latents share d");
    }
    let global = global.scale(1.0 / means.len() as f64);
    means
        .iter()
        .map(|m| m.sub(&global).expect("latents share d").frobenius_sq().sqrt())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_gaussian_items_are_identical() {
        let spec = GenSpec::new(GenKind::GaussianPrototype, 3, 4, 2, 3);
        let ds = gen_gaussian(&spec).unwrap();
        for c in ds.class_ids() {
            let items = ds.items(c);
            assert!(items.iter().all(|m| m == &items[0]));
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let spec = GenSpec::new(GenKind::PosePermutation, 3, 5, 4, 6).with_noise(0.1).with_seed(9);
        assert_eq!(gen_pose_permutation(&spec).unwrap(), gen_pose_permutation(&spec).unwrap());
        let other = gen_pose_permutation(&spec.clone().with_seed(10)).unwrap();
        assert_ne!(gen_pose_permutation(&spec).unwrap(), other);
    }

    #[test]
    fn pose_items_are_row_permutations() {
        let spec = GenSpec::new(GenKind::PosePermutation, 2, 6, 5, 3);
        let g = generate(&spec).unwrap();
        for (c, m) in g.dataset.iter() {
            assert!(same_multiset(m.values(), &g.latents[c]));
        }
    }

    #[test]
    fn equal_mean_latents_share_mean() {
        let spec = GenSpec::new(GenKind::EqualMeanMultiset, 5, 2, 8, 16).with_seed(3);
        let g = generate(&spec).unwrap();
        assert!(max_mean_deviation(&g.latents) <= 1e-6);
        for i in 0..5 {
            for j in 0..i {
                assert!(!same_multiset(&g.latents[i], &g.latents[j]));
            }
        }
    }

    #[test]
    fn infeasible_shapes_are_rejected() {
        let one_row = GenSpec::new(GenKind::EqualMeanMultiset, 5, 2, 1, 16);
        assert!(matches!(gen_equal_mean(&one_row), Err(Error::Generation(_))));
        let one_class = GenSpec::new(GenKind::EqualMeanMultiset, 1, 2, 4, 16);
        assert!(matches!(gen_equal_mean(&one_class), Err(Error::Generation(_))));
        let bad_sigma = GenSpec::new(GenKind::GaussianPrototype, 2, 2, 2, 2).with_noise(-1.0);
        assert!(gen_gaussian(&bad_sigma).is_err());
    }

    #[test]
    fn nuisance_channels_have_no_signal() {
        let spec = GenSpec::new(GenKind::GaussianPrototype, 3, 2, 2, 6).with_nuisance(2, 1.0);
        let g = generate(&spec).unwrap();
        for l in &g.latents {
            for i in 0..2 {
                assert_eq!(&l.row(i)[4..], &[0.0, 0.0]);
            }
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [GenKind::GaussianPrototype, GenKind::PosePermutation, GenKind::EqualMeanMultiset] {
            assert_eq!(k.to_string().parse::<GenKind>().unwrap(), k);
        }
    }
}
