//! Episode sampling and episodic evaluation.
//!
//! Every trial draws from its own ChaCha8 stream keyed by `(seed, trial)`,
//! so reports are identical regardless of how trials are scheduled across
//! threads.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frn::{ClassScores, FeatureMap, SupportPool};

/// Name of the generator recorded in every report.
pub const RNG_NAME: &str = "chacha8";

/// Default queries per class while training.
pub const TRAIN_QUERIES: usize = 15;
/// Default queries per class while evaluating.
pub const TEST_QUERIES: usize = 16;

/// The generator for trial (or step) `index` under `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub r: usize,
    pub d: usize,
    pub counts: BTreeMap<usize, usize>,
}

/// Labeled feature maps grouped by class. All maps share `(r, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    classes: BTreeMap<usize, Vec<FeatureMap>>,
    r: usize,
    d: usize,
}

impl Dataset {
    pub fn new(classes: BTreeMap<usize, Vec<FeatureMap>>) -> Result<Self> {
        let first = classes
            .values()
            .flat_map(|v| v.first())
            .next()
            .ok_or_else(|| Error::Argument("dataset has no items".into()))?;
        let (r, d) = (first.r(), first.d());
        for (c, items) in &classes {
            if items.is_empty() {
                return Err(Error::Argument(format!("class {c} has no items")));
            }
            if let Some(bad) = items.iter().find(|m| m.r() != r || m.d() != d) {
                return Err(Error::Argument(format!(
                    "class {c} has a {}x{} map, expected {r}x{d}",
                    bad.r(),
                    bad.d()
                )));
            }
        }
        Ok(Dataset { classes, r, d })
    }

    pub fn from_items(items: impl IntoIterator<Item = (usize, FeatureMap)>) -> Result<Self> {
        let mut classes: BTreeMap<usize, Vec<FeatureMap>> = BTreeMap::new();
        for (c, m) in items {
            classes.entry(c).or_default().push(m);
        }
        Self::new(classes)
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.keys().copied()
    }

    pub fn items(&self, class: usize) -> &[FeatureMap] {
        self.classes.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn classes(&self) -> &BTreeMap<usize, Vec<FeatureMap>> {
        &self.classes
    }

    /// `(class, map)` pairs in class order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &FeatureMap)> {
        self.classes
            .iter()
            .flat_map(|(&c, items)| items.iter().map(move |m| (c, m)))
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            r: self.r,
            d: self.d,
            counts: self.classes.iter().map(|(&c, v)| (c, v.len())).collect(),
        }
    }

    /// Applies `f` to every map, e.g. an embedding.
    pub fn map_features(&self, f: impl Fn(&FeatureMap) -> Result<FeatureMap>) -> Result<Self> {
        let classes = self
            .classes
            .iter()
            .map(|(&c, items)| Ok((c, items.iter().map(&f).collect::<Result<Vec<_>>>()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::new(classes)
    }
}

/// An `n`-way `k`-shot task.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    /// Dataset class of each episode label.
    pub class_ids: Vec<usize>,
    pub support: Vec<SupportPool>,
    pub queries: Vec<FeatureMap>,
    /// Episode-local label in `0..way` for each query.
    pub labels: Vec<usize>,
}

impl Episode {
    /// Reorders the episode's classes: new label `i` is old label `perm[i]`.
    pub fn permute_classes(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.way];
        if perm.len() != self.way || perm.iter().any(|&p| p >= self.way || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Argument("not a permutation of the episode classes".into()));
        }
        let mut inverse = vec![0; self.way];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        Ok(Episode {
            way: self.way,
            shot: self.shot,
            query_per_class: self.query_per_class,
            class_ids: perm.iter().map(|&p| self.class_ids[p]).collect(),
            support: perm.iter().map(|&p| self.support[p].clone()).collect(),
            queries: self.queries.clone(),
            labels: self.labels.iter().map(|&l| inverse[l]).collect(),
        })
    }
}

/// Draws `n` classes and, within each, `k + q` distinct items uniformly
/// without replacement.
pub fn sample_episode<R: Rng + ?Sized>(
    ds: &Dataset,
    n: usize,
    k: usize,
    q: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n < 2 {
        return Err(Error::Sampling(format!("way must be at least 2, got {n}")));
    }
    if k == 0 || q == 0 {
        return Err(Error::Sampling("shot and query counts must be positive".into()));
    }
    if ds.num_classes() < n {
        return Err(Error::Sampling(format!(
            "need {n} classes, dataset has {}",
            ds.num_classes()
        )));
    }
    let ids: Vec<usize> = ds.class_ids().collect();
    let chosen: Vec<usize> = sample(rng, ids.len(), n).into_iter().map(|i| ids[i]).collect();
    let mut support = Vec::with_capacity(n);
    let mut queries = Vec::with_capacity(n * q);
    let mut labels = Vec::with_capacity(n * q);
    for (label, &class) in chosen.iter().enumerate() {
        let items = ds.items(class);
        if items.len() < k + q {
            return Err(Error::Sampling(format!(
                "class {class} has {} items, need shot + query = {}",
                items.len(),
                k + q
            )));
        }
        let picks = sample(rng, items.len(), k + q).into_vec();
        let maps: Vec<FeatureMap> = picks[..k].iter().map(|&i| items[i].clone()).collect();
        support.push(SupportPool::from_maps(class, &maps)?);
        for &i in &picks[k..] {
            queries.push(items[i].clone());
            labels.push(label);
        }
    }
    Ok(Episode {
        way: n,
        shot: k,
        query_per_class: q,
        class_ids: chosen,
        support,
        queries,
        labels,
    })
}

/// Anything that turns an episode's supports and queries into class scores.
pub trait Head: Send + Sync {
    fn name(&self) -> String;

    fn score(&self, support: &[SupportPool], queries: &[FeatureMap]) -> Result<Vec<ClassScores>>;

    fn score_episode(&self, episode: &Episode) -> Result<Vec<ClassScores>> {
        self.score(&episode.support, &episode.queries)
    }
}

/// Fraction of queries whose top-scoring class is the true one.
pub fn episode_accuracy(scores: &[ClassScores], labels: &[usize]) -> f64 {
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, &y)| s.argmax() == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub head: String,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub trials: usize,
    pub accuracy_mean: f64,
    pub ci95_halfwidth: f64,
    pub per_trial: Vec<f64>,
    pub rng: String,
    pub rng_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl EvalReport {
    pub fn from_trials(head: String, spec: &EvalSpec, per_trial: Vec<f64>) -> Self {
        let (accuracy_mean, ci95_halfwidth) = mean_ci95(&per_trial);
        EvalReport {
            head,
            way: spec.way,
            shot: spec.shot,
            query: spec.query,
            trials: per_trial.len(),
            accuracy_mean,
            ci95_halfwidth,
            per_trial,
            rng: RNG_NAME.to_string(),
            rng_seed: spec.seed,
            config_hash: None,
        }
    }

    /// A small fixed-width plain-text table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {}", "head", self.head);
        let _ = writeln!(s, "{:<16} {}-way {}-shot, {} queries/class", "setting", self.way, self.shot, self.query);
        let _ = writeln!(s, "{:<16} {}", "trials", self.trials);
        let _ = writeln!(s, "{:<16} {:.2} +- {:.2} %", "accuracy", 100.0 * self.accuracy_mean, 100.0 * self.ci95_halfwidth);
        let _ = writeln!(s, "{:<16} {} seed {}", "rng", self.rng, self.rng_seed);
        if let Some(h) = &self.config_hash {
            let _ = writeln!(s, "{:<16} {}", "config", h);
        }
        s
    }
}

/// Sample mean and `1.96·s/√n` with the unbiased sample deviation.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Runs `spec.trials` independent episodes in parallel.
pub fn evaluate(ds: &Dataset, head: &dyn Head, spec: &EvalSpec) -> Result<EvalReport> {
    if spec.trials < 2 {
        return Err(Error::Argument(format!(
            "evaluation needs at least 2 trials, got {}",
            spec.trials
        )));
    }
    let results: Vec<Result<f64>> = (0..spec.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(spec.seed, t as u64);
            let ep = sample_episode(ds, spec.way, spec.shot, spec.query, &mut rng)?;
            let scores = head.score_episode(&ep)?;
            Ok(episode_accuracy(&scores, &ep.labels))
        })
        .collect();
    let completed = results.iter().filter(|r| r.is_ok()).count();
    let mut per_trial = Vec::with_capacity(spec.trials);
    for r in results {
        match r {
            Ok(a) => per_trial.push(a),
            Err(e) => {
                return Err(Error::EvalAborted {
                    completed,
                    requested: spec.trials,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(EvalReport::from_trials(head.name(), spec, per_trial))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn tiny_dataset(classes: usize, items: usize) -> Dataset {
        Dataset::from_items((0..classes).flat_map(|c| {
            (0..items).map(move |i| {
                let v = (c * 100 + i) as f64;
                (c, FeatureMap::new(Matrix::from_rows(&[&[v, 1.0], &[0.0, v]])).unwrap())
            })
        }))
        .unwrap()
    }

    struct ConstantHead;

    impl Head for ConstantHead {
        fn name(&self) -> String {
            "constant".into()
        }

        fn score(&self, support: &[SupportPool], queries: &[FeatureMap]) -> Result<Vec<ClassScores>> {
            let mut d = vec![1.0; support.len()];
            d[0] = 0.0;
            Ok(queries
                .iter()
                .map(|_| ClassScores::from_distances(d.clone(), 1.0, 1.0))
                .collect())
        }
    }

    #[test]
    fn exact_fit_uses_every_item() {
        let ds = tiny_dataset(3, 4);
        let ep = sample_episode(&ds, 3, 1, 3, &mut stream_rng(7, 0)).unwrap();
        let mut seen: Vec<f64> = ep
            .support
            .iter()
            .flat_map(|p| (0..p.k()).map(move |i| p.map(i).values().get(0, 0)))
            .chain(ep.queries.iter().map(|q| q.values().get(0, 0)))
            .collect();
        seen.sort_by(f64::total_cmp);
        let mut all: Vec<f64> = ds.iter().map(|(_, m)| m.values().get(0, 0)).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(seen, all);
        let mut classes = ep.class_ids.clone();
        classes.sort();
        assert_eq!(classes, vec![0, 1, 2]);
    }

    #[test]
    fn same_seed_same_episode() {
        let ds = tiny_dataset(10, 20);
        let a = sample_episode(&ds, 5, 2, 3, &mut stream_rng(11, 4)).unwrap();
        let b = sample_episode(&ds, 5, 2, 3, &mut stream_rng(11, 4)).unwrap();
        assert_eq!(a, b);
        let c = sample_episode(&ds, 5, 2, 3, &mut stream_rng(11, 5)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn episode_shapes() {
        let ds = tiny_dataset(8, 20);
        let ep = sample_episode(&ds, 5, 1, 15, &mut stream_rng(0, 0)).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert!(ep.support.iter().all(|p| p.values().rows() == ds.r()));
        assert_eq!(ep.queries.len(), 75);
        assert!(ep.labels.iter().all(|&l| l < 5));
    }

    #[test]
    fn infeasible_requests_name_the_constraint() {
        let ds = tiny_dataset(3, 4);
        let err = sample_episode(&ds, 4, 1, 1, &mut stream_rng(0, 0)).unwrap_err();
        assert!(err.to_string().contains("need 4 classes"));
        let err = sample_episode(&ds, 2, 2, 3, &mut stream_rng(0, 0)).unwrap_err();
        assert!(err.to_string().contains("shot + query"));
        assert!(sample_episode(&ds, 1, 1, 1, &mut stream_rng(0, 0)).is_err());
    }

    #[test]
    fn constant_head_is_at_chance() {
        let ds = tiny_dataset(10, 6);
        let spec = EvalSpec {
            way: 5,
            shot: 1,
            query: 5,
            trials: 1000,
            seed: 3,
        };
        let rep = evaluate(&ds, &ConstantHead, &spec).unwrap();
        assert_eq!(rep.trials, 1000);
        assert!((rep.accuracy_mean - 0.2).abs() <= 3.0 * rep.ci95_halfwidth + 1e-12);
    }

    #[test]
    fn evaluate_needs_two_trials() {
        let ds = tiny_dataset(3, 4);
        let spec = EvalSpec {
            way: 2,
            shot: 1,
            query: 1,
            trials: 1,
            seed: 0,
        };
        assert!(evaluate(&ds, &ConstantHead, &spec).is_err());
    }

    #[test]
    fn evaluate_reports_partial_progress() {
        let ds = tiny_dataset(3, 4);
        let spec = EvalSpec {
            way: 2,
            shot: 3,
            query: 3,
            trials: 5,
            seed: 0,
        };
        match evaluate(&ds, &ConstantHead, &spec) {
            Err(Error::EvalAborted { completed, requested, .. }) => {
                assert_eq!((completed, requested), (0, 5));
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn ci_formula() {
        let (m, ci) = mean_ci95(&[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(m, 0.5);
        // s = sqrt(1/3)
        assert!((ci - 1.96 * (1.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(mean_ci95(&[1.0, 1.0, 1.0]), (1.0, 0.0));
    }

    #[test]
    fn permuting_classes_relabels() {
        let ds = tiny_dataset(4, 3);
        let ep = sample_episode(&ds, 3, 1, 2, &mut stream_rng(1, 1)).unwrap();
        let p = ep.permute_classes(&[2, 0, 1]).unwrap();
        for (q, (&old, &new)) in ep.labels.iter().zip(&p.labels).enumerate() {
            assert_eq!(ep.class_ids[old], p.class_ids[new], "query {q}");
        }
        assert!(ep.permute_classes(&[0, 0, 1]).is_err());
    }
}
