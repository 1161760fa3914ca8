//! Episode losses: cross-entropy over query predictions and the auxiliary
//! inter-class orthogonality penalty on support features.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frn::{log_sum_exp, ClassScores, SupportPool};
use crate::linalg::{matmul_nt, Matrix};

/// Default down-weighting of the orthogonality term.
pub const AUX_SCALE: f64 = 0.03;

pub const CROSS_ENTROPY: &str = "cross_entropy";
pub const AUX_ORTHOGONALITY: &str = "aux_orthogonality";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub breakdown: BTreeMap<String, f64>,
    /// Zero-norm feature rows seen while normalizing.
    #[serde(default)]
    pub degenerate_rows: usize,
}

impl LossValue {
    pub fn single(name: &str, value: f64) -> Self {
        LossValue {
            value,
            breakdown: BTreeMap::from([(name.to_string(), value)]),
            degenerate_rows: 0,
        }
    }

    /// Sums two losses, merging their breakdowns.
    pub fn combine(mut self, other: LossValue) -> Self {
        self.value += other.value;
        for (k, v) in other.breakdown {
            *self.breakdown.entry(k).or_insert(0.0) += v;
        }
        self.degenerate_rows += other.degenerate_rows;
        self
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.breakdown.get(name).copied()
    }
}

/// Mean over queries of `−log p(true class)`, computed from logits.
pub fn cross_entropy(scores: &[ClassScores], labels: &[usize]) -> Result<LossValue> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} predictions but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Argument("cross-entropy over zero queries".into()));
    }
    let mut total = 0.0;
    for (s, &y) in scores.iter().zip(labels) {
        if y >= s.logits.len() {
            return Err(Error::Argument(format!(
                "label {y} out of range for {} classes",
                s.logits.len()
            )));
        }
        total += log_sum_exp(&s.logits) - s.logits[y];
    }
    Ok(LossValue::single(
        CROSS_ENTROPY,
        total / scores.len() as f64,
    ))
}

/// Projects every row onto the unit sphere. Zero rows stay zero and are
/// counted.
pub fn row_normalize(m: &Matrix<f64>) -> (Matrix<f64>, usize) {
    let mut out = m.clone();
    let mut zeros = 0;
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            zeros += 1;
        }
    }
    (out, zeros)
}

/// `scale · Σ_{i≠j} ‖Ŝᵢ Ŝⱼᵀ‖²_F` over ordered class pairs.
pub fn aux_orthogonality(pools: &[SupportPool], scale: f64) -> LossValue {
    let mut degenerate = 0;
    let normalized: Vec<Matrix<f64>> = pools
        .iter()
        .map(|p| {
            let (m, z) = row_normalize(p.values());
            degenerate += z;
            m
        })
        .collect();
    if degenerate > 0 {
        log::warn!("{degenerate} zero-norm support rows in orthogonality loss");
    }
    let mut total = 0.0;
    for (i, si) in normalized.iter().enumerate() {
        for (j, sj) in normalized.iter().enumerate() {
            if i == j {
                continue;
            }
            total += matmul_nt(si, sj)
                .expect("pools share feature dimension")
                .frobenius_sq();
        }
    }
    let mut loss = LossValue::single(AUX_ORTHOGONALITY, scale * total);
    loss.degenerate_rows = degenerate;
    loss
}
