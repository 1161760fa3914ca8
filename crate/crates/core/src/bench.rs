//! Wall-clock comparison of the two reconstruction formulations.
//!
//! Runs in 32-bit, on the calling thread, alternating the two paths each
//! iteration so slow drift in machine load hits both equally.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::episode::stream_rng;
use crate::error::{Error, Result};
use crate::frn::{blockwise_sq_error, lambda_for_rows, reconstruct_matrix_direct, reconstruct_matrix_woodbury};
use crate::linalg::Matrix;

/// Fewest timed iterations accepted.
pub const MIN_ITERATIONS: usize = 200;

/// Largest relative sq_error disagreement between the paths still reported
/// as equivalent in 32-bit.
pub const EQUIVALENCE_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    /// Query maps per call.
    pub b: usize,
    pub k: usize,
    pub r: usize,
    pub d: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl BenchSpec {
    pub fn new(b: usize, k: usize, r: usize, d: usize) -> Self {
        BenchSpec {
            b,
            k,
            r,
            d,
            iterations: MIN_ITERATIONS,
            warmup: 10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b == 0 || self.k == 0 || self.r == 0 || self.d == 0 {
            return Err(Error::Config("benchmark shapes must be positive".into()));
        }
        if self.iterations < MIN_ITERATIONS {
            return Err(Error::Config(format!(
                "benchmark needs at least {MIN_ITERATIONS} iterations, got {}",
                self.iterations
            )));
        }
        Ok(())
    }
}

/// Milliseconds per call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathTiming {
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
    pub min_ms: f64,
}

impl PathTiming {
    pub fn from_samples(mut ms: Vec<f64>) -> Self {
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let pick = |q: f64| ms[((q * (n - 1) as f64).round() as usize).min(n - 1)];
        let median = if n % 2 == 1 { ms[n / 2] } else { 0.5 * (ms[n / 2 - 1] + ms[n / 2]) };
        PathTiming {
            median_ms: median,
            p95_ms: pick(0.95),
            mean_ms: ms.iter().sum::<f64>() / n as f64,
            min_ms: ms[0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub spec: BenchSpec,
    pub precision: String,
    pub direct: PathTiming,
    pub woodbury: PathTiming,
    /// Largest `|e_direct − e_woodbury| / max(1, |e_direct|)` seen.
    pub max_rel_sq_error_diff: f64,
    pub equivalent: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = String::new();
        let _ = writeln!(out, "b={} k={} r={} d={} ({} iterations, {})", s.b, s.k, s.r, s.d, s.iterations, self.precision);
        let _ = writeln!(out, "{:<10} {:>12} {:>12} {:>12}", "path", "median ms", "p95 ms", "mean ms");
        for (name, t) in [("direct", &self.direct), ("woodbury", &self.woodbury)] {
            let _ = writeln!(out, "{:<10} {:>12.4} {:>12.4} {:>12.4}", name, t.median_ms, t.p95_ms, t.mean_ms);
        }
        let _ = writeln!(out, "max relative sq_error difference {:.3e} ({})", self.max_rel_sq_error_diff, if self.equivalent { "equivalent" } else { "MISMATCH" });
        if let Some(h) = &self.config_hash {
            let _ = writeln!(out, "config {h}");
        }
        out
    }
}

fn random_f32(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<f32> {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f32, _>(StandardNormal))
}

pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, 0);
    let queries = random_f32(spec.b * spec.r, spec.d, &mut rng);
    let support = random_f32(spec.k * spec.r, spec.d, &mut rng);
    let lambda = lambda_for_rows(0.0, spec.k * spec.r, spec.d);
    let mut direct = Vec::with_capacity(spec.iterations);
    let mut woodbury = Vec::with_capacity(spec.iterations);
    let mut max_diff = 0.0f64;
    for i in 0..spec.warmup + spec.iterations {
        let t = Instant::now();
        let qd = reconstruct_matrix_direct(&queries, &support, lambda, 1.0)?;
        let ed = blockwise_sq_error(&queries, &qd, spec.r);
        let td = t.elapsed().as_secs_f64() * 1e3;
        let t = Instant::now();
        let qw = reconstruct_matrix_woodbury(&queries, &support, lambda, 1.0)?;
        let ew = blockwise_sq_error(&queries, &qw, spec.r);
        let tw = t.elapsed().as_secs_f64() * 1e3;
        if i < spec.warmup {
            continue;
        }
        direct.push(td);
        woodbury.push(tw);
        for (a, b) in ed.iter().zip(&ew) {
            max_diff = max_diff.max((a - b).abs() / a.abs().max(1.0));
        }
    }
    Ok(BenchReport {
        spec: spec.clone(),
        precision: "f32".into(),
        direct: PathTiming::from_samples(direct),
        woodbury: PathTiming::from_samples(woodbury),
        max_rel_sq_error_diff: max_diff,
        equivalent: max_diff <= EQUIVALENCE_TOL,
        config_hash: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let t = PathTiming::from_samples((1..=100).rev().map(f64::from).collect());
        assert_eq!(t.median_ms, 50.5);
        assert_eq!(t.p95_ms, 95.0);
        assert_eq!(t.min_ms, 1.0);
        assert_eq!(t.mean_ms, 50.5);
    }

    #[test]
    fn too_few_iterations_rejected() {
        let mut s = BenchSpec::new(2, 1, 3, 4);
        s.iterations = 10;
        assert!(run_bench(&s).is_err());
    }

    #[test]
    fn small_run_is_equivalent() {
        let r = run_bench(&BenchSpec::new(3, 2, 4, 6)).unwrap();
        assert!(r.equivalent, "{}", r.max_rel_sq_error_diff);
        assert!(r.direct.median_ms > 0.0 && r.woodbury.median_ms > 0.0);
    }
}
