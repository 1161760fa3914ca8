//! Reference computations for the integration tests. Nothing here calls the
//! library's solvers: dense algebra goes through nalgebra or plain loops.

#![allow(dead_code)]

use frn_core::training::ParamSet;
use frn_core::Matrix;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn to_na(m: &Matrix<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> Matrix<f64> {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// `ρ·Q·Sᵀ·(S·Sᵀ + λI)⁻¹·S` through an explicit LU inverse.
pub fn q_bar_oracle(q: &Matrix<f64>, s: &Matrix<f64>, lambda: f64, rho: f64) -> DMatrix<f64> {
    let (q, s) = (to_na(q), to_na(s));
    let n = s.nrows();
    let inv = (&s * s.transpose() + DMatrix::identity(n, n) * lambda)
        .try_inverse()
        .expect("ridge system is invertible");
    q * s.transpose() * inv * s * rho
}

/// `‖q − P q‖²` where `P` projects onto the row span of `basis`, via SVD.
pub fn projection_residual_oracle(q: &[f64], basis: &Matrix<f64>) -> f64 {
    let b = to_na(basis).transpose();
    let svd = b.svd(true, false);
    let u = svd.u.expect("left singular vectors");
    let tol = 1e-10 * svd.singular_values.max().max(1.0);
    let q = nalgebra::DVector::from_column_slice(q);
    let mut proj = nalgebra::DVector::zeros(q.len());
    for (j, &sv) in svd.singular_values.iter().enumerate() {
        if sv > tol {
            let col = u.column(j);
            proj += col * col.dot(&q);
        }
    }
    (q - proj).norm_squared()
}

/// `‖Q − W·S‖²_F + λ‖W‖²_F` with plain loops.
pub fn ridge_objective(q: &Matrix<f64>, s: &Matrix<f64>, w: &Matrix<f64>, lambda: f64) -> f64 {
    let mut fit = 0.0;
    for i in 0..q.rows() {
        for j in 0..q.cols() {
            let mut ws = 0.0;
            for t in 0..s.rows() {
                ws += w.get(i, t) * s.get(t, j);
            }
            let e = q.get(i, j) - ws;
            fit += e * e;
        }
    }
    fit + lambda * w.as_slice().iter().map(|v| v * v).sum::<f64>()
}

/// Accelerated gradient descent on the ridge objective from `W = 0`, run
/// until the gradient vanishes.
pub fn ridge_gd_oracle(q: &Matrix<f64>, s: &Matrix<f64>, lambda: f64) -> Matrix<f64> {
    let (q, s) = (to_na(q), to_na(s));
    let sst = &s * s.transpose();
    let lipschitz = 2.0 * (sst.symmetric_eigenvalues().max() + lambda);
    let mu = 2.0 * lambda;
    let kappa = lipschitz / mu;
    let momentum = (kappa.sqrt() - 1.0) / (kappa.sqrt() + 1.0);
    let grad = |w: &DMatrix<f64>| (w * &sst - &q * s.transpose()) * 2.0 + w * (2.0 * lambda);
    let mut w = DMatrix::zeros(q.nrows(), s.nrows());
    let mut y = w.clone();
    for _ in 0..200_000 {
        let g = grad(&y);
        let next = &y - g * (1.0 / lipschitz);
        y = &next + (&next - &w) * momentum;
        w = next;
        if grad(&w).norm() < 1e-12 {
            break;
        }
    }
    from_na(&w)
}

/// Average of the rows of `m`.
pub fn mean_row(m: &Matrix<f64>) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(i)) {
            *o += v / m.rows() as f64;
        }
    }
    out
}

/// Label of the nearest class mean after average pooling each map.
pub fn nearest_prototype_oracle(query: &Matrix<f64>, supports: &[Vec<Matrix<f64>>]) -> usize {
    let q = mean_row(query);
    let dist = |c: &Vec<Matrix<f64>>| {
        let pooled: Vec<Vec<f64>> = c.iter().map(mean_row).collect();
        let proto: Vec<f64> = (0..q.len())
            .map(|j| pooled.iter().map(|p| p[j]).sum::<f64>() / pooled.len() as f64)
            .collect();
        q.iter().zip(&proto).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    };
    let mut best = 0;
    for (c, s) in supports.iter().enumerate() {
        if dist(s) < dist(&supports[best]) {
            best = c;
        }
    }
    best
}

/// Central differences `(f(x + h) − f(x − h)) / 2h` for every entry of every
/// named parameter.
pub fn fd_gradients(params: &ParamSet, names: &[&str], h: f64, mut f: impl FnMut(&ParamSet) -> f64) -> ParamSet {
    let mut out = ParamSet::new();
    for &name in names {
        let base = &params[name];
        let mut g = Matrix::zeros(base.rows(), base.cols());
        for i in 0..base.rows() {
            for j in 0..base.cols() {
                let mut p = params.clone();
                let m = p.get_mut(name).unwrap();
                m.set(i, j, base.get(i, j) + h);
                let up = f(&p);
                let m = p.get_mut(name).unwrap();
                m.set(i, j, base.get(i, j) - h);
                let down = f(&p);
                g.set(i, j, (up - down) / (2.0 * h));
            }
        }
        out.insert(name.to_string(), g);
    }
    out
}

/// Largest `|a − n| / max(|a|, |n|)` over entries where either side exceeds
/// `floor` in magnitude.
pub fn max_rel_error(analytic: &Matrix<f64>, numeric: &Matrix<f64>, floor: f64) -> f64 {
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .filter(|(a, n)| a.abs() > floor || n.abs() > floor)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}
