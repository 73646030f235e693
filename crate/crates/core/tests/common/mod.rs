//! Independent oracles shared by the integration tests. Nothing here calls the
//! solver under test.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, p), |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Σ(y − Xβ)² + λ Σ w_j|β_j| + α Σ_{w_j > 0} β_j², from a precomputed Gram matrix.
pub struct GramObjective {
    pub yy: f64,
    pub xty: Vec<f64>,
    pub gram: Vec<Vec<f64>>,
    pub lambda: f64,
    pub weights: Vec<f64>,
    pub ridge: f64,
}

impl GramObjective {
    pub fn new(x: ArrayView2<f64>, y: ArrayView1<f64>, lambda: f64, weights: &[f64], ridge: f64) -> Self {
        let p = x.ncols();
        let mut gram = vec![vec![0.0; p]; p];
        for j in 0..p {
            for k in 0..p {
                gram[j][k] = x.column(j).iter().zip(x.column(k)).map(|(a, b)| a * b).sum();
            }
        }
        Self {
            yy: y.iter().map(|v| v * v).sum(),
            xty: (0..p).map(|j| x.column(j).iter().zip(y).map(|(a, b)| a * b).sum()).collect(),
            gram,
            lambda,
            weights: weights.to_vec(),
            ridge,
        }
    }

    pub fn eval(&self, b: &[f64]) -> f64 {
        let p = b.len();
        let mut quad = 0.0;
        for j in 0..p {
            for k in 0..p {
                quad += b[j] * self.gram[j][k] * b[k];
            }
        }
        let lin: f64 = (0..p).map(|j| b[j] * self.xty[j]).sum();
        let pen: f64 = (0..p)
            .map(|j| {
                let w = self.weights[j];
                self.lambda * w * b[j].abs() + if w > 0.0 { self.ridge * b[j] * b[j] } else { 0.0 }
            })
            .sum();
        self.yy - 2.0 * lin + quad + pen
    }
}

/// Iterated zoom over a regular grid: search the full box, recenter on the best
/// point, shrink to three grid steps, repeat.
pub fn brute_force_minimum(obj: &GramObjective, half_width: f64, points: usize, rounds: usize) -> (Vec<f64>, f64) {
    let p = obj.xty.len();
    let mut center = vec![0.0; p];
    let mut h = half_width;
    let mut best = (center.clone(), obj.eval(&center));
    for _ in 0..rounds {
        let step = 2.0 * h / (points - 1) as f64;
        let total = points.pow(p as u32);
        for idx in 0..total {
            let mut rem = idx;
            let b: Vec<f64> = (0..p)
                .map(|j| {
                    let i = rem % points;
                    rem /= points;
                    center[j] - h + step * i as f64
                })
                .collect();
            let f = obj.eval(&b);
            if f < best.1 {
                best = (b, f);
            }
        }
        // coordinates sitting exactly at zero are a common optimum; always try them
        for mask in 0..(1usize << p) {
            let b: Vec<f64> = (0..p).map(|j| if mask >> j & 1 == 1 { 0.0 } else { best.0[j] }).collect();
            let f = obj.eval(&b);
            if f < best.1 {
                best = (b, f);
            }
        }
        center = best.0.clone();
        h = 3.0 * step;
    }
    best
}

/// Largest KKT violation of the stated objective, measured as
/// `max_j residual_j / (1 + λ w_j)`.
pub fn kkt_violation(x: ArrayView2<f64>, y: ArrayView1<f64>, beta: ArrayView1<f64>, lambda: f64, weights: &[f64], ridge: f64) -> f64 {
    let n = x.nrows();
    let p = x.ncols();
    let mut resid = vec![0.0; n];
    for i in 0..n {
        let fit: f64 = (0..p).map(|j| x[[i, j]] * beta[j]).sum();
        resid[i] = y[i] - fit;
    }
    let mut worst: f64 = 0.0;
    for j in 0..p {
        let w = weights[j];
        let ridge_term = if w > 0.0 { 2.0 * ridge * beta[j] } else { 0.0 };
        let g: f64 = 2.0 * (0..n).map(|i| x[[i, j]] * resid[i]).sum::<f64>() - ridge_term;
        let lw = lambda * w;
        let r = if beta[j] != 0.0 {
            (g - lw * beta[j].signum()).abs()
        } else {
            (g.abs() - lw).max(0.0)
        };
        worst = worst.max(r / (1.0 + lw));
    }
    worst
}

/// Least squares through nalgebra's SVD.
pub fn ols(x: ArrayView2<f64>, y: ArrayView1<f64>) -> Array1<f64> {
    let (n, p) = x.dim();
    let xm = DMatrix::from_fn(n, p, |i, j| x[[i, j]]);
    let yv = DVector::from_fn(n, |i, _| y[i]);
    let sol = xm.svd(true, true).solve(&yv, 1e-14).expect("svd solve");
    Array1::from_iter(sol.iter().copied())
}

/// Columns made mutually orthogonal by Gram–Schmidt, then rescaled.
pub fn orthogonal_design(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Array2<f64> {
    let mut x = gaussian_matrix(rng, n, p);
    for j in 0..p {
        for k in 0..j {
            let num: f64 = x.column(j).dot(&x.column(k));
            let den: f64 = x.column(k).dot(&x.column(k));
            let ck = x.column(k).to_owned();
            x.column_mut(j).scaled_add(-num / den, &ck);
        }
        let scale = 0.5 + rng.random::<f64>() * 3.0;
        let norm = x.column(j).dot(&x.column(j)).sqrt();
        x.column_mut(j).mapv_inplace(|v| v / norm * scale * (n as f64).sqrt());
    }
    x
}
