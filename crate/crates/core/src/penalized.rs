//! Weighted lasso / elastic-net least squares by cyclic coordinate descent.
//!
//! The objective is on the residual-sum-of-squares scale:
//!
//! ```text
//! Σ_i (y_i - x_iᵀβ)² + λ Σ_j w_j |β_j| + α Σ_{j: w_j > 0} β_j²
//! ```
//!
//! Columns are centered (when an unpenalized constant column is present) and
//! scaled to unit variance internally. The per-coordinate penalty is rescaled
//! accordingly, so the returned coefficients minimize the objective above on
//! the caller's original scale.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RtlError};

/// `sign(z) · max(|z| - t, 0)`.
#[inline]
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub lambda: f64,
    /// A zero entry leaves that coordinate unpenalized (and exempt from the ridge term).
    pub weights: Array1<f64>,
    pub ridge_alpha: f64,
}

impl PenaltySpec {
    pub fn new(lambda: f64, weights: Array1<f64>, ridge_alpha: f64) -> Result<Self> {
        let spec = Self {
            lambda,
            weights,
            ridge_alpha,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn lasso(lambda: f64, weights: Array1<f64>) -> Result<Self> {
        Self::new(lambda, weights, 0.0)
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(RtlError::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.ridge_alpha >= 0.0 && self.ridge_alpha.is_finite()) {
            return Err(RtlError::invalid(format!(
                "ridge_alpha must be finite and >= 0, got {}",
                self.ridge_alpha
            )));
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(RtlError::invalid(format!("penalty weights must be finite and >= 0, got {w}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenalizedFit {
    pub coefficients: Array1<f64>,
    pub lambda: f64,
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl PenalizedFit {
    pub fn nonzero_count(&self) -> usize {
        self.coefficients.iter().filter(|b| **b != 0.0).count()
    }
}

/// Stopping rule for coordinate descent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub tol: f64,
    /// Maximum number of sweeps.
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 10_000,
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(RtlError::invalid(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(RtlError::invalid("max_iter must be >= 1"));
        }
        Ok(())
    }
}

/// Settings for λ-path construction and cross-validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSettings {
    pub folds: usize,
    pub grid_size: usize,
    /// `λ_min / λ_max`.
    pub lambda_min_ratio: f64,
    /// Ridge coefficient as a multiple of λ along the path (0 for pure lasso).
    pub ridge_ratio: f64,
    pub solver: SolverOptions,
}

impl Default for CvSettings {
    fn default() -> Self {
        Self {
            folds: 5,
            grid_size: 100,
            lambda_min_ratio: 1e-3,
            ridge_ratio: 0.0,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPath {
    pub grid: Vec<f64>,
    pub cv_errors: Vec<f64>,
    pub selected: usize,
}

impl LambdaPath {
    pub fn selected_lambda(&self) -> f64 {
        self.grid[self.selected]
    }
}

pub(crate) fn check_finite(x: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(RtlError::DimensionMismatch {
            context: "response vector",
            expected: x.nrows(),
            received: y.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(RtlError::NonFinite("design matrix"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(RtlError::NonFinite("response vector"));
    }
    Ok(())
}

/// Standardized least-squares problem shared by every λ on a path.
struct Prepared {
    p: usize,
    /// Unpenalized constant column absorbed by centering, with its constant value.
    intercept: Option<(usize, f64)>,
    /// Columns with nonzero spread after centering.
    active: Vec<usize>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Gram matrix of the standardized active columns, row-major.
    gram: Vec<f64>,
    /// Standardized active columns times the (centered) response.
    zy: Vec<f64>,
    y_mean: f64,
}

impl Prepared {
    fn new(x: ArrayView2<f64>, y: ArrayView1<f64>, weights: ArrayView1<f64>) -> Result<Self> {
        let (n, p) = x.dim();
        if weights.len() != p {
            return Err(RtlError::DimensionMismatch {
                context: "penalty weights",
                expected: p,
                received: weights.len(),
            });
        }
        if n == 0 {
            return Err(RtlError::invalid("design matrix has no rows"));
        }
        let nf = n as f64;
        let intercept = (0..p).find_map(|j| {
            let col = x.column(j);
            let c = col[0];
            (weights[j] == 0.0 && c != 0.0 && col.iter().all(|&v| v == c)).then_some((j, c))
        });

        let mut mean = vec![0.0; p];
        let mut scale = vec![0.0; p];
        let mut active = Vec::with_capacity(p);
        for j in 0..p {
            if intercept.map(|(k, _)| k) == Some(j) {
                continue;
            }
            let col = x.column(j);
            let m = if intercept.is_some() { col.sum() / nf } else { 0.0 };
            let ss: f64 = col.iter().map(|&v| (v - m) * (v - m)).sum();
            let s = (ss / nf).sqrt();
            let magnitude = col.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
            mean[j] = m;
            scale[j] = s;
            if s > 1e-10 * magnitude {
                active.push(j);
            }
        }
        let y_mean = if intercept.is_some() { y.sum() / nf } else { 0.0 };

        let m = active.len();
        let mut z = ndarray::Array2::<f64>::zeros((n, m));
        for (k, &j) in active.iter().enumerate() {
            let (mu, s) = (mean[j], scale[j]);
            z.column_mut(k)
                .iter_mut()
                .zip(x.column(j))
                .for_each(|(d, &v)| *d = (v - mu) / s);
        }
        let gram = z.t().dot(&z).into_raw_vec_and_offset().0;
        let yc = y.mapv(|v| v - y_mean);
        let zy = z.t().dot(&yc).to_vec();
        Ok(Self {
            p,
            intercept,
            active,
            mean,
            scale,
            gram,
            zy,
            y_mean,
        })
    }

    fn m(&self) -> usize {
        self.active.len()
    }

    /// Per-active-coordinate (ℓ1 half-threshold, ridge) on the standardized scale.
    fn coordinate_penalties(&self, lambda: f64, weights: ArrayView1<f64>, ridge: f64) -> Vec<(f64, f64)> {
        self.active
            .iter()
            .map(|&j| {
                let w = weights[j];
                if w == 0.0 {
                    (0.0, 0.0)
                } else {
                    let s = self.scale[j];
                    (0.5 * lambda * w / s, ridge / (s * s))
                }
            })
            .collect()
    }

    fn to_original(&self, b: &[f64]) -> Array1<f64> {
        let mut beta = Array1::zeros(self.p);
        for (k, &j) in self.active.iter().enumerate() {
            beta[j] = b[k] / self.scale[j];
        }
        if let Some((j, c)) = self.intercept {
            let shift: f64 = self.active.iter().map(|&l| self.mean[l] * beta[l]).sum();
            beta[j] = (self.y_mean - shift) / c;
        }
        beta
    }

    fn fresh_gradient(&self, b: &[f64], g: &mut [f64]) {
        let m = self.m();
        for k in 0..m {
            let row = &self.gram[k * m..(k + 1) * m];
            g[k] = self.zy[k] - row.iter().zip(b).map(|(a, c)| a * c).sum::<f64>();
        }
    }

    /// One coordinate update; returns the absolute change.
    #[inline]
    fn update(&self, k: usize, b: &mut [f64], g: &mut [f64], pen: (f64, f64)) -> f64 {
        let m = self.m();
        let gkk = self.gram[k * m + k];
        let rho = g[k] + gkk * b[k];
        let new = soft_threshold(rho, pen.0) / (gkk + pen.1);
        let delta = new - b[k];
        if delta != 0.0 {
            b[k] = new;
            let col = &self.gram[k * m..(k + 1) * m];
            g.iter_mut().zip(col).for_each(|(gl, glk)| *gl -= glk * delta);
        }
        delta.abs()
    }

    /// Subgradient optimality on the original scale, with the gradient recomputed from scratch.
    fn kkt_satisfied(
        &self,
        b: &[f64],
        g: &mut [f64],
        pens: &[(f64, f64)],
        lambda: f64,
        weights: ArrayView1<f64>,
        tol: f64,
    ) -> bool {
        self.fresh_gradient(b, g);
        self.active.iter().enumerate().all(|(k, &j)| {
            let s = self.scale[j];
            let lw = if weights[j] == 0.0 { 0.0 } else { lambda * weights[j] };
            // original-scale gradient of the smooth part is s * (−2 g + 2 ridge b)
            let smooth = s * (2.0 * g[k] - 2.0 * pens[k].1 * b[k]);
            if b[k] != 0.0 {
                (smooth - lw * b[k].signum()).abs() <= tol * (1.0 + lw)
            } else {
                smooth.abs() <= lw + tol
            }
        })
    }

    fn solve(
        &self,
        lambda: f64,
        weights: ArrayView1<f64>,
        ridge: f64,
        b: &mut [f64],
        opts: SolverOptions,
    ) -> (usize, bool) {
        let m = self.m();
        let pens = self.coordinate_penalties(lambda, weights, ridge);
        let mut g = vec![0.0; m];
        self.fresh_gradient(b, &mut g);
        let mut iterations = 0;
        while iterations < opts.max_iter {
            let mut max_change = 0.0f64;
            for k in 0..m {
                max_change = max_change.max(self.update(k, b, &mut g, pens[k]));
            }
            iterations += 1;
            if max_change < opts.tol && self.kkt_satisfied(b, &mut g, &pens, lambda, weights, opts.tol) {
                return (iterations, true);
            }
            // cycle on the current support until it settles
            let support: Vec<usize> = (0..m).filter(|&k| b[k] != 0.0).collect();
            while iterations < opts.max_iter && !support.is_empty() {
                let mut inner = 0.0f64;
                for &k in &support {
                    inner = inner.max(self.update(k, b, &mut g, pens[k]));
                }
                iterations += 1;
                if inner < opts.tol {
                    break;
                }
            }
        }
        (iterations, false)
    }

    /// Largest λ at which a penalized coordinate can leave zero, or `None` when nothing is penalized.
    fn lambda_max(&self, weights: ArrayView1<f64>, opts: SolverOptions) -> Option<f64> {
        let mut b = vec![0.0; self.m()];
        // fit the unpenalized coordinates alone
        self.solve(f64::INFINITY, weights, 0.0, &mut b, opts);
        let mut g = vec![0.0; self.m()];
        self.fresh_gradient(&b, &mut g);
        let penalized: Vec<usize> = (0..weights.len())
            .filter(|&j| weights[j] > 0.0 && self.intercept.map(|(k, _)| k) != Some(j))
            .collect();
        if penalized.is_empty() {
            return None;
        }
        let lmax = self
            .active
            .iter()
            .enumerate()
            .filter(|(_, &j)| weights[j] > 0.0)
            .map(|(k, &j)| 2.0 * self.scale[j] * g[k].abs() / weights[j])
            .fold(0.0f64, f64::max);
        // nudge so λ_max itself yields the empty model in floating point
        Some(lmax * (1.0 + 1e-10))
    }
}

/// Objective value on the original scale.
pub fn objective(x: ArrayView2<f64>, y: ArrayView1<f64>, beta: ArrayView1<f64>, penalty: &PenaltySpec) -> f64 {
    let resid = &y - &x.dot(&beta);
    let rss = resid.dot(&resid);
    let l1: f64 = beta
        .iter()
        .zip(&penalty.weights)
        .map(|(b, w)| w * b.abs())
        .sum();
    let ridge: f64 = beta
        .iter()
        .zip(&penalty.weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(b, _)| b * b)
        .sum();
    let l1_term = if penalty.lambda == 0.0 { 0.0 } else { penalty.lambda * l1 };
    rss + l1_term + penalty.ridge_alpha * ridge
}

/// Minimize the weighted lasso / elastic-net objective from a zero start.
pub fn fit_weighted_lasso(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    penalty: &PenaltySpec,
    tol: f64,
    max_iter: usize,
) -> Result<PenalizedFit> {
    let opts = SolverOptions { tol, max_iter };
    opts.validate()?;
    penalty.validate()?;
    check_finite(x, y)?;
    let prep = Prepared::new(x, y, penalty.weights.view())?;
    let mut b = vec![0.0; prep.m()];
    let (iterations, converged) = prep.solve(penalty.lambda, penalty.weights.view(), penalty.ridge_alpha, &mut b, opts);
    let coefficients = prep.to_original(&b);
    Ok(PenalizedFit {
        objective_value: objective(x, y, coefficients.view(), penalty),
        coefficients,
        lambda: penalty.lambda,
        iterations,
        converged,
    })
}

/// Fit every λ of `grid` in order, warm-starting each from the previous solution.
pub fn fit_path(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    weights: ArrayView1<f64>,
    grid: &[f64],
    ridge_ratio: f64,
    opts: SolverOptions,
    warm_start: bool,
) -> Result<Vec<PenalizedFit>> {
    opts.validate()?;
    check_finite(x, y)?;
    let prep = Prepared::new(x, y, weights)?;
    let mut b = vec![0.0; prep.m()];
    let mut out = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let penalty = PenaltySpec::new(lambda, weights.to_owned(), ridge_ratio * lambda)?;
        if !warm_start {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        let (iterations, converged) = prep.solve(lambda, weights, penalty.ridge_alpha, &mut b, opts);
        let coefficients = prep.to_original(&b);
        out.push(PenalizedFit {
            objective_value: objective(x, y, coefficients.view(), &penalty),
            coefficients,
            lambda,
            iterations,
            converged,
        });
    }
    Ok(out)
}

/// `max_j |2 x_jᵀ r₀| / w_j` over penalized columns, where `r₀` is the residual
/// after fitting the unpenalized columns. `None` when every weight is zero.
pub fn lambda_max(x: ArrayView2<f64>, y: ArrayView1<f64>, weights: ArrayView1<f64>) -> Result<Option<f64>> {
    check_finite(x, y)?;
    let prep = Prepared::new(x, y, weights)?;
    Ok(prep.lambda_max(weights, SolverOptions::default()))
}

/// Geometric grid from `lambda_max` down to `lambda_max * min_ratio`.
pub fn lambda_grid(lambda_max: f64, grid_size: usize, min_ratio: f64) -> Vec<f64> {
    if grid_size <= 1 {
        return vec![lambda_max];
    }
    let step = min_ratio.ln() / (grid_size - 1) as f64;
    (0..grid_size)
        .map(|i| lambda_max * (step * i as f64).exp())
        .collect()
}

/// Fold index per observation: a seeded shuffle dealt round-robin, so sizes differ by at most one.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut folds = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    folds
}

/// Cross-validated λ over a geometric grid. Ties go to the larger λ.
pub fn select_lambda_cv(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    weights: ArrayView1<f64>,
    settings: &CvSettings,
    seed: u64,
) -> Result<LambdaPath> {
    let n = x.nrows();
    if settings.folds < 2 {
        return Err(RtlError::invalid(format!("need at least 2 folds, got {}", settings.folds)));
    }
    if n < settings.folds {
        return Err(RtlError::invalid(format!(
            "{} observations cannot fill {} folds",
            n, settings.folds
        )));
    }
    if settings.grid_size == 0 {
        return Err(RtlError::invalid("grid_size must be >= 1"));
    }
    check_finite(x, y)?;
    let grid = match lambda_max(x, y, weights)? {
        Some(lmax) if lmax > 0.0 => lambda_grid(lmax, settings.grid_size, settings.lambda_min_ratio),
        _ => vec![0.0],
    };

    let folds = fold_assignment(n, settings.folds, seed);
    let mut cv_errors = vec![0.0; grid.len()];
    for f in 0..settings.folds {
        let train: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
        let xt = x.select(Axis(0), &train);
        let yt = y.select(Axis(0), &train);
        let xv = x.select(Axis(0), &test);
        let yv = y.select(Axis(0), &test);
        let fits = fit_path(xt.view(), yt.view(), weights, &grid, settings.ridge_ratio, settings.solver, true)?;
        for (err, fit) in cv_errors.iter_mut().zip(&fits) {
            let resid = &yv - &xv.dot(&fit.coefficients);
            *err += resid.dot(&resid) / test.len() as f64;
        }
    }
    cv_errors.iter_mut().for_each(|e| *e /= settings.folds as f64);

    let mut selected = 0;
    for (i, &e) in cv_errors.iter().enumerate() {
        if e < cv_errors[selected] {
            selected = i;
        }
    }
    Ok(LambdaPath {
        grid,
        cv_errors,
        selected,
    })
}

/// Column standard deviations as lasso weights, making a plain lasso scale-equivariant.
/// Excluded columns get weight 0; zero-spread columns get weight 1.
pub fn standardizing_weights(x: ArrayView2<f64>, exclude: &[usize]) -> Array1<f64> {
    let n = x.nrows() as f64;
    Array1::from_iter((0..x.ncols()).map(|j| {
        if exclude.contains(&j) {
            return 0.0;
        }
        let col = x.column(j);
        let m = col.sum() / n;
        let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
        if sd > 0.0 {
            sd
        } else {
            1.0
        }
    }))
}

/// How the final λ of a fit is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    #[default]
    CrossValidated,
    Fixed(f64),
    /// A multiple of the problem's λ_max; any factor ≥ 1 gives the empty model.
    MaxMultiple(f64),
}

/// Penalized fit with its λ chosen by `rule`.
#[derive(Debug, Clone)]
pub struct TunedFit {
    pub fit: PenalizedFit,
    pub weights: Array1<f64>,
    pub path: Option<LambdaPath>,
}

pub fn fit_tuned(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    weights: Array1<f64>,
    rule: LambdaRule,
    settings: &CvSettings,
    seed: u64,
) -> Result<TunedFit> {
    let (grid, path) = match rule {
        LambdaRule::CrossValidated => {
            let path = select_lambda_cv(x, y, weights.view(), settings, seed)?;
            (path.grid[..=path.selected].to_vec(), Some(path))
        }
        LambdaRule::Fixed(lambda) => (vec![lambda], None),
        LambdaRule::MaxMultiple(factor) => {
            let lmax = lambda_max(x, y, weights.view())?.unwrap_or(0.0);
            (vec![lmax * factor], None)
        }
    };
    let mut fits = fit_path(x, y, weights.view(), &grid, settings.ridge_ratio, settings.solver, true)?;
    let fit = fits.pop().expect("non-empty grid");
    Ok(TunedFit { fit, weights, path })
}

/// Settings for the adaptive lasso and its elastic-net pilot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveSettings {
    pub cv: CvSettings,
    pub gamma: f64,
    /// Pilot ridge coefficient as a multiple of the pilot λ.
    pub pilot_ridge_ratio: f64,
}

impl Default for AdaptiveSettings {
    fn default() -> Self {
        Self {
            cv: CvSettings::default(),
            gamma: 1.0,
            pilot_ridge_ratio: 1e-2,
        }
    }
}

/// `w_j = (|β̂_j| + 1/n)^(-γ)` from an elastic-net pilot; excluded coordinates get 0.
pub fn weights_from_pilot(pilot: ArrayView1<f64>, n: usize, gamma: f64, exclude: &[usize]) -> Array1<f64> {
    let floor = 1.0 / n as f64;
    Array1::from_iter(pilot.iter().enumerate().map(|(j, b)| {
        if exclude.contains(&j) {
            0.0
        } else {
            (b.abs() + floor).powf(-gamma)
        }
    }))
}

/// Adaptive weights built from a cross-validated elastic-net pilot fit.
pub fn adaptive_weights(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    exclude: &[usize],
    settings: &AdaptiveSettings,
    seed: u64,
) -> Result<Array1<f64>> {
    if !(settings.gamma > 0.0) {
        return Err(RtlError::invalid(format!("gamma must be > 0, got {}", settings.gamma)));
    }
    let pilot_cv = CvSettings {
        ridge_ratio: settings.pilot_ridge_ratio,
        ..settings.cv
    };
    let pilot = fit_tuned(
        x,
        y,
        standardizing_weights(x, exclude),
        LambdaRule::CrossValidated,
        &pilot_cv,
        seed,
    )?;
    Ok(weights_from_pilot(pilot.fit.coefficients.view(), x.nrows(), settings.gamma, exclude))
}

/// Adaptive lasso: elastic-net pilot weights, then a weighted lasso with λ chosen by `rule`.
pub fn fit_adaptive_lasso(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    exclude: &[usize],
    rule: LambdaRule,
    settings: &AdaptiveSettings,
    seed: u64,
) -> Result<TunedFit> {
    let weights = adaptive_weights(x, y, exclude, settings, seed)?;
    let cv = CvSettings {
        ridge_ratio: 0.0,
        ..settings.cv
    };
    fit_tuned(x, y, weights, rule, &cv, seed.wrapping_add(1))
}
