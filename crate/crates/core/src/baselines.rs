//! Comparison methods: target-only adaptive lasso and two-step Trans-Lasso.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::design::FeatureMap;
use crate::error::{Result, RtlError};
use crate::estimator::{policy_size, FitConfig, Policy};
use crate::penalized::{fit_adaptive_lasso, fit_tuned, standardizing_weights, CvSettings, LambdaRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineMethod {
    TargOnly,
    TransLasso,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub lambda: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub method: BaselineMethod,
    pub beta_t: Array1<f64>,
    pub feature_map: FeatureMap,
    pub steps: Vec<StepDiagnostics>,
}

impl BaselineModel {
    pub fn policy(&self) -> Policy {
        Policy::new(self.beta_t.clone(), self.feature_map.clone()).expect("lengths match the feature map")
    }

    pub fn policy_size(&self) -> usize {
        policy_size(self.beta_t.view(), &self.feature_map.layout())
    }

    pub fn converged(&self) -> bool {
        self.steps.iter().all(|s| s.converged)
    }
}

/// Adaptive lasso on the target sample alone.
pub fn fit_targ_only(target: &Sample, map: &FeatureMap, config: &FitConfig, seed: u64) -> Result<BaselineModel> {
    if target.len() < 2 {
        return Err(RtlError::invalid(format!("target sample needs at least 2 rows, got {}", target.len())));
    }
    let x = target.design(map)?;
    let tuned = fit_adaptive_lasso(
        x.view(),
        target.outcome.view(),
        &[map.layout().intercept],
        config.lambda,
        &config.adaptive,
        seed,
    )?;
    Ok(BaselineModel {
        method: BaselineMethod::TargOnly,
        steps: vec![StepDiagnostics {
            lambda: tuned.fit.lambda,
            converged: tuned.fit.converged,
            iterations: tuned.fit.iterations,
        }],
        beta_t: tuned.fit.coefficients,
        feature_map: map.clone(),
    })
}

/// Settings for the two Trans-Lasso steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct TransLassoConfig {
    pub cv: CvSettings,
    pub pool_lambda: LambdaRule,
    pub correction_lambda: LambdaRule,
}

impl From<&FitConfig> for TransLassoConfig {
    fn from(cfg: &FitConfig) -> Self {
        Self {
            cv: CvSettings {
                ridge_ratio: 0.0,
                ..cfg.adaptive.cv
            },
            pool_lambda: cfg.lambda,
            correction_lambda: cfg.lambda,
        }
    }
}

/// Lasso on the stacked source and target rows, then a lasso bias correction on
/// the target residuals. Both steps use standardizing weights with the
/// intercept unpenalized.
pub fn fit_translasso(
    source: &Sample,
    target: &Sample,
    map: &FeatureMap,
    config: &TransLassoConfig,
    seed: u64,
) -> Result<BaselineModel> {
    if target.is_empty() {
        return Err(RtlError::invalid("Trans-Lasso needs a nonempty target sample"));
    }
    if source.q() != target.q() {
        return Err(RtlError::DimensionMismatch {
            context: "source covariates",
            expected: target.q(),
            received: source.q(),
        });
    }
    let intercept = map.layout().intercept;
    let pooled = source.stack(target)?;
    let xp = pooled.design(map)?;
    let pool = fit_tuned(
        xp.view(),
        pooled.outcome.view(),
        standardizing_weights(xp.view(), &[intercept]),
        config.pool_lambda,
        &config.cv,
        seed,
    )?;

    let xt = target.design(map)?;
    let resid = &target.outcome - &xt.dot(&pool.fit.coefficients);
    let correction = fit_tuned(
        xt.view(),
        resid.view(),
        standardizing_weights(xt.view(), &[intercept]),
        config.correction_lambda,
        &config.cv,
        seed.wrapping_add(1),
    )?;

    let steps = [&pool, &correction]
        .iter()
        .map(|t| StepDiagnostics {
            lambda: t.fit.lambda,
            converged: t.fit.converged,
            iterations: t.fit.iterations,
        })
        .collect();
    Ok(BaselineModel {
        method: BaselineMethod::TransLasso,
        beta_t: &pool.fit.coefficients + &correction.fit.coefficients,
        feature_map: map.clone(),
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn sample(n: usize, beta: &Array1<f64>, noise: f64, seed: u64) -> Sample {
        let q = (beta.len() - 2) / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = Array2::from_shape_fn((n, q), |_| rng.sample::<f64, _>(StandardNormal));
        let arms: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let x = FeatureMap::binary(q).encode_matrix(o.view(), &arms).unwrap();
        let y = x.dot(beta) + Array1::from_shape_fn(n, |_| noise * rng.sample::<f64, _>(StandardNormal));
        Sample::new(o, arms, y).unwrap()
    }

    fn sparse_beta() -> Array1<f64> {
        // q = 4: intercept, trt, 4 mains, 4 interactions
        array![1.0, 0.0, 2.0, 0.0, 0.0, -1.5, 0.0, 3.0, 0.0, 0.0]
    }

    #[test]
    fn targ_only_recovers_support_from_noiseless_data() {
        let beta = sparse_beta();
        let target = sample(60, &beta, 0.0, 1);
        let m = fit_targ_only(&target, &FeatureMap::binary(4), &FitConfig::default(), 2).unwrap();
        for j in 1..beta.len() {
            assert_eq!(m.beta_t[j] != 0.0, beta[j] != 0.0, "coordinate {j}: {}", m.beta_t);
        }
        assert_eq!(m.policy_size(), 1);
    }

    #[test]
    fn targ_only_zero_outcome_gives_zero_model() {
        let mut target = sample(30, &sparse_beta(), 1.0, 3);
        target.outcome.fill(0.0);
        let m = fit_targ_only(&target, &FeatureMap::binary(4), &FitConfig::default(), 4).unwrap();
        assert!(m.beta_t.iter().all(|b| b.abs() < 1e-12));
    }

    #[test]
    fn targ_only_is_deterministic() {
        let target = sample(30, &sparse_beta(), 1.0, 5);
        let map = FeatureMap::binary(4);
        let a = fit_targ_only(&target, &map, &FitConfig::default(), 6).unwrap();
        let b = fit_targ_only(&target, &map, &FitConfig::default(), 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn translasso_zero_correction_at_lambda_max() {
        let beta = sparse_beta();
        let source = sample(80, &beta, 1.0, 7);
        let target = sample(30, &(&beta + &array![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]), 1.0, 8);
        let map = FeatureMap::binary(4);
        let mut cfg = TransLassoConfig::default();
        cfg.correction_lambda = LambdaRule::MaxMultiple(1.0);
        let m = fit_translasso(&source, &target, &map, &cfg, 9).unwrap();

        let pooled = source.stack(&target).unwrap();
        let xp = pooled.design(&map).unwrap();
        let pool = fit_tuned(
            xp.view(),
            pooled.outcome.view(),
            standardizing_weights(xp.view(), &[0]),
            LambdaRule::CrossValidated,
            &cfg.cv,
            9,
        )
        .unwrap();
        for j in 1..beta.len() {
            assert_eq!(m.beta_t[j], pool.fit.coefficients[j]);
        }
        assert_eq!(m.steps.len(), 2);
    }

    #[test]
    fn translasso_without_source_rows_is_two_target_fits() {
        let target = sample(30, &sparse_beta(), 1.0, 10);
        let map = FeatureMap::binary(4);
        let cfg = TransLassoConfig::default();
        let m = fit_translasso(&Sample::empty(4), &target, &map, &cfg, 11).unwrap();

        let x = target.design(&map).unwrap();
        let w = standardizing_weights(x.view(), &[0]);
        let first = fit_tuned(x.view(), target.outcome.view(), w.clone(), cfg.pool_lambda, &cfg.cv, 11).unwrap();
        let resid = &target.outcome - &x.dot(&first.fit.coefficients);
        let second = fit_tuned(x.view(), resid.view(), w, cfg.correction_lambda, &cfg.cv, 12).unwrap();
        assert_eq!(m.beta_t, &first.fit.coefficients + &second.fit.coefficients);
    }

    #[test]
    fn translasso_empty_signal_is_near_zero() {
        let zero = Array1::zeros(10);
        let mut source = sample(80, &zero, 1.0, 13);
        let mut target = sample(30, &zero, 1.0, 14);
        source.outcome.fill(0.0);
        target.outcome.fill(0.0);
        let m = fit_translasso(&source, &target, &FeatureMap::binary(4), &TransLassoConfig::default(), 15).unwrap();
        assert!(m.beta_t.iter().all(|b| b.abs() < 1e-12));
    }
}
