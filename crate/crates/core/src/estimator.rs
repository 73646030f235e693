//! The reluctant transfer estimator.
//!
//! Given source coefficients `β̂_s`, the target outcome is replaced by the
//! pseudo-outcome `Ỹ = Y - Φβ̂_s` and the shift `θ̂` is estimated by an adaptive
//! lasso on `(Φ, Ỹ)` with an unpenalized intercept. The target model is
//! `β̂_t = β̂_s + θ̂`; a shift coordinate becomes nonzero only when the target
//! data pays for it.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::design::{CoefficientLayout, FeatureMap, TreatmentCoding};
use crate::error::{Result, RtlError};
use crate::penalized::{fit_adaptive_lasso, AdaptiveSettings, LambdaRule};

/// Solver, cross-validation and λ-selection settings for one penalized fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub adaptive: AdaptiveSettings,
    pub lambda: LambdaRule,
}

impl FitConfig {
    pub fn with_lambda(mut self, rule: LambdaRule) -> Self {
        self.lambda = rule;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    beta_s: Array1<f64>,
    feature_map: FeatureMap,
    n_source: usize,
}

impl SourceModel {
    pub fn new(beta_s: Array1<f64>, feature_map: FeatureMap, n_source: usize) -> Result<Self> {
        if beta_s.len() != feature_map.p() {
            return Err(RtlError::DimensionMismatch {
                context: "source coefficients",
                expected: feature_map.p(),
                received: beta_s.len(),
            });
        }
        if n_source == 0 {
            return Err(RtlError::invalid("source model must be trained on at least one row"));
        }
        if beta_s.iter().any(|b| !b.is_finite()) {
            return Err(RtlError::NonFinite("source coefficients"));
        }
        Ok(Self {
            beta_s,
            feature_map,
            n_source,
        })
    }

    /// Adaptive lasso on the source sample, intercept unpenalized.
    pub fn fit(source: &Sample, feature_map: FeatureMap, config: &FitConfig, seed: u64) -> Result<Self> {
        let x = source.design(&feature_map)?;
        let tuned = fit_adaptive_lasso(
            x.view(),
            source.outcome.view(),
            &[feature_map.layout().intercept],
            config.lambda,
            &config.adaptive,
            seed,
        )?;
        if !tuned.fit.converged {
            log::warn!("source fit stopped after {} sweeps without converging", tuned.fit.iterations);
        }
        Self::new(tuned.fit.coefficients, feature_map, source.len())
    }

    pub fn beta(&self) -> ArrayView1<'_, f64> {
        self.beta_s.view()
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.feature_map
    }

    pub fn n_source(&self) -> usize {
        self.n_source
    }

    pub fn policy(&self) -> Policy {
        Policy::new(self.beta_s.clone(), self.feature_map.clone()).expect("length checked at construction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RtlModel {
    pub beta_s: Array1<f64>,
    pub theta_hat: Array1<f64>,
    pub beta_t: Array1<f64>,
    pub lambda_used: f64,
    pub weights_used: Array1<f64>,
    pub feature_map: FeatureMap,
    pub converged: bool,
    pub seed: u64,
}

impl RtlModel {
    pub fn policy(&self) -> Policy {
        Policy::new(self.beta_t.clone(), self.feature_map.clone()).expect("lengths match the feature map")
    }

    pub fn policy_size(&self) -> usize {
        policy_size(self.beta_t.view(), &self.feature_map.layout())
    }
}

/// Greedy rule `argmax_a Φ(o, a)ᵀβ`; ties go to the lowest arm index.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    beta: Array1<f64>,
    feature_map: FeatureMap,
}

impl Policy {
    pub fn new(beta: Array1<f64>, feature_map: FeatureMap) -> Result<Self> {
        if beta.len() != feature_map.p() {
            return Err(RtlError::DimensionMismatch {
                context: "policy coefficients",
                expected: feature_map.p(),
                received: beta.len(),
            });
        }
        Ok(Self { beta, feature_map })
    }

    pub fn coefficients(&self) -> ArrayView1<'_, f64> {
        self.beta.view()
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.feature_map
    }

    /// Estimated Q-value of each arm at `o`.
    pub fn q_values(&self, o: ArrayView1<f64>) -> Result<Vec<f64>> {
        (0..self.feature_map.num_arms())
            .map(|a| self.feature_map.predict(o, a, self.beta.view()))
            .collect()
    }

    pub fn decide(&self, o: ArrayView1<f64>) -> Result<usize> {
        let q = self.q_values(o)?;
        let mut best = 0;
        for (a, &v) in q.iter().enumerate().skip(1) {
            if v > q[best] {
                best = a;
            }
        }
        Ok(best)
    }

    pub fn decide_all(&self, covariates: ArrayView2<f64>) -> Result<Vec<usize>> {
        covariates.outer_iter().map(|o| self.decide(o)).collect()
    }
}

/// Nonzero treatment main effects and interactions.
pub fn policy_size(beta: ArrayView1<f64>, layout: &CoefficientLayout) -> usize {
    layout.treatment_related_indices().filter(|&j| beta[j] != 0.0).count()
}

/// `Y - Φβ̂_s` on the target sample.
pub fn pseudo_outcome(target: &Sample, source: &SourceModel) -> Result<Array1<f64>> {
    let x = target.design(&source.feature_map)?;
    Ok(&target.outcome - &x.dot(&source.beta_s))
}

fn fit_shift(x: &Array2<f64>, pseudo: &Array1<f64>, source: &SourceModel, config: &FitConfig, seed: u64) -> Result<RtlModel> {
    let tuned = fit_adaptive_lasso(
        x.view(),
        pseudo.view(),
        &[source.feature_map.layout().intercept],
        config.lambda,
        &config.adaptive,
        seed,
    )?;
    if !tuned.fit.converged {
        log::warn!("shift fit stopped after {} sweeps without converging", tuned.fit.iterations);
    }
    let theta_hat = tuned.fit.coefficients;
    Ok(RtlModel {
        beta_t: &source.beta_s + &theta_hat,
        beta_s: source.beta_s.clone(),
        theta_hat,
        lambda_used: tuned.fit.lambda,
        weights_used: tuned.weights,
        feature_map: source.feature_map.clone(),
        converged: tuned.fit.converged,
        seed,
    })
}

/// Estimate the coefficient shift on `target` and recover the target model.
pub fn fit_rtl(target: &Sample, source: &SourceModel, config: &FitConfig, seed: u64) -> Result<RtlModel> {
    if target.len() < 2 {
        return Err(RtlError::invalid(format!("target sample needs at least 2 rows, got {}", target.len())));
    }
    let x = target.design(&source.feature_map)?;
    let pseudo = &target.outcome - &x.dot(&source.beta_s);
    fit_shift(&x, &pseudo, source, config, seed)
}

/// Flat JSON record of a fitted coefficient vector and its feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub format: String,
    pub method: String,
    pub q: usize,
    pub num_arms: usize,
    pub reference_arm: usize,
    pub coefficients: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_coefficients: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub seed: u64,
    pub n_train: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub covariate_names: Vec<String>,
}

pub const MODEL_FORMAT: &str = "rtl-model/1";

impl ModelRecord {
    pub fn new(method: &str, beta: ArrayView1<f64>, map: &FeatureMap, seed: u64, n_train: usize) -> Self {
        Self {
            format: MODEL_FORMAT.to_string(),
            method: method.to_string(),
            q: map.q(),
            num_arms: map.num_arms(),
            reference_arm: map.coding().reference_arm(),
            coefficients: beta.to_vec(),
            source_coefficients: None,
            shift: None,
            lambda: None,
            seed,
            n_train,
            covariate_names: Vec::new(),
        }
    }

    pub fn from_rtl(model: &RtlModel, n_train: usize) -> Self {
        let mut rec = Self::new("rtl", model.beta_t.view(), &model.feature_map, model.seed, n_train);
        rec.source_coefficients = Some(model.beta_s.to_vec());
        rec.shift = Some(model.theta_hat.to_vec());
        rec.lambda = Some(model.lambda_used);
        rec
    }

    pub fn feature_map(&self) -> Result<FeatureMap> {
        Ok(FeatureMap::new(self.q, TreatmentCoding::new(self.num_arms, self.reference_arm)?))
    }

    fn validate(&self) -> Result<()> {
        if self.format != MODEL_FORMAT {
            return Err(RtlError::ModelRecord(format!(
                "unsupported format `{}`, expected `{MODEL_FORMAT}`",
                self.format
            )));
        }
        let p = self.feature_map()?.p();
        if self.coefficients.len() != p {
            return Err(RtlError::ModelRecord(format!(
                "coefficient vector has length {}, feature map needs {p}",
                self.coefficients.len()
            )));
        }
        Ok(())
    }

    /// Use the stored coefficients as a source model for a new target.
    pub fn to_source_model(&self) -> Result<SourceModel> {
        self.validate()?;
        SourceModel::new(Array1::from(self.coefficients.clone()), self.feature_map()?, self.n_train.max(1))
    }

    pub fn policy(&self) -> Result<Policy> {
        self.validate()?;
        Policy::new(Array1::from(self.coefficients.clone()), self.feature_map()?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: Self = serde_json::from_str(text)?;
        rec.validate()?;
        Ok(rec)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn toy_target(n: usize, q: usize, beta: &Array1<f64>, noise: f64, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = Array2::from_shape_fn((n, q), |_| rng.sample::<f64, _>(StandardNormal));
        let arms: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let map = FeatureMap::binary(q);
        let x = map.encode_matrix(o.view(), &arms).unwrap();
        let y = x.dot(beta) + Array1::from_shape_fn(n, |_| noise * rng.sample::<f64, _>(StandardNormal));
        Sample::new(o, arms, y).unwrap()
    }

    #[test]
    fn pseudo_outcome_cases() {
        let map = FeatureMap::binary(2);
        let beta = array![0.5, 1.0, -1.0, 2.0, 0.0, 0.25];
        let target = toy_target(5, 2, &beta, 0.0, 1);
        let zero = SourceModel::new(Array1::zeros(6), map.clone(), 10).unwrap();
        assert_eq!(pseudo_outcome(&target, &zero).unwrap(), target.outcome);
        let exact = SourceModel::new(beta.clone(), map.clone(), 10).unwrap();
        assert!(pseudo_outcome(&target, &exact).unwrap().iter().all(|v| v.abs() < 1e-12));

        let other = array![1.0, 0.0, 0.5, 0.5, -1.0, 1.0];
        let src = SourceModel::new(other.clone(), map, 10).unwrap();
        let got = pseudo_outcome(&target, &src).unwrap();
        for i in 0..5 {
            let o = target.covariates.row(i);
            let a = target.arms[i] as f64;
            let pred = other[0] + other[1] * a + other[2] * o[0] + other[3] * o[1] + a * (other[4] * o[0] + other[5] * o[1]);
            assert!((got[i] - (target.outcome[i] - pred)).abs() < 1e-12);
        }
    }

    #[test]
    fn source_model_validates_lengths() {
        assert!(SourceModel::new(Array1::zeros(5), FeatureMap::binary(2), 1).is_err());
        assert!(SourceModel::new(Array1::zeros(6), FeatureMap::binary(2), 0).is_err());
    }

    #[test]
    fn no_shift_admitted_without_signal() {
        let beta = array![1.0, 0.5, 1.0, -1.0, 0.0, 2.0];
        let target = toy_target(40, 2, &beta, 0.0, 2);
        let src = SourceModel::new(beta.clone(), FeatureMap::binary(2), 100).unwrap();
        let m = fit_rtl(&target, &src, &FitConfig::default(), 3).unwrap();
        assert!(m.theta_hat.iter().all(|t| t.abs() < 1e-12), "{}", m.theta_hat);
        assert!((&m.beta_t - &beta).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn recovery_identity_holds_exactly() {
        let beta = array![0.0, 1.0, 1.0, 0.0, -1.0, 0.0];
        let target = toy_target(30, 2, &beta, 1.0, 4);
        let src = SourceModel::new(array![0.3, 0.0, 0.8, 0.1, 0.0, 0.0], FeatureMap::binary(2), 100).unwrap();
        let m = fit_rtl(&target, &src, &FitConfig::default(), 5).unwrap();
        for j in 0..6 {
            assert_eq!(m.beta_t[j] - m.beta_s[j] - m.theta_hat[j], 0.0);
        }
        assert_eq!(m.weights_used[0], 0.0);
    }

    #[test]
    fn decide_tie_rule_and_constant_contrast() {
        let map = FeatureMap::binary(2);
        let flat = Policy::new(array![3.0, 0.0, 1.0, -2.0, 0.0, 0.0], map.clone()).unwrap();
        let treat = Policy::new(array![0.0, 1.0, 5.0, 5.0, 0.0, 0.0], map).unwrap();
        for o in [array![0.0, 0.0], array![-3.0, 2.0], array![10.0, -1.0]] {
            assert_eq!(flat.decide(o.view()).unwrap(), 0);
            assert_eq!(treat.decide(o.view()).unwrap(), 1);
        }
    }

    #[test]
    fn three_arm_threshold() {
        // Q(o,0) = 0, Q(o,1) = 1 + o, Q(o,2) = -1 + 3o
        // arm 1 beats 0 for o > -1; arm 2 beats 1 for o > 1
        let map = FeatureMap::new(1, TreatmentCoding::new(3, 0).unwrap());
        let pol = Policy::new(array![0.0, 1.0, -1.0, 0.0, 1.0, 3.0], map).unwrap();
        assert_eq!(pol.decide(array![-1.5].view()).unwrap(), 0);
        assert_eq!(pol.decide(array![-1.0].view()).unwrap(), 0);
        assert_eq!(pol.decide(array![-0.9].view()).unwrap(), 1);
        assert_eq!(pol.decide(array![1.0].view()).unwrap(), 1);
        assert_eq!(pol.decide(array![1.01].view()).unwrap(), 2);
    }

    #[test]
    fn intercept_shift_leaves_decisions_unchanged() {
        let map = FeatureMap::binary(2);
        let a = Policy::new(array![0.0, 0.3, 1.0, 1.0, -1.0, 0.5], map.clone()).unwrap();
        let b = Policy::new(array![17.5, 0.3, 1.0, 1.0, -1.0, 0.5], map).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let o = array![rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)];
            assert_eq!(a.decide(o.view()).unwrap(), b.decide(o.view()).unwrap());
        }
    }

    #[test]
    fn policy_size_counts_treatment_blocks() {
        let layout = FeatureMap::binary(3).layout();
        assert_eq!(policy_size(Array1::zeros(8).view(), &layout), 0);
        assert_eq!(policy_size(array![1.0, 0.0, 1.0, 2.0, 3.0, 0.0, 0.0, 0.0].view(), &layout), 0);
        assert_eq!(policy_size(array![1.0, 0.5, 0.0, 0.0, 0.0, 1.0, 0.0, -2.0].view(), &layout), 3);
    }

    #[test]
    fn model_record_round_trips_bitwise() {
        let beta = array![0.1, 1.0 / 3.0, -2.0e-17, std::f64::consts::PI, 0.0, 1e300];
        let rec = ModelRecord::new("targ_only", beta.view(), &FeatureMap::binary(2), 42, 30);
        let back = ModelRecord::from_json(&rec.to_json().unwrap()).unwrap();
        assert_eq!(back, rec);
        let src = back.to_source_model().unwrap();
        assert_eq!(src.beta(), beta.view());
    }

    #[test]
    fn model_record_rejects_mismatched_lengths() {
        let mut rec = ModelRecord::new("rtl", Array1::zeros(6).view(), &FeatureMap::binary(2), 0, 1);
        rec.coefficients.pop();
        let json = serde_json::to_string(&rec).unwrap();
        assert!(ModelRecord::from_json(&json).is_err());
        rec.coefficients.push(0.0);
        rec.format = "other".into();
        assert!(ModelRecord::from_json(&serde_json::to_string(&rec).unwrap()).is_err());
    }
}
