//! Data-generating processes for the coefficient-shift experiments.
//!
//! Covariates are drawn from `N(0, Σ_AR(ρ))`, treatments are fair coin flips,
//! and outcomes follow the linear Q-model with source coefficients `β_s`
//! (source rows) or `β_t = β_s + θ` (target and test rows).

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::design::{CoefficientLayout, FeatureMap};
use crate::error::{Result, RtlError};
use crate::estimator::Policy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    WeakDense,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shift {
    I,
    II,
    III,
}

impl Regime {
    pub const ALL: [Regime; 2] = [Regime::WeakDense, Regime::Sparse];
}

impl Shift {
    pub const ALL: [Shift; 3] = [Shift::I, Shift::II, Shift::III];
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::WeakDense => "weak_dense",
            Regime::Sparse => "sparse",
        })
    }
}

impl fmt::Display for Shift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shift::I => "I",
            Shift::II => "II",
            Shift::III => "III",
        })
    }
}

impl FromStr for Regime {
    type Err = RtlError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "weak_dense" | "weakdense" | "dense" => Ok(Regime::WeakDense),
            "sparse" => Ok(Regime::Sparse),
            other => Err(RtlError::invalid(format!("unknown regime `{other}`"))),
        }
    }
}

impl FromStr for Shift {
    type Err = RtlError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Shift::I),
            "II" | "2" => Ok(Shift::II),
            "III" | "3" => Ok(Shift::III),
            other => Err(RtlError::invalid(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub q: usize,
    pub rho: f64,
    pub regime: Regime,
    pub shift: Shift,
    pub effect_size: f64,
    pub n_s: usize,
    pub n_t: usize,
    pub n_test: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            q: 20,
            rho: 0.3,
            regime: Regime::WeakDense,
            shift: Shift::I,
            effect_size: 0.5,
            n_s: 150,
            n_t: 30,
            n_test: 2000,
            noise_sd: 1.0,
            seed: 1,
        }
    }
}

impl ScenarioSpec {
    pub fn new(regime: Regime, shift: Shift, n_s: usize) -> Self {
        Self {
            regime,
            shift,
            n_s,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || self.q % 10 != 0 {
            return Err(RtlError::invalid(format!(
                "q must be a positive multiple of 10 for the coefficient regimes, got {}",
                self.q
            )));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(RtlError::invalid(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        if self.n_t == 0 || self.n_test == 0 {
            return Err(RtlError::invalid("target and test sizes must be >= 1"));
        }
        // zero noise is allowed for exact-recovery checks
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(RtlError::invalid(format!("noise_sd must be finite and >= 0, got {}", self.noise_sd)));
        }
        Ok(())
    }

    pub fn feature_map(&self) -> FeatureMap {
        FeatureMap::binary(self.q)
    }

    /// Short label such as `weak_dense/I/ns150`.
    pub fn label(&self) -> String {
        format!("{}/{}/ns{}", self.regime, self.shift, self.n_s)
    }
}

/// `Σ_ij = ρ^|i-j|`.
pub fn ar1_covariance(q: usize, rho: f64) -> Result<Array2<f64>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(RtlError::invalid(format!("rho must lie in [0, 1), got {rho}")));
    }
    Ok(Array2::from_shape_fn((q, q), |(i, j)| rho.powi(i.abs_diff(j) as i32)))
}

/// Lower-triangular `L` with `L Lᵀ = a`.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(RtlError::invalid("cholesky needs a square matrix"));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let dot: f64 = (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum();
            if i == j {
                let d = a[[i, i]] - dot;
                if d <= 0.0 {
                    return Err(RtlError::invalid("matrix is not positive definite"));
                }
                l[[i, i]] = d.sqrt();
            } else {
                l[[i, j]] = (a[[i, j]] - dot) / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// `k` evenly spaced values from `a` to `b` inclusive.
pub fn seq(a: f64, b: f64, k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..k).map(|i| a + (b - a) * i as f64 / (k - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrueModel {
    pub beta_s_true: Array1<f64>,
    pub theta_true: Array1<f64>,
    pub beta_t_true: Array1<f64>,
    pub layout: CoefficientLayout,
    pub feature_map: FeatureMap,
}

impl TrueModel {
    pub fn new(beta_s_true: Array1<f64>, theta_true: Array1<f64>, feature_map: FeatureMap) -> Result<Self> {
        let p = feature_map.p();
        for (name, v) in [("true source coefficients", &beta_s_true), ("true shift", &theta_true)] {
            if v.len() != p {
                return Err(RtlError::DimensionMismatch {
                    context: name,
                    expected: p,
                    received: v.len(),
                });
            }
        }
        Ok(Self {
            beta_t_true: &beta_s_true + &theta_true,
            beta_s_true,
            theta_true,
            layout: feature_map.layout(),
            feature_map,
        })
    }

    /// Interaction coordinates whose true target coefficient is zero.
    pub fn true_zero_interactions(&self) -> Vec<usize> {
        self.layout
            .interaction_indices()
            .filter(|&j| self.beta_t_true[j] == 0.0)
            .collect()
    }

    pub fn oracle_policy(&self) -> Policy {
        Policy::new(self.beta_t_true.clone(), self.feature_map.clone()).expect("lengths checked")
    }
}

fn block_len(q: usize, tenths: usize) -> usize {
    q * tenths / 10
}

pub fn build_true_model(spec: &ScenarioSpec) -> Result<TrueModel> {
    spec.validate()?;
    let q = spec.q;
    let map = spec.feature_map();
    let layout = map.layout();
    let cov = layout.covariates.start;
    let inter = layout.interactions[0].start;
    let trt = layout.treatment.start;
    let p = map.p();

    let mut beta_s = Array1::<f64>::zeros(p);
    let active = match spec.regime {
        Regime::WeakDense => {
            let k = q / 2;
            beta_s.slice_mut(s![cov..cov + k]).fill(1.25);
            k
        }
        Regime::Sparse => {
            let k = block_len(q, 1);
            let vals = seq(0.1 * q as f64 + 0.5, 1.5, k);
            beta_s.slice_mut(s![cov..cov + k]).assign(&Array1::from(vals));
            k
        }
    };
    beta_s.slice_mut(s![inter..inter + active]).fill(spec.effect_size);

    let mut theta = Array1::<f64>::zeros(p);
    match spec.shift {
        Shift::I => {
            theta.slice_mut(s![cov..cov + 2]).fill(2.5);
            theta.slice_mut(s![inter..inter + 2]).fill(2.5);
        }
        Shift::II => {
            let k = block_len(q, 3);
            theta.slice_mut(s![inter..inter + k]).assign(&Array1::from(seq(4.5, 1.5, k)));
        }
        Shift::III => {
            let k = block_len(q, 7);
            theta.slice_mut(s![..inter]).fill(0.75);
            theta.slice_mut(s![inter..inter + k]).fill(0.75);
            debug_assert_eq!(theta[trt], 0.75);
        }
    }
    TrueModel::new(beta_s, theta, map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Target,
    Test,
}

impl Role {
    fn stream(self) -> u64 {
        match self {
            Role::Source => 0,
            Role::Target => 1,
            Role::Test => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub role: Role,
    pub sample: Sample,
}

/// Independent stream for one (master seed, replication, role) triple.
pub fn replication_rng(seed: u64, replication: u64, role: Role) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication.wrapping_mul(4).wrapping_add(role.stream()));
    rng
}

/// MVN covariates, Bernoulli(½) arms and linear outcomes for one role.
pub fn sample_dataset<R: Rng>(
    spec: &ScenarioSpec,
    model: &TrueModel,
    role: Role,
    n: usize,
    rng: &mut R,
) -> Result<SimDataset> {
    spec.validate()?;
    let q = spec.q;
    let l = cholesky(&ar1_covariance(q, spec.rho)?)?;
    let z = Array2::from_shape_fn((n, q), |_| rng.sample::<f64, _>(StandardNormal));
    let covariates = z.dot(&l.t());
    let arms: Vec<usize> = (0..n).map(|_| usize::from(rng.random_bool(0.5))).collect();
    let beta = match role {
        Role::Source => &model.beta_s_true,
        Role::Target | Role::Test => &model.beta_t_true,
    };
    let x = model.feature_map.encode_matrix(covariates.view(), &arms)?;
    let noise = Array1::from_shape_fn(n, |_| spec.noise_sd * rng.sample::<f64, _>(StandardNormal));
    let outcome = x.dot(beta) + noise;
    Ok(SimDataset {
        role,
        sample: Sample::new(covariates, arms, outcome)?,
    })
}

/// Source, target and test draws for one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationData {
    pub source: SimDataset,
    pub target: SimDataset,
    pub test: SimDataset,
}

pub fn replication_data(spec: &ScenarioSpec, model: &TrueModel, replication: u64) -> Result<ReplicationData> {
    let draw = |role, n| sample_dataset(spec, model, role, n, &mut replication_rng(spec.seed, replication, role));
    Ok(ReplicationData {
        source: draw(Role::Source, spec.n_s)?,
        target: draw(Role::Target, spec.n_t)?,
        test: draw(Role::Test, spec.n_test)?,
    })
}

/// Mean over test covariates of the best arm's true conditional mean.
pub fn oracle_value(model: &TrueModel, test: &Sample) -> Result<f64> {
    if test.is_empty() {
        return Err(RtlError::invalid("oracle value needs a nonempty test set"));
    }
    let beta = model.beta_t_true.view();
    let map = &model.feature_map;
    let vals = (0..test.len())
        .map(|i| {
            (0..map.num_arms())
                .map(|a| map.predict(test.row(i), a, beta))
                .try_fold(f64::NEG_INFINITY, |m, v| v.map(|v| m.max(v)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(crate::metrics::compensated_mean(vals))
}

/// A small two-site randomized trial with a known interaction shift, standing in
/// for real multi-site data: 68 source rows, 34 target rows, 25 covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandinSpec {
    pub n_source: usize,
    pub n_target: usize,
    pub q: usize,
    pub rho: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for StandinSpec {
    fn default() -> Self {
        Self {
            n_source: 68,
            n_target: 34,
            q: 25,
            rho: 0.3,
            noise_sd: 1.0,
            seed: 2024,
        }
    }
}

impl StandinSpec {
    pub fn true_model(&self) -> Result<TrueModel> {
        let map = FeatureMap::binary(self.q);
        let layout = map.layout();
        let p = map.p();
        let cov = layout.covariates.start;
        let inter = layout.interactions[0].start;
        let mut beta_s = Array1::<f64>::zeros(p);
        beta_s[0] = 1.0;
        for j in 0..5.min(self.q) {
            beta_s[cov + j] = 1.0;
        }
        beta_s[inter] = 1.0;
        beta_s[inter + 1] = -0.5;
        let mut theta = Array1::<f64>::zeros(p);
        theta[inter + 1] = 2.0;
        theta[inter + 2] = -2.0;
        TrueModel::new(beta_s, theta, map)
    }

    /// `(source, target)` samples; outcomes follow `β_s` and `β_t` respectively.
    pub fn generate(&self) -> Result<(Sample, Sample)> {
        let model = self.true_model()?;
        let l = cholesky(&ar1_covariance(self.q, self.rho)?)?;
        let draw = |beta: &Array1<f64>, n: usize, role: Role| -> Result<Sample> {
            let mut rng = replication_rng(self.seed, 0, role);
            let z = Array2::from_shape_fn((n, self.q), |_| rng.sample::<f64, _>(StandardNormal));
            let covariates = z.dot(&l.t());
            let arms: Vec<usize> = (0..n).map(|_| usize::from(rng.random_bool(0.5))).collect();
            let x = model.feature_map.encode_matrix(covariates.view(), &arms)?;
            let y = x.dot(beta) + Array1::from_shape_fn(n, |_| self.noise_sd * rng.sample::<f64, _>(StandardNormal));
            Sample::new(covariates, arms, y)
        };
        let source = draw(&model.beta_s_true, self.n_source, Role::Source)?;
        let target = draw(&model.beta_t_true, self.n_target, Role::Target)?;
        Ok((source, target))
    }

    /// Both sites in one CSV with columns `site, y, a, x1..xq`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let (source, target) = self.generate()?;
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["site".to_string(), "y".to_string(), "a".to_string()];
        header.extend((1..=self.q).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for (site, s) in [("source", &source), ("target", &target)] {
            for i in 0..s.len() {
                let mut rec = vec![site.to_string(), s.outcome[i].to_string(), s.arms[i].to_string()];
                rec.extend(s.covariates.row(i).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ar1_entries() {
        let id = ar1_covariance(4, 0.0).unwrap();
        assert_eq!(id, Array2::<f64>::eye(4));
        let s = ar1_covariance(20, 0.3).unwrap();
        assert!((s[[0, 1]] - 0.3).abs() < 1e-15);
        assert!((s[[0, 2]] - 0.09).abs() < 1e-15);
        assert_eq!(s, s.t());
        assert!(ar1_covariance(3, 1.0).is_err());
        assert!(ar1_covariance(3, -0.1).is_err());
    }

    #[test]
    fn ar1_determinant_closed_form() {
        let s = ar1_covariance(3, 0.5).unwrap();
        let l = cholesky(&s).unwrap();
        let det: f64 = (0..3).map(|i| l[[i, i]]).product::<f64>().powi(2);
        assert!((det - 0.5625).abs() < 1e-12);
        assert!((l.dot(&l.t()) - &s).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn seq_is_inclusive() {
        assert_eq!(seq(2.5, 1.5, 2), vec![2.5, 1.5]);
        let v = seq(4.5, 1.5, 6);
        let want = [4.5, 3.9, 3.3, 2.7, 2.1, 1.5];
        assert!(v.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(seq(1.0, 5.0, 1), vec![1.0]);
    }

    #[test]
    fn sparse_covariate_block() {
        let m = build_true_model(&ScenarioSpec::new(Regime::Sparse, Shift::I, 50)).unwrap();
        let cov = m.layout.covariates.clone();
        let block = m.beta_s_true.slice(s![cov]).to_vec();
        assert_eq!(&block[..3], &[2.5, 1.5, 0.0]);
        assert!(block[2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scenario_two_interaction_shift() {
        let m = build_true_model(&ScenarioSpec::new(Regime::WeakDense, Shift::II, 50)).unwrap();
        let r = m.layout.interactions[0].clone();
        let shift = m.theta_true.slice(s![r]).to_vec();
        let want = [4.5, 3.9, 3.3, 2.7, 2.1, 1.5];
        assert!(shift[..6].iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(shift[6..].iter().all(|&v| v == 0.0));
        assert!(m.theta_true.iter().take(m.layout.interactions[0].start).all(|&v| v == 0.0));
    }

    #[test]
    fn scenario_one_shift_placement() {
        let m = build_true_model(&ScenarioSpec::new(Regime::WeakDense, Shift::I, 50)).unwrap();
        let nz: Vec<usize> = (0..m.theta_true.len()).filter(|&j| m.theta_true[j] != 0.0).collect();
        let cov = m.layout.covariates.start;
        let inter = m.layout.interactions[0].start;
        assert_eq!(nz, vec![cov, cov + 1, inter, inter + 1]);
        assert!(nz.iter().all(|&j| m.theta_true[j] == 2.5));
    }

    #[test]
    fn scenario_three_shifts_everything_but_trailing_interactions() {
        let m = build_true_model(&ScenarioSpec::new(Regime::Sparse, Shift::III, 50)).unwrap();
        let inter = m.layout.interactions[0].start;
        assert!(m.theta_true.iter().take(inter).all(|&v| v == 0.75));
        assert!(m.theta_true.slice(s![inter..inter + 14]).iter().all(|&v| v == 0.75));
        assert!(m.theta_true.slice(s![inter + 14..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn true_zero_interaction_counts() {
        let expected = [
            (Regime::WeakDense, [10, 10, 6]),
            (Regime::Sparse, [18, 14, 6]),
        ];
        for (regime, counts) in expected {
            for (shift, want) in Shift::ALL.iter().zip(counts) {
                let m = build_true_model(&ScenarioSpec::new(regime, *shift, 50)).unwrap();
                assert_eq!(m.true_zero_interactions().len(), want, "{regime} {shift}");
                assert_eq!(m.beta_t_true, &m.beta_s_true + &m.theta_true);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = ScenarioSpec::default();
        spec.q = 15;
        assert!(build_true_model(&spec).is_err());
        spec.q = 20;
        spec.rho = 1.0;
        assert!(build_true_model(&spec).is_err());
        spec.rho = 0.3;
        spec.noise_sd = -1.0;
        assert!(build_true_model(&spec).is_err());
    }

    #[test]
    fn noiseless_outcomes_equal_linear_predictor() {
        let spec = ScenarioSpec {
            noise_sd: 0.0,
            ..ScenarioSpec::default()
        };
        let m = build_true_model(&spec).unwrap();
        for role in [Role::Source, Role::Target] {
            let d = sample_dataset(&spec, &m, role, 50, &mut replication_rng(1, 0, role)).unwrap();
            let beta = if role == Role::Source { &m.beta_s_true } else { &m.beta_t_true };
            let pred = d.sample.design(&m.feature_map).unwrap().dot(beta);
            assert!((&pred - &d.sample.outcome).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn replications_are_reproducible_and_distinct() {
        let spec = ScenarioSpec::default();
        let m = build_true_model(&spec).unwrap();
        let a = replication_data(&spec, &m, 3).unwrap();
        let b = replication_data(&spec, &m, 3).unwrap();
        let c = replication_data(&spec, &m, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.target.sample.outcome, c.target.sample.outcome);
        assert_ne!(a.source.sample.covariates.row(0), a.target.sample.covariates.row(0));
    }

    #[test]
    fn oracle_value_without_treatment_effect() {
        let spec = ScenarioSpec::default();
        let map = spec.feature_map();
        let mut beta = Array1::zeros(map.p());
        beta[0] = 1.0;
        beta[map.layout().covariates.start] = 2.0;
        let model = TrueModel::new(beta.clone(), Array1::zeros(map.p()), map.clone()).unwrap();
        let test = sample_dataset(&spec, &model, Role::Test, 100, &mut replication_rng(0, 0, Role::Test)).unwrap();
        let v = oracle_value(&model, &test.sample).unwrap();
        let x0 = map.encode_matrix(test.sample.covariates.view(), &vec![0; 100]).unwrap();
        assert!((v - x0.dot(&beta).mean().unwrap()).abs() < 1e-12);
        let pol = model.oracle_policy();
        assert!((0..100).all(|i| pol.decide(test.sample.row(i)).unwrap() == 0));
    }

    #[test]
    fn one_covariate_threshold_model() {
        // contrast -0.5 + o: treat iff o > 0.5
        let map = FeatureMap::binary(1);
        let beta = ndarray::array![0.0, -0.5, 0.0, 1.0];
        let model = TrueModel::new(beta, Array1::zeros(4), map).unwrap();
        let o = Array2::from_shape_vec((4, 1), vec![-1.0, 0.25, 0.75, 2.0]).unwrap();
        let test = Sample::new(o, vec![0; 4], Array1::zeros(4)).unwrap();
        let pol = model.oracle_policy();
        let d: Vec<usize> = (0..4).map(|i| pol.decide(test.row(i)).unwrap()).collect();
        assert_eq!(d, vec![0, 0, 1, 1]);
        // best values 0, 0, 0.25, 1.5
        assert!((oracle_value(&model, &test).unwrap() - 1.75 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn standin_shapes() {
        let s = StandinSpec::default();
        let (src, tgt) = s.generate().unwrap();
        assert_eq!((src.len(), tgt.len(), src.q()), (68, 34, 25));
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 68 + 34);
    }

    #[test]
    fn spec_round_trips_through_toml_style_names() {
        assert_eq!("weak-dense".parse::<Regime>().unwrap(), Regime::WeakDense);
        assert_eq!("ii".parse::<Shift>().unwrap(), Shift::II);
        assert!("iv".parse::<Shift>().is_err());
        let json = serde_json::to_string(&ScenarioSpec::default()).unwrap();
        assert!(json.contains("\"weak_dense\""));
        let partial: ScenarioSpec = serde_json::from_str(r#"{"shift":"III","n_s":50}"#).unwrap();
        assert_eq!(partial.shift, Shift::III);
        assert_eq!(partial.q, 20);
    }
}
