//! Method dispatch and the replicated simulation harness.

use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_targ_only, fit_translasso, TransLassoConfig};
use crate::data::Sample;
use crate::design::FeatureMap;
use crate::error::{Result, RtlError};
use crate::estimator::{fit_rtl, policy_size, FitConfig, Policy, SourceModel};
use crate::metrics::{policy_value_true, prediction_rmse, selection_counts, squared_error, CellKey, MetricsRecord};
use crate::simulation::{build_true_model, oracle_value, replication_data, Regime, ScenarioSpec, Shift, TrueModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Rtl,
    TargOnly,
    TransLasso,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Rtl, Method::TargOnly, Method::TransLasso];

    fn salt(self) -> u64 {
        match self {
            Method::Rtl => 1,
            Method::TargOnly => 2,
            Method::TransLasso => 3,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Rtl => "RTL",
            Method::TargOnly => "TargOnly",
            Method::TransLasso => "TransLasso",
        })
    }
}

impl FromStr for Method {
    type Err = RtlError;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match norm.as_str() {
            "rtl" => Ok(Method::Rtl),
            "targonly" | "target" => Ok(Method::TargOnly),
            "translasso" => Ok(Method::TransLasso),
            _ => Err(RtlError::invalid(format!(
                "unknown method `{s}` (expected RTL, TargOnly or TransLasso)"
            ))),
        }
    }
}

/// Parses a comma-separated method list, dropping duplicates.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let mut out = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let m: Method = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(RtlError::invalid("method list is empty"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedMethod {
    pub method: Method,
    pub beta: Array1<f64>,
    pub converged: bool,
}

/// Fits `method` on `target`. RTL needs `source_model`; Trans-Lasso needs `source`.
pub fn fit_method(
    method: Method,
    target: &Sample,
    source: Option<&Sample>,
    source_model: Option<&SourceModel>,
    map: &FeatureMap,
    config: &FitConfig,
    seed: u64,
) -> Result<FittedMethod> {
    let (beta, converged) = match method {
        Method::Rtl => {
            let sm = source_model.ok_or_else(|| RtlError::invalid("RTL needs a fitted source model"))?;
            let m = fit_rtl(target, sm, config, seed)?;
            (m.beta_t, m.converged)
        }
        Method::TargOnly => {
            let m = fit_targ_only(target, map, config, seed)?;
            let c = m.converged();
            (m.beta_t, c)
        }
        Method::TransLasso => {
            let src = source.ok_or_else(|| RtlError::invalid("Trans-Lasso needs individual-level source data"))?;
            let m = fit_translasso(src, target, map, &TransLassoConfig::from(config), seed)?;
            let c = m.converged();
            (m.beta_t, c)
        }
    };
    Ok(FittedMethod { method, beta, converged })
}

/// SplitMix64 finalizer over `(seed, replication, salt)`.
pub fn derive_seed(seed: u64, replication: u64, salt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(replication.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(salt.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const OPTIMAL: &str = "Optimal";

/// One replication: an `Optimal` row followed by one row per method.
pub fn run_replication(
    spec: &ScenarioSpec,
    truth: &TrueModel,
    replication: usize,
    methods: &[Method],
    config: &FitConfig,
) -> Result<Vec<MetricsRecord>> {
    let rep = replication as u64;
    let data = replication_data(spec, truth, rep)?;
    let test = &data.test.sample;
    let map = &truth.feature_map;

    let mut out = vec![MetricsRecord {
        replication,
        method: OPTIMAL.into(),
        value: oracle_value(truth, test)?,
        c_count: None,
        ic_count: None,
        rmse: None,
        policy_size: None,
        sq_error: None,
    }];
    let source_model = if methods.contains(&Method::Rtl) {
        Some(SourceModel::fit(&data.source.sample, map.clone(), config, derive_seed(spec.seed, rep, 0))?)
    } else {
        None
    };
    for &m in methods {
        let fitted = fit_method(
            m,
            &data.target.sample,
            Some(&data.source.sample),
            source_model.as_ref(),
            map,
            config,
            derive_seed(spec.seed, rep, m.salt()),
        )?;
        if !fitted.converged {
            log::warn!("{} replication {replication}: {m} solver did not converge", spec.label());
        }
        let policy = Policy::new(fitted.beta.clone(), map.clone())?;
        let (c, ic) = selection_counts(fitted.beta.view(), truth, 0.0)?;
        out.push(MetricsRecord {
            replication,
            method: m.to_string(),
            value: policy_value_true(&policy, truth, test)?,
            c_count: Some(c),
            ic_count: Some(ic),
            rmse: Some(prediction_rmse(fitted.beta.view(), map, test)?),
            policy_size: Some(policy_size(fitted.beta.view(), &map.layout())),
            sq_error: Some(squared_error(fitted.beta.view(), truth.beta_t_true.view())),
        });
    }
    Ok(out)
}

pub fn cell_key(spec: &ScenarioSpec) -> CellKey {
    CellKey {
        regime: spec.regime.to_string(),
        scenario: spec.shift.to_string(),
        n_s: spec.n_s,
    }
}

/// The two regimes by three scenarios by two source sizes.
pub fn default_grid(base: &ScenarioSpec) -> Vec<ScenarioSpec> {
    let mut out = Vec::new();
    for regime in Regime::ALL {
        for shift in Shift::ALL {
            for n_s in [50, 150] {
                out.push(ScenarioSpec {
                    regime,
                    shift,
                    n_s,
                    ..base.clone()
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub cell: CellKey,
    pub replication: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridResult {
    /// Sorted by cell in grid order, then replication, then method order.
    pub rows: Vec<(CellKey, MetricsRecord)>,
    pub failures: Vec<ReplicationFailure>,
    pub attempted: usize,
}

/// Runs every (cell, replication) pair on the current rayon pool. Output order
/// does not depend on the number of threads.
pub fn run_grid(specs: &[ScenarioSpec], reps: usize, methods: &[Method], config: &FitConfig) -> Result<GridResult> {
    let truths = specs
        .iter()
        .map(|s| {
            s.validate()?;
            build_true_model(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let tasks: Vec<(usize, usize)> = (0..specs.len()).flat_map(|c| (0..reps).map(move |r| (c, r))).collect();
    let results: Vec<Result<Vec<MetricsRecord>>> = tasks
        .par_iter()
        .map(|&(c, r)| run_replication(&specs[c], &truths[c], r, methods, config))
        .collect();

    let mut out = GridResult {
        attempted: tasks.len(),
        ..GridResult::default()
    };
    for (&(c, r), res) in tasks.iter().zip(results) {
        let key = cell_key(&specs[c]);
        match res {
            Ok(records) => out.rows.extend(records.into_iter().map(|rec| (key.clone(), rec))),
            Err(e) => {
                log::warn!("{} replication {r} failed: {e}", specs[c].label());
                out.failures.push(ReplicationFailure {
                    cell: key,
                    replication: r,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}
