//! Performance metrics, replication aggregation and the k-fold evaluation
//! protocol for real (or stand-in) trial data.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::design::FeatureMap;
use crate::error::{Result, RtlError};
use crate::estimator::{FitConfig, Policy, SourceModel};
use crate::experiment::{fit_method, Method};
use crate::penalized::fold_assignment;
use crate::simulation::TrueModel;

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn compensated_mean<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut n = 0usize;
    let s = compensated_sum(values.into_iter().inspect(|_| n += 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = compensated_mean(values.iter().copied());
    let ss = compensated_sum(values.iter().map(|v| (v - m) * (v - m)));
    (ss / (values.len() - 1) as f64).sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Mean absolute deviation from the median.
pub fn mad(values: &[f64]) -> f64 {
    let med = median(values);
    compensated_mean(values.iter().map(|v| (v - med).abs()))
}

/// Per-replication outcome of one method. `Optimal` rows carry only `value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub replication: usize,
    pub method: String,
    pub value: f64,
    pub c_count: Option<usize>,
    pub ic_count: Option<usize>,
    pub rmse: Option<f64>,
    pub policy_size: Option<usize>,
    /// `‖β̂_t − β_t‖²`.
    pub sq_error: Option<f64>,
}

/// `(C, IC)` over interaction coordinates whose true value is zero.
pub fn selection_counts(beta_hat: ArrayView1<f64>, truth: &TrueModel, tol_zero: f64) -> Result<(usize, usize)> {
    if beta_hat.len() != truth.beta_t_true.len() {
        return Err(RtlError::DimensionMismatch {
            context: "estimated coefficients",
            expected: truth.beta_t_true.len(),
            received: beta_hat.len(),
        });
    }
    let zeros = truth.true_zero_interactions();
    let c = zeros.iter().filter(|&&j| beta_hat[j].abs() <= tol_zero).count();
    Ok((c, zeros.len() - c))
}

/// Mean true conditional outcome when each test subject receives the policy's arm.
pub fn policy_value_true(policy: &Policy, truth: &TrueModel, test: &Sample) -> Result<f64> {
    if test.is_empty() {
        return Err(RtlError::invalid("policy value needs a nonempty test set"));
    }
    let vals = (0..test.len())
        .map(|i| {
            let o = test.row(i);
            let arm = policy.decide(o)?;
            truth.feature_map.predict(o, arm, truth.beta_t_true.view())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(compensated_mean(vals))
}

/// Root mean squared error of `Φβ̂` against realized outcomes at the observed arms.
pub fn prediction_rmse(beta_hat: ArrayView1<f64>, map: &FeatureMap, test: &Sample) -> Result<f64> {
    let x = test.design(map)?;
    let resid = &test.outcome - &x.dot(&beta_hat);
    Ok(compensated_mean(resid.iter().map(|r| r * r)).sqrt())
}

pub fn squared_error(beta_hat: ArrayView1<f64>, truth: ArrayView1<f64>) -> f64 {
    compensated_sum(beta_hat.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)))
}

/// `E_n[Y · 1{A = π(O)} / p(A | O)]` with arm-level propensities.
pub fn ipw_value(sample: &Sample, policy: &Policy, propensity: &[f64]) -> Result<f64> {
    if sample.is_empty() {
        return Err(RtlError::invalid("IPW value needs a nonempty sample"));
    }
    let terms = (0..sample.len())
        .map(|i| {
            let a = sample.arms[i];
            let p = propensity.get(a).copied().unwrap_or(0.0);
            if !(p > 0.0) {
                return Err(RtlError::Positivity {
                    row: i,
                    arm: a,
                    propensity: p,
                });
            }
            let agree = policy.decide(sample.row(i))? == a;
            Ok(if agree { sample.outcome[i] / p } else { 0.0 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(compensated_mean(terms))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub replications: usize,
    pub value_mean: f64,
    pub value_sd: f64,
    pub c_median: Option<f64>,
    pub c_mad: Option<f64>,
    pub ic_median: Option<f64>,
    pub ic_mad: Option<f64>,
    pub rmse_median: Option<f64>,
    pub rmse_mad: Option<f64>,
    pub sq_error_mean: Option<f64>,
}

fn median_mad(values: Vec<f64>) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        (None, None)
    } else {
        (Some(median(&values)), Some(mad(&values)))
    }
}

/// Mean/sd of value and median/MAD of C, IC and RMSE per method, in order of first appearance.
pub fn aggregate(records: &[MetricsRecord]) -> Vec<AggregateRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
    }
    order
        .into_iter()
        .map(|method| {
            let rows: Vec<&MetricsRecord> = records.iter().filter(|r| r.method == method).collect();
            let values: Vec<f64> = rows.iter().map(|r| r.value).collect();
            let (c_median, c_mad) = median_mad(rows.iter().filter_map(|r| r.c_count.map(|c| c as f64)).collect());
            let (ic_median, ic_mad) = median_mad(rows.iter().filter_map(|r| r.ic_count.map(|c| c as f64)).collect());
            let (rmse_median, rmse_mad) = median_mad(rows.iter().filter_map(|r| r.rmse).collect());
            let sq: Vec<f64> = rows.iter().filter_map(|r| r.sq_error).collect();
            AggregateRow {
                method: method.to_string(),
                replications: rows.len(),
                value_mean: compensated_mean(values.iter().copied()),
                value_sd: sample_sd(&values),
                c_median,
                c_mad,
                ic_median,
                ic_mad,
                rmse_median,
                rmse_mad,
                sq_error_mean: (!sq.is_empty()).then(|| compensated_mean(sq)),
            }
        })
        .collect()
}

/// Assignment of target rows to evaluation folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn new(n: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 || k > n {
            return Err(RtlError::invalid(format!("cannot split {n} rows into {k} folds")));
        }
        Ok(Self {
            k,
            assignments: fold_assignment(n, k, seed),
            seed,
        })
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        self.assignments.iter().for_each(|&f| sizes[f] += 1);
        sizes
    }

    /// `(train, held_out)` row indices for fold `f`.
    pub fn split(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.assignments.len()).partition(|&i| self.assignments[i] != f)
    }
}

/// Held-out results for one method, averaged over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub method: String,
    pub value: f64,
    pub policy_size: f64,
    pub fold_values: Vec<f64>,
    pub fold_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<EvaluationRow>,
    /// Mean outcome of the full target sample.
    pub observed: f64,
    pub folds: usize,
    pub seed: u64,
}

/// Inputs for the cross-fitted evaluation.
pub struct CrossfitInputs<'a> {
    pub target: &'a Sample,
    /// Individual-level source rows, needed only by Trans-Lasso.
    pub source: Option<&'a Sample>,
    pub source_model: &'a SourceModel,
    /// Known randomization probabilities per arm; defaults to training-fold frequencies.
    pub propensity: Option<Vec<f64>>,
}

/// Train each method on all but one fold of the target sample (plus source
/// information where the method uses it) and score the held-out fold by IPW.
pub fn crossfit_evaluate(
    inputs: &CrossfitInputs<'_>,
    methods: &[Method],
    plan: &FoldPlan,
    config: &FitConfig,
) -> Result<EvaluationReport> {
    let target = inputs.target;
    if plan.assignments.len() != target.len() {
        return Err(RtlError::DimensionMismatch {
            context: "fold plan",
            expected: target.len(),
            received: plan.assignments.len(),
        });
    }
    let map = inputs.source_model.feature_map().clone();
    let num_arms = map.num_arms();
    let mut per_method: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for f in 0..plan.k {
        let (train_rows, test_rows) = plan.split(f);
        let train = target.select(&train_rows);
        let held_out = target.select(&test_rows);
        let distinct = {
            let mut a = held_out.arms.clone();
            a.sort_unstable();
            a.dedup();
            a.len()
        };
        if distinct < 2 {
            log::warn!("fold {f}: held-out rows observe a single arm");
        }
        let propensity = inputs.propensity.clone().unwrap_or_else(|| train.arm_frequencies(num_arms));
        for (mi, &method) in methods.iter().enumerate() {
            let seed = plan.seed.wrapping_add(1000 * f as u64 + mi as u64);
            let fitted = fit_method(method, &train, inputs.source, Some(inputs.source_model), &map, config, seed)?;
            let policy = Policy::new(fitted.beta.clone(), map.clone())?;
            let v = ipw_value(&held_out, &policy, &propensity)?;
            let entry = per_method.entry(mi).or_default();
            entry.0.push(v);
            entry.1.push(crate::estimator::policy_size(fitted.beta.view(), &map.layout()) as f64);
        }
    }
    let fold_sizes = plan.fold_sizes();
    let rows = methods
        .iter()
        .enumerate()
        .map(|(mi, m)| {
            let (values, sizes) = per_method.remove(&mi).unwrap_or_default();
            EvaluationRow {
                method: m.to_string(),
                value: compensated_mean(values.iter().copied()),
                policy_size: compensated_mean(sizes),
                fold_values: values,
                fold_sizes: fold_sizes.clone(),
            }
        })
        .collect();
    Ok(EvaluationReport {
        rows,
        observed: target.mean_outcome(),
        folds: plan.k,
        seed: plan.seed,
    })
}

impl EvaluationReport {
    /// One-row table: `value (size)` per method, then the observed mean outcome.
    pub fn to_table(&self) -> String {
        let mut header: Vec<String> = self.rows.iter().map(|r| r.method.clone()).collect();
        header.push("Observed".into());
        let mut cells: Vec<String> = self
            .rows
            .iter()
            .map(|r| format!("{:.2} ({})", r.value, fmt_size(r.policy_size)))
            .collect();
        cells.push(format!("{:.2}", self.observed));
        let width = header.iter().chain(&cells).map(|s| s.len()).max().unwrap_or(8) + 2;
        let line = |v: &[String]| v.iter().map(|s| format!("{s:>width$}")).collect::<String>();
        format!("{}\n{}\n", line(&header), line(&cells))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["method", "value", "policy_size"])?;
        for r in &self.rows {
            w.write_record([r.method.clone(), r.value.to_string(), r.policy_size.to_string()])?;
        }
        w.write_record(["Observed".to_string(), self.observed.to_string(), String::new()])?;
        w.flush()?;
        Ok(())
    }
}

fn fmt_size(s: f64) -> String {
    if s.fract() == 0.0 {
        format!("{s:.0}")
    } else {
        format!("{s:.1}")
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

/// Simulation cell a record belongs to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub regime: String,
    pub scenario: String,
    pub n_s: usize,
}

pub const RECORD_COLUMNS: [&str; 11] = [
    "regime",
    "scenario",
    "n_s",
    "replication",
    "method",
    "value",
    "C",
    "IC",
    "RMSE",
    "policy_size",
    "sq_error",
];

pub fn write_records_csv<W: Write>(writer: W, rows: &[(CellKey, MetricsRecord)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RECORD_COLUMNS)?;
    for (k, r) in rows {
        w.write_record([
            k.regime.clone(),
            k.scenario.clone(),
            k.n_s.to_string(),
            r.replication.to_string(),
            r.method.clone(),
            r.value.to_string(),
            opt(&r.c_count),
            opt(&r.ic_count),
            opt(&r.rmse),
            opt(&r.policy_size),
            opt(&r.sq_error),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads per-replication metric rows. `replication, method, value, C, IC, RMSE` are
/// required; cell columns fall back to `default_cell`, and the remaining columns are optional.
pub fn read_records_csv<R: Read>(reader: R, default_cell: Option<&CellKey>) -> Result<Vec<(CellKey, MetricsRecord)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let required = |name: &str| col(name).ok_or_else(|| RtlError::Schema(format!("metrics file is missing column `{name}`")));
    let (i_rep, i_method, i_value) = (required("replication")?, required("method")?, required("value")?);
    let (i_c, i_ic, i_rmse) = (required("C")?, required("IC")?, required("RMSE")?);
    let (i_reg, i_sc, i_ns) = (col("regime"), col("scenario"), col("n_s"));
    let (i_size, i_sq) = (col("policy_size"), col("sq_error"));
    if (i_reg.is_none() || i_sc.is_none() || i_ns.is_none()) && default_cell.is_none() {
        return Err(RtlError::Schema(
            "metrics file has no regime/scenario/n_s columns and no default cell applies".into(),
        ));
    }

    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let parse_f = |i: usize, name: &str| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| RtlError::Schema(format!("row {row}: `{name}` is not a number: `{}`", field(i))))
        };
        let parse_opt_f = |i: Option<usize>| -> Result<Option<f64>> {
            match i.map(field) {
                None | Some("") => Ok(None),
                Some(s) => s
                    .parse()
                    .map(Some)
                    .map_err(|_| RtlError::Schema(format!("row {row}: not a number: `{s}`"))),
            }
        };
        let parse_opt_count = |i: Option<usize>| -> Result<Option<usize>> {
            Ok(parse_opt_f(i)?.map(|v| v.round() as usize))
        };
        let key = match (i_reg, i_sc, i_ns) {
            (Some(a), Some(b), Some(c)) => CellKey {
                regime: field(a).to_string(),
                scenario: field(b).to_string(),
                n_s: field(c)
                    .parse()
                    .map_err(|_| RtlError::Schema(format!("row {row}: bad n_s `{}`", field(c))))?,
            },
            _ => default_cell.cloned().expect("checked above"),
        };
        out.push((
            key,
            MetricsRecord {
                replication: parse_f(i_rep, "replication")? as usize,
                method: field(i_method).to_string(),
                value: parse_f(i_value, "value")?,
                c_count: parse_opt_count(Some(i_c))?,
                ic_count: parse_opt_count(Some(i_ic))?,
                rmse: parse_opt_f(Some(i_rmse))?,
                policy_size: parse_opt_count(i_size)?,
                sq_error: parse_opt_f(i_sq)?,
            },
        ));
    }
    Ok(out)
}

/// Aggregates grouped by cell, cells in order of first appearance.
pub fn aggregate_by_cell(rows: &[(CellKey, MetricsRecord)]) -> Vec<(CellKey, Vec<AggregateRow>)> {
    let mut cells: Vec<(CellKey, Vec<MetricsRecord>)> = Vec::new();
    for (k, r) in rows {
        match cells.iter_mut().find(|(c, _)| c == k) {
            Some((_, recs)) => recs.push(r.clone()),
            None => cells.push((k.clone(), vec![r.clone()])),
        }
    }
    cells.into_iter().map(|(k, recs)| (k, aggregate(&recs))).collect()
}

pub fn write_aggregate_csv<W: Write>(writer: W, cells: &[(CellKey, Vec<AggregateRow>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "regime",
        "scenario",
        "n_s",
        "method",
        "replications",
        "value_mean",
        "value_sd",
        "C_median",
        "C_mad",
        "IC_median",
        "IC_mad",
        "RMSE_median",
        "RMSE_mad",
        "sq_error_mean",
    ])?;
    for (k, rows) in cells {
        for r in rows {
            w.write_record([
                k.regime.clone(),
                k.scenario.clone(),
                k.n_s.to_string(),
                r.method.clone(),
                r.replications.to_string(),
                r.value_mean.to_string(),
                r.value_sd.to_string(),
                opt(&r.c_median),
                opt(&r.c_mad),
                opt(&r.ic_median),
                opt(&r.ic_mad),
                opt(&r.rmse_median),
                opt(&r.rmse_mad),
                opt(&r.sq_error_mean),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn fmt_pair(m: Option<f64>, d: Option<f64>, digits: usize) -> String {
    match (m, d) {
        (Some(m), Some(d)) => format!("{m:.digits$} ({d:.digits$})"),
        _ => String::new(),
    }
}

/// Aligned text tables, one per regime: scenario blocks of method rows, one
/// column group (Value, C, IC, RMSE) per source size.
pub fn format_tables(cells: &[(CellKey, Vec<AggregateRow>)]) -> String {
    let mut regimes: Vec<&str> = Vec::new();
    for (k, _) in cells {
        if !regimes.contains(&k.regime.as_str()) {
            regimes.push(&k.regime);
        }
    }
    let mut out = String::new();
    for regime in regimes {
        let in_regime: Vec<&(CellKey, Vec<AggregateRow>)> = cells.iter().filter(|(k, _)| k.regime == regime).collect();
        let mut sizes: Vec<usize> = in_regime.iter().map(|(k, _)| k.n_s).collect();
        sizes.sort_unstable();
        sizes.dedup();
        let mut scenarios: Vec<&str> = in_regime.iter().map(|(k, _)| k.scenario.as_str()).collect();
        scenarios.sort_by_key(|s| (s.len(), s.to_string()));
        scenarios.dedup();

        let mut table: Vec<Vec<String>> = Vec::new();
        let mut head = vec![String::new(), "Method".to_string()];
        for n in &sizes {
            head.extend([format!("Value[ns={n}]"), "C".into(), "IC".into(), "RMSE".into()]);
        }
        table.push(head);
        for sc in scenarios {
            table.push(vec![format!("Scenario {sc}")]);
            let mut methods: Vec<String> = Vec::new();
            for n in &sizes {
                if let Some((_, rows)) = in_regime.iter().find(|(k, _)| k.scenario == sc && k.n_s == *n) {
                    for r in rows {
                        if !methods.contains(&r.method) {
                            methods.push(r.method.clone());
                        }
                    }
                }
            }
            for m in methods {
                let mut line = vec![String::new(), m.clone()];
                for n in &sizes {
                    let row = in_regime
                        .iter()
                        .find(|(k, _)| k.scenario == sc && k.n_s == *n)
                        .and_then(|(_, rows)| rows.iter().find(|r| r.method == m));
                    match row {
                        Some(r) if r.c_median.is_none() && r.rmse_median.is_none() => {
                            line.extend([format!("{:.2}", r.value_mean), String::new(), String::new(), String::new()]);
                        }
                        Some(r) => line.extend([
                            format!("{:.2} ({:.2})", r.value_mean, r.value_sd),
                            fmt_pair(r.c_median, r.c_mad, 0),
                            fmt_pair(r.ic_median, r.ic_mad, 0),
                            fmt_pair(r.rmse_median, r.rmse_mad, 2),
                        ]),
                        None => line.extend(std::iter::repeat_n(String::new(), 4)),
                    }
                }
                table.push(line);
            }
        }
        let ncols = table.iter().map(Vec::len).max().unwrap_or(0);
        let widths: Vec<usize> = (0..ncols)
            .map(|c| table.iter().filter(|r| r.len() > 1).filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
            .collect();
        out.push_str(&format!("Regime: {regime}\n"));
        for row in &table {
            if row.len() == 1 {
                out.push_str(&row[0]);
            } else {
                let cells: Vec<String> = row
                    .iter()
                    .enumerate()
                    .map(|(c, s)| if c < 2 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                    .collect();
                out.push_str(cells.join("  ").trim_end());
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}
