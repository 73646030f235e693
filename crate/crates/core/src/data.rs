//! Observational units shared by the estimators, simulation and evaluation code,
//! plus CSV ingestion for real trial data.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::design::FeatureMap;
use crate::error::{Result, RtlError};

/// Covariates, assigned arms and outcomes for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub covariates: Array2<f64>,
    pub arms: Vec<usize>,
    pub outcome: Array1<f64>,
}

impl Sample {
    pub fn new(covariates: Array2<f64>, arms: Vec<usize>, outcome: Array1<f64>) -> Result<Self> {
        let n = covariates.nrows();
        if arms.len() != n {
            return Err(RtlError::DimensionMismatch {
                context: "arm vector",
                expected: n,
                received: arms.len(),
            });
        }
        if outcome.len() != n {
            return Err(RtlError::DimensionMismatch {
                context: "outcome vector",
                expected: n,
                received: outcome.len(),
            });
        }
        Ok(Self {
            covariates,
            arms,
            outcome,
        })
    }

    pub fn empty(q: usize) -> Self {
        Self {
            covariates: Array2::zeros((0, q)),
            arms: Vec::new(),
            outcome: Array1::zeros(0),
        }
    }

    pub fn len(&self) -> usize {
        self.outcome.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcome.is_empty()
    }

    pub fn q(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn design(&self, map: &FeatureMap) -> Result<Array2<f64>> {
        map.encode_matrix(self.covariates.view(), &self.arms)
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            covariates: self.covariates.select(Axis(0), rows),
            arms: rows.iter().map(|&i| self.arms[i]).collect(),
            outcome: self.outcome.select(Axis(0), rows),
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn stack(&self, other: &Sample) -> Result<Self> {
        if self.q() != other.q() {
            return Err(RtlError::DimensionMismatch {
                context: "stacked covariates",
                expected: self.q(),
                received: other.q(),
            });
        }
        let covariates = ndarray::concatenate(Axis(0), &[self.covariates.view(), other.covariates.view()])
            .expect("column counts checked");
        let mut arms = self.arms.clone();
        arms.extend_from_slice(&other.arms);
        let outcome = ndarray::concatenate(Axis(0), &[self.outcome.view(), other.outcome.view()])
            .expect("1-d concatenation");
        Ok(Self {
            covariates,
            arms,
            outcome,
        })
    }

    pub fn mean_outcome(&self) -> f64 {
        crate::metrics::compensated_mean(self.outcome.iter().copied())
    }

    /// Fraction of rows assigned to each arm.
    pub fn arm_frequencies(&self, num_arms: usize) -> Vec<f64> {
        let mut counts = vec![0.0; num_arms];
        for &a in &self.arms {
            if a < num_arms {
                counts[a] += 1.0;
            }
        }
        let n = self.len().max(1) as f64;
        counts.iter().map(|c| c / n).collect()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.covariates.row(i)
    }

    /// CSV with columns `y, a, o1, ..., oq`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["y".to_string(), "a".to_string()];
        header.extend((1..=self.q()).map(|j| format!("o{j}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.outcome[i].to_string(), self.arms[i].to_string()];
            rec.extend(self.covariates.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Column roles for a trial CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub outcome: String,
    pub treatment: String,
    /// Covariate columns; empty means every column not otherwise named.
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Column identifying which site/study a row belongs to.
    #[serde(default)]
    pub split_column: Option<String>,
    #[serde(default)]
    pub source_value: Option<String>,
    #[serde(default)]
    pub target_value: Option<String>,
}

impl CsvSchema {
    pub fn new(outcome: impl Into<String>, treatment: impl Into<String>) -> Self {
        Self {
            outcome: outcome.into(),
            treatment: treatment.into(),
            covariates: Vec::new(),
            split_column: None,
            source_value: None,
            target_value: None,
        }
    }
}

/// A parsed trial table, optionally split into source and target rows.
#[derive(Debug, Clone)]
pub struct TrialTable {
    pub covariate_names: Vec<String>,
    pub num_arms: usize,
    pub split: Option<Vec<String>>,
    pub sample: Sample,
}

impl TrialTable {
    pub fn from_path(path: &Path, schema: &CsvSchema) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(file, schema)
    }

    pub fn from_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let index: BTreeMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
        let find = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| RtlError::Schema(format!("missing column `{name}`")))
        };
        let y_col = find(&schema.outcome)?;
        let a_col = find(&schema.treatment)?;
        let split_col = schema.split_column.as_deref().map(find).transpose()?;
        let cov_names: Vec<String> = if schema.covariates.is_empty() {
            headers
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != y_col && *i != a_col && Some(*i) != split_col)
                .map(|(_, h)| h.clone())
                .collect()
        } else {
            schema.covariates.clone()
        };
        let cov_cols = cov_names.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
        if cov_cols.is_empty() {
            return Err(RtlError::Schema("no covariate columns".into()));
        }

        let mut y = Vec::new();
        let mut arms = Vec::new();
        let mut cov = Vec::new();
        let mut split = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = line + 2;
            let num = |col: usize, name: &str| -> Result<f64> {
                let raw = rec.get(col).unwrap_or("");
                raw.parse::<f64>()
                    .map_err(|_| RtlError::Schema(format!("row {row}: column `{name}` is not numeric: `{raw}`")))
            };
            y.push(num(y_col, &schema.outcome)?);
            let raw_arm = rec.get(a_col).unwrap_or("");
            let arm = raw_arm.parse::<usize>().map_err(|_| {
                RtlError::Schema(format!(
                    "row {row}: treatment column `{}` must hold arm indices 0..K-1, got `{raw_arm}`",
                    schema.treatment
                ))
            })?;
            arms.push(arm);
            for (&c, name) in cov_cols.iter().zip(&cov_names) {
                cov.push(num(c, name)?);
            }
            if let Some(c) = split_col {
                split.push(rec.get(c).unwrap_or("").to_string());
            }
        }
        let n = y.len();
        if n == 0 {
            return Err(RtlError::Schema("no data rows".into()));
        }
        let num_arms = arms.iter().max().map(|m| m + 1).unwrap_or(0).max(2);
        let covariates = Array2::from_shape_vec((n, cov_cols.len()), cov).expect("row-major fill");
        Ok(Self {
            covariate_names: cov_names,
            num_arms,
            split: split_col.map(|_| split),
            sample: Sample::new(covariates, arms, Array1::from(y))?,
        })
    }

    /// Rows whose split column equals `value`.
    pub fn subset(&self, value: &str) -> Result<Sample> {
        let split = self
            .split
            .as_ref()
            .ok_or_else(|| RtlError::Schema("no split column configured".into()))?;
        let rows: Vec<usize> = (0..split.len()).filter(|&i| split[i] == value).collect();
        if rows.is_empty() {
            return Err(RtlError::Schema(format!("split value `{value}` matches no rows")));
        }
        Ok(self.sample.select(&rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "site,y,trt,age,bmi\nA,1.5,0,50,25\nB,2.0,1,60,30\nA,-1,1,40,22\n";

    #[test]
    fn parses_named_columns_and_split() {
        let mut schema = CsvSchema::new("y", "trt");
        schema.split_column = Some("site".into());
        let t = TrialTable::from_reader(CSV.as_bytes(), &schema).unwrap();
        assert_eq!(t.covariate_names, vec!["age", "bmi"]);
        assert_eq!(t.sample.len(), 3);
        assert_eq!(t.num_arms, 2);
        let a = t.subset("A").unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a.outcome.to_vec(), vec![1.5, -1.0]);
        assert_eq!(a.covariates.row(1).to_vec(), vec![40.0, 22.0]);
        assert!(t.subset("C").is_err());
    }

    #[test]
    fn missing_outcome_column_is_named() {
        let schema = CsvSchema::new("ess_change", "trt");
        let err = TrialTable::from_reader(CSV.as_bytes(), &schema).unwrap_err();
        assert!(err.to_string().contains("ess_change"), "{err}");
    }

    #[test]
    fn non_numeric_cell_reports_row() {
        let schema = CsvSchema::new("y", "trt");
        let bad = "y,trt,x\n1,0,2\n1,1,oops\n";
        let err = TrialTable::from_reader(bad.as_bytes(), &schema).unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");
    }

    #[test]
    fn stack_and_select() {
        let a = Sample::new(Array2::zeros((2, 1)), vec![0, 1], Array1::from(vec![1.0, 2.0])).unwrap();
        let b = Sample::new(Array2::ones((1, 1)), vec![1], Array1::from(vec![3.0])).unwrap();
        let s = a.stack(&b).unwrap();
        assert_eq!(s.arms, vec![0, 1, 1]);
        assert_eq!(s.select(&[2]).outcome.to_vec(), vec![3.0]);
        assert_eq!(s.arm_frequencies(2), vec![1.0 / 3.0, 2.0 / 3.0]);
        assert!(Sample::new(Array2::zeros((2, 1)), vec![0], Array1::zeros(2)).is_err());
    }

    #[test]
    fn csv_round_trip_through_table() {
        let s = Sample::new(
            Array2::from_shape_vec((2, 2), vec![0.1, -2.0, 3.5, 1e-3]).unwrap(),
            vec![1, 0],
            Array1::from(vec![0.25, -7.0]),
        )
        .unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let t = TrialTable::from_reader(buf.as_slice(), &CsvSchema::new("y", "a")).unwrap();
        assert_eq!(t.sample, s);
    }
}
