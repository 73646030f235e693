//! TOML run configuration. Every key is optional; command-line flags override
//! file values, which override built-in defaults.

use std::path::{Path, PathBuf};

use rtl_core::data::CsvSchema;
use rtl_core::estimator::FitConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const OUTPUT_ROOT_ENV: &str = "RTL_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "rtl-output";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    pub simulation: SimulationSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitConfig>,
    pub data: DataSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regimes: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenarios: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_s: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub effect_size: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_t: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_sd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external: Option<Vec<PathBuf>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_model: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub treatment: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_column: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_value: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_value: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub propensity: Option<Vec<f64>>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("invalid config `{}`: {e}", path.display())))
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(CliError::runtime)
    }
}

/// Column-role flags shared by commands that read trial CSVs.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct SchemaArgs {
    /// Outcome column.
    #[arg(long)]
    pub outcome: Option<String>,
    /// Treatment column holding arm indices 0..K-1.
    #[arg(long)]
    pub treatment: Option<String>,
    /// Comma-separated covariate columns (default: every other column).
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Column separating source from target rows.
    #[arg(long)]
    pub split_column: Option<String>,
    /// Split-column value marking source rows [default: source].
    #[arg(long)]
    pub source_value: Option<String>,
    /// Split-column value marking target rows [default: target].
    #[arg(long)]
    pub target_value: Option<String>,
}

impl SchemaArgs {
    pub fn resolve(&self, file: &DataSection) -> CsvSchema {
        let pick = |flag: &Option<String>, f: &Option<String>, d: Option<&str>| {
            flag.clone().or_else(|| f.clone()).or_else(|| d.map(str::to_string))
        };
        let mut schema = CsvSchema::new(
            pick(&self.outcome, &file.outcome, Some("y")).unwrap_or_default(),
            pick(&self.treatment, &file.treatment, Some("a")).unwrap_or_default(),
        );
        schema.covariates = self.covariates.clone().or_else(|| file.covariates.clone()).unwrap_or_default();
        schema.split_column = pick(&self.split_column, &file.split_column, None);
        schema.source_value = pick(&self.source_value, &file.source_value, Some("source"));
        schema.target_value = pick(&self.target_value, &file.target_value, Some("target"));
        schema
    }
}

/// `--out`, then the file's `out`, then `$RTL_OUTPUT_ROOT/<command>`.
pub fn output_dir(flag: Option<&Path>, file: Option<&Path>, command: &str) -> PathBuf {
    if let Some(p) = flag.or(file) {
        return p.to_path_buf();
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
    root.join(command)
}

pub fn require_existing(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} `{}` does not exist", path.display())))
    }
}
