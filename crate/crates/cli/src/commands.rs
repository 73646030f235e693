use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rtl_core::baselines::{fit_targ_only, fit_translasso, TransLassoConfig};
use rtl_core::data::{CsvSchema, Sample, TrialTable};
use rtl_core::design::{FeatureMap, TreatmentCoding};
use rtl_core::estimator::{fit_rtl, policy_size, FitConfig, ModelRecord, SourceModel};
use rtl_core::experiment::{cell_key, parse_methods, run_grid, Method, ReplicationFailure};
use rtl_core::metrics::{
    aggregate_by_cell, crossfit_evaluate, format_tables, read_records_csv, write_aggregate_csv, write_records_csv,
    CellKey, CrossfitInputs, FoldPlan, MetricsRecord,
};
use rtl_core::simulation::{Regime, ScenarioSpec, Shift, StandinSpec};
use serde::Serialize;

use crate::config::{output_dir, require_existing, DataSection, FileConfig, SimulationSection};
use crate::error::{CliError, CliResult};
use crate::{EvaluateArgs, ExportArgs, FitArgs, SimulateArgs, StandinArgs};

const DEFAULT_SEED: u64 = 1;
const DEFAULT_REPS: usize = 100;
const DEFAULT_EVAL_FOLDS: usize = 3;

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create `{}`: {e}", dir.display())))
}

fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("cannot write `{}`: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write `{}`: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    text.push('\n');
    write_text(path, &text)
}

/// Output writers report failures as runtime errors, not data errors.
fn runtime<T>(r: rtl_core::Result<T>) -> CliResult<T> {
    r.map_err(CliError::runtime)
}

fn resolve_methods(flag: Option<&str>, file: Option<&Vec<String>>) -> CliResult<Vec<Method>> {
    match (flag, file) {
        (Some(s), _) => Ok(parse_methods(s)?),
        (None, Some(list)) => Ok(parse_methods(&list.join(","))?),
        (None, None) => Ok(Method::ALL.to_vec()),
    }
}

fn parse_list<T: std::str::FromStr<Err = rtl_core::RtlError>>(items: &[String]) -> CliResult<Vec<T>> {
    items.iter().map(|s| s.parse::<T>().map_err(CliError::from)).collect()
}

#[derive(Debug, Serialize)]
struct SimulateManifest<'a> {
    tool: &'static str,
    version: &'static str,
    core_version: &'static str,
    command: &'static str,
    seed: u64,
    reps: usize,
    methods: Vec<String>,
    fit: &'a FitConfig,
    cells: &'a [ScenarioSpec],
    external: &'a [PathBuf],
    attempted: usize,
    failed: usize,
    files: Vec<&'static str>,
}

pub fn simulate(args: &SimulateArgs) -> CliResult<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let sim = &file.simulation;
    let seed = args.common.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let reps = args.reps.or(file.reps).unwrap_or(DEFAULT_REPS);
    if reps == 0 {
        return Err(CliError::Config("reps must be >= 1".into()));
    }
    let methods = resolve_methods(args.methods.as_deref(), file.methods.as_ref())?;
    let regimes: Vec<Regime> = match args.regime.as_ref().or(sim.regimes.as_ref()) {
        Some(list) => parse_list(list)?,
        None => Regime::ALL.to_vec(),
    };
    let shifts: Vec<Shift> = match args.scenario.as_ref().or(sim.scenarios.as_ref()) {
        Some(list) => parse_list(list)?,
        None => Shift::ALL.to_vec(),
    };
    let sizes = args.ns.clone().or_else(|| sim.n_s.clone()).unwrap_or_else(|| vec![50, 150]);
    if regimes.is_empty() || shifts.is_empty() || sizes.is_empty() {
        return Err(CliError::Config("the simulation grid is empty".into()));
    }
    let defaults = ScenarioSpec::default();
    let base = ScenarioSpec {
        q: args.q.or(sim.q).unwrap_or(defaults.q),
        rho: sim.rho.unwrap_or(defaults.rho),
        effect_size: sim.effect_size.unwrap_or(defaults.effect_size),
        n_t: args.nt.or(sim.n_t).unwrap_or(defaults.n_t),
        n_test: args.ntest.or(sim.n_test).unwrap_or(defaults.n_test),
        noise_sd: args.noise_sd.or(sim.noise_sd).unwrap_or(defaults.noise_sd),
        seed,
        ..defaults
    };
    let mut cells = Vec::new();
    for &regime in &regimes {
        for &shift in &shifts {
            for &n_s in &sizes {
                let spec = ScenarioSpec {
                    regime,
                    shift,
                    n_s,
                    ..base.clone()
                };
                spec.validate()?;
                cells.push(spec);
            }
        }
    }
    let fit_cfg = file.fit.unwrap_or_default();
    let external: Vec<PathBuf> = if args.external.is_empty() {
        sim.external.clone().unwrap_or_default()
    } else {
        args.external.clone()
    };
    for p in &external {
        require_existing(p, "external metrics file")?;
    }
    let jobs = args.jobs.or(file.jobs).unwrap_or(0);
    let out = output_dir(args.common.out.as_deref(), file.out.as_deref(), "simulate");

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    log::info!("running {} cells x {reps} replications", cells.len());
    let result = pool.install(|| run_grid(&cells, reps, &methods, &fit_cfg))?;
    if result.attempted > 0 && result.failures.len() == result.attempted {
        return Err(CliError::Runtime(format!(
            "all {} replications failed; first error: {}",
            result.attempted, result.failures[0].message
        )));
    }

    let mut rows = result.rows;
    let default_cell = (cells.len() == 1).then(|| cell_key(&cells[0]));
    for p in &external {
        rows.extend(read_external(p, default_cell.as_ref())?);
    }

    create_dir(&out)?;
    runtime(write_records_csv(create_file(&out.join("records.csv"))?, &rows))?;
    let aggregates = aggregate_by_cell(&rows);
    runtime(write_aggregate_csv(create_file(&out.join("aggregate.csv"))?, &aggregates))?;
    let table = format_tables(&aggregates);
    write_text(&out.join("table.txt"), &table)?;
    write_failures(&out.join("failures.csv"), &result.failures)?;

    let resolved = FileConfig {
        seed: Some(seed),
        reps: Some(reps),
        methods: Some(methods.iter().map(Method::to_string).collect()),
        out: None,
        jobs: None,
        simulation: SimulationSection {
            regimes: Some(regimes.iter().map(ToString::to_string).collect()),
            scenarios: Some(shifts.iter().map(ToString::to_string).collect()),
            n_s: Some(sizes),
            q: Some(base.q),
            rho: Some(base.rho),
            effect_size: Some(base.effect_size),
            n_t: Some(base.n_t),
            n_test: Some(base.n_test),
            noise_sd: Some(base.noise_sd),
            external: (!external.is_empty()).then(|| external.clone()),
        },
        fit: Some(fit_cfg),
        data: DataSection::default(),
    };
    write_text(&out.join("config.toml"), &resolved.to_toml()?)?;
    write_json(
        &out.join("manifest.json"),
        &SimulateManifest {
            tool: "rtl",
            version: env!("CARGO_PKG_VERSION"),
            core_version: rtl_core::VERSION,
            command: "simulate",
            seed,
            reps,
            methods: methods.iter().map(Method::to_string).collect(),
            fit: &fit_cfg,
            cells: &cells,
            external: &external,
            attempted: result.attempted,
            failed: result.failures.len(),
            files: vec!["records.csv", "aggregate.csv", "table.txt", "failures.csv", "config.toml"],
        },
    )?;
    if !result.failures.is_empty() {
        eprintln!(
            "rtl: {} of {} replications failed; see failures.csv",
            result.failures.len(),
            result.attempted
        );
    }
    print!("{table}");
    println!("wrote {}", out.display());
    Ok(())
}

fn read_external(path: &Path, default_cell: Option<&CellKey>) -> CliResult<Vec<(CellKey, MetricsRecord)>> {
    let f = File::open(path).map_err(|e| CliError::Data(format!("cannot open `{}`: {e}", path.display())))?;
    read_records_csv(f, default_cell).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_failures(path: &Path, failures: &[ReplicationFailure]) -> CliResult<()> {
    let mut w = create_file(path)?;
    let mut text = String::from("regime,scenario,n_s,replication,message\n");
    for f in failures {
        text.push_str(&format!(
            "{},{},{},{},\"{}\"\n",
            f.cell.regime,
            f.cell.scenario,
            f.cell.n_s,
            f.replication,
            f.message.replace('"', "'")
        ));
    }
    w.write_all(text.as_bytes()).map_err(CliError::runtime)
}

fn load_table(path: &Path, schema: &CsvSchema) -> CliResult<TrialTable> {
    require_existing(path, "data file")?;
    TrialTable::from_path(path, schema).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> CliResult<ModelRecord> {
    require_existing(path, "model file")?;
    ModelRecord::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Source and target rows, from a split column or from separate files.
struct TrialData {
    covariate_names: Vec<String>,
    num_arms: usize,
    source: Option<Sample>,
    target: Sample,
}

fn load_trial(data: &Path, source_data: Option<&Path>, schema: &CsvSchema) -> CliResult<TrialData> {
    let table = load_table(data, schema)?;
    let mut num_arms = table.num_arms;
    let (source, target) = if schema.split_column.is_some() {
        let tv = schema.target_value.as_deref().unwrap_or("target");
        let sv = schema.source_value.as_deref().unwrap_or("source");
        let source = table.subset(sv).ok();
        (source, table.subset(tv)?)
    } else {
        (None, table.sample.clone())
    };
    let source = match (source, source_data) {
        (Some(s), _) => Some(s),
        (None, Some(p)) => {
            let mut plain = schema.clone();
            plain.split_column = None;
            let st = load_table(p, &plain)?;
            if st.covariate_names != table.covariate_names {
                return Err(CliError::Data(format!(
                    "source covariates {:?} do not match target covariates {:?}",
                    st.covariate_names, table.covariate_names
                )));
            }
            num_arms = num_arms.max(st.num_arms);
            Some(st.sample)
        }
        (None, None) => None,
    };
    Ok(TrialData {
        covariate_names: table.covariate_names,
        num_arms,
        source,
        target,
    })
}

fn map_from_record(record: &ModelRecord, names: &[String]) -> CliResult<FeatureMap> {
    if record.q != names.len() {
        return Err(CliError::Data(format!(
            "model has {} covariates, data has {}",
            record.q,
            names.len()
        )));
    }
    if !record.covariate_names.is_empty() && record.covariate_names != names {
        return Err(CliError::Data(format!(
            "model covariates {:?} do not match data covariates {names:?}",
            record.covariate_names
        )));
    }
    Ok(record.feature_map()?)
}

/// Source model from a record file, or fitted on the source rows.
fn obtain_source_model(
    record_path: Option<&Path>,
    trial: &TrialData,
    config: &FitConfig,
    seed: u64,
) -> CliResult<SourceModel> {
    if let Some(p) = record_path {
        let rec = load_model(p)?;
        map_from_record(&rec, &trial.covariate_names)?;
        return Ok(rec.to_source_model()?);
    }
    let source = trial.source.as_ref().ok_or_else(|| {
        CliError::Config("RTL needs --source-model, --source-data or a split column with source rows".into())
    })?;
    let map = FeatureMap::new(trial.covariate_names.len(), TreatmentCoding::new(trial.num_arms, 0)?);
    Ok(SourceModel::fit(source, map, config, seed)?)
}

pub fn fit(args: &FitArgs) -> CliResult<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let seed = args.common.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let config = file.fit.unwrap_or_default();
    let schema = args.schema.resolve(&file.data);
    let data = args
        .data
        .clone()
        .or_else(|| file.data.path.clone())
        .ok_or_else(|| CliError::Config("fit needs --data".into()))?;
    let source_data = args.source_data.clone().or_else(|| file.data.source_data.clone());
    let source_model = args.source_model.clone().or_else(|| file.data.source_model.clone());
    let trial = load_trial(&data, source_data.as_deref(), &schema)?;
    let default_map = || -> CliResult<FeatureMap> {
        Ok(FeatureMap::new(
            trial.covariate_names.len(),
            TreatmentCoding::new(trial.num_arms, 0)?,
        ))
    };

    let method = args.method.to_ascii_lowercase();
    let mut record = match method.as_str() {
        "source" => {
            // with a split column the source rows are the training set; otherwise the whole file
            let rows = if schema.split_column.is_some() {
                trial.source.as_ref().ok_or_else(|| CliError::Data("no source rows".into()))?
            } else {
                &trial.target
            };
            let sm = SourceModel::fit(rows, default_map()?, &config, seed)?;
            ModelRecord::new("source", sm.beta(), sm.feature_map(), seed, rows.len())
        }
        _ => match method.parse::<Method>()? {
            Method::Rtl => {
                let sm = obtain_source_model(source_model.as_deref(), &trial, &config, seed.wrapping_add(1))?;
                let model = fit_rtl(&trial.target, &sm, &config, seed)?;
                ModelRecord::from_rtl(&model, trial.target.len())
            }
            Method::TargOnly => {
                let m = fit_targ_only(&trial.target, &default_map()?, &config, seed)?;
                let mut rec = ModelRecord::new("targonly", m.beta_t.view(), &m.feature_map, seed, trial.target.len());
                rec.lambda = m.steps.first().map(|s| s.lambda);
                rec
            }
            Method::TransLasso => {
                let source = trial
                    .source
                    .as_ref()
                    .ok_or_else(|| CliError::Config("Trans-Lasso needs --source-data or a split column".into()))?;
                let m = fit_translasso(source, &trial.target, &default_map()?, &TransLassoConfig::from(&config), seed)?;
                ModelRecord::new(
                    "translasso",
                    m.beta_t.view(),
                    &m.feature_map,
                    seed,
                    trial.target.len() + source.len(),
                )
            }
        },
    };
    record.covariate_names = trial.covariate_names.clone();

    let out = output_dir(args.common.out.as_deref(), file.out.as_deref(), "fit");
    create_dir(&out)?;
    let path = out.join("model.json");
    runtime(record.write(&path))?;
    let map = record.feature_map()?;
    let size = policy_size(ndarray_view(&record.coefficients), &map.layout());
    println!(
        "method={} n_train={} policy_size={} lambda={}",
        record.method,
        record.n_train,
        size,
        record.lambda.map(|l| l.to_string()).unwrap_or_else(|| "-".into())
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn ndarray_view(v: &[f64]) -> rtl_core::ndarray::ArrayView1<'_, f64> {
    rtl_core::ndarray::ArrayView1::from(v)
}

#[derive(Debug, Serialize)]
struct EvaluateManifest<'a> {
    tool: &'static str,
    version: &'static str,
    core_version: &'static str,
    command: &'static str,
    seed: u64,
    data: &'a Path,
    source_data: Option<&'a Path>,
    source_model: Option<&'a Path>,
    schema: &'a CsvSchema,
    folds: usize,
    fold_sizes: Vec<usize>,
    methods: Vec<String>,
    propensity: Option<&'a Vec<f64>>,
    fit: &'a FitConfig,
    n_target: usize,
    n_source: Option<usize>,
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let seed = args.common.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let config = file.fit.unwrap_or_default();
    let schema = args.schema.resolve(&file.data);
    let data = args
        .data
        .clone()
        .or_else(|| file.data.path.clone())
        .ok_or_else(|| CliError::Config("evaluate needs --data".into()))?;
    let source_data = args.source_data.clone().or_else(|| file.data.source_data.clone());
    let source_model_path = args.source_model.clone().or_else(|| file.data.source_model.clone());
    let folds = args.folds.or(file.data.folds).unwrap_or(DEFAULT_EVAL_FOLDS);
    let methods = resolve_methods(args.methods.as_deref(), file.methods.as_ref())?;
    let propensity = args.propensity.clone().or_else(|| file.data.propensity.clone());

    let trial = load_trial(&data, source_data.as_deref(), &schema)?;
    if methods.contains(&Method::TransLasso) && trial.source.is_none() {
        return Err(CliError::Config(
            "TransLasso needs individual-level source rows (--source-data or a split column)".into(),
        ));
    }
    let source_model = obtain_source_model(source_model_path.as_deref(), &trial, &config, seed.wrapping_add(1))?;
    if let Some(p) = &propensity {
        if p.len() != source_model.feature_map().num_arms() {
            return Err(CliError::Config(format!(
                "propensity lists {} arms, model has {}",
                p.len(),
                source_model.feature_map().num_arms()
            )));
        }
    }
    let plan = FoldPlan::new(trial.target.len(), folds, seed)?;
    let report = crossfit_evaluate(
        &CrossfitInputs {
            target: &trial.target,
            source: trial.source.as_ref(),
            source_model: &source_model,
            propensity: propensity.clone(),
        },
        &methods,
        &plan,
        &config,
    )?;

    let out = output_dir(args.common.out.as_deref(), file.out.as_deref(), "evaluate");
    create_dir(&out)?;
    runtime(report.write_csv(create_file(&out.join("evaluation.csv"))?))?;
    let table = report.to_table();
    write_text(&out.join("table.txt"), &table)?;
    write_json(&out.join("report.json"), &report)?;
    write_json(
        &out.join("manifest.json"),
        &EvaluateManifest {
            tool: "rtl",
            version: env!("CARGO_PKG_VERSION"),
            core_version: rtl_core::VERSION,
            command: "evaluate",
            seed,
            data: &data,
            source_data: source_data.as_deref(),
            source_model: source_model_path.as_deref(),
            schema: &schema,
            folds,
            fold_sizes: plan.fold_sizes(),
            methods: methods.iter().map(Method::to_string).collect(),
            propensity: propensity.as_ref(),
            fit: &config,
            n_target: trial.target.len(),
            n_source: trial.source.as_ref().map(Sample::len),
        },
    )?;
    print!("{table}");
    println!("fold sizes: {:?}", plan.fold_sizes());
    println!("wrote {}", out.display());
    Ok(())
}

pub fn export_tables(args: &ExportArgs) -> CliResult<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut rows = Vec::new();
    for p in &args.records {
        require_existing(p, "metrics file")?;
        rows.extend(read_external(p, None)?);
    }
    let mut cells: Vec<CellKey> = Vec::new();
    for (k, _) in &rows {
        if !cells.contains(k) {
            cells.push(k.clone());
        }
    }
    let default_cell = (cells.len() == 1).then(|| cells[0].clone());
    for p in &args.external {
        require_existing(p, "external metrics file")?;
        rows.extend(read_external(p, default_cell.as_ref())?);
    }
    let out = output_dir(args.common.out.as_deref(), file.out.as_deref(), "tables");
    create_dir(&out)?;
    let aggregates = aggregate_by_cell(&rows);
    runtime(write_aggregate_csv(create_file(&out.join("aggregate.csv"))?, &aggregates))?;
    let table = format_tables(&aggregates);
    write_text(&out.join("table.txt"), &table)?;
    print!("{table}");
    println!("wrote {}", out.display());
    Ok(())
}

pub fn standin(args: &StandinArgs) -> CliResult<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let spec = StandinSpec {
        seed: args.common.seed.or(file.seed).unwrap_or(StandinSpec::default().seed),
        ..StandinSpec::default()
    };
    let out = output_dir(args.common.out.as_deref(), file.out.as_deref(), "standin");
    create_dir(&out)?;
    let path = out.join("standin.csv");
    runtime(spec.write_csv(create_file(&path)?))?;
    write_json(&out.join("manifest.json"), &spec)?;
    println!("wrote {}", path.display());
    Ok(())
}
