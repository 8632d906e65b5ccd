//! One-axis experiment sweeps. Every (value, seed) cell trains one model
//! and lands in `cells/<key>/`, where the key hashes everything the result
//! depends on; a cell whose report already exists is not retrained.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LoadedCohort;
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, METRIC_COLUMNS};
use crate::model::{Branch, PoolingMode, PositionMode};
use crate::train::{evaluate, fit_model_to_cohort, train, TrainConfig};

/// Bumped whenever cell contents change meaning, so stale caches miss.
const CELL_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    LambdaCe,
    PositionMode,
    Layer,
    /// `alst` (classification readout), `alst_r` (regression readout) or
    /// `alst_fa` (phoneme tokens, regression readout).
    Variant,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::LambdaCe => "lambda_ce",
            SweepAxis::PositionMode => "position_mode",
            SweepAxis::Layer => "layer",
            SweepAxis::Variant => "variant",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Number(f64),
    Text(String),
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Number(v) => write!(f, "{v}"),
            AxisValue::Text(s) => f.write_str(s),
        }
    }
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_branch() -> Branch {
    Branch::Regression
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<AxisValue>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base_config: TrainConfig,
    /// Readout scored for every axis except `variant`.
    #[serde(default = "default_branch")]
    pub branch: Branch,
    /// Cohort for every axis except `layer`.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Held-out cohort. When absent the training cohort is split by patient.
    #[serde(default)]
    pub test_manifest: Option<PathBuf>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    /// For the `layer` axis: one manifest per layer value, split by patient.
    #[serde(default)]
    pub layer_manifests: BTreeMap<String, PathBuf>,
}

impl SweepSpec {
    /// Relative paths are taken relative to `dir`.
    pub fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        self.manifest.iter_mut().for_each(fix);
        self.test_manifest.iter_mut().for_each(fix);
        self.layer_manifests.values_mut().for_each(fix);
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep has no axis values".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("sweep has no seeds".into()));
        }
        for v in &self.values {
            let mut cfg = self.base_config.clone();
            apply_value(self.axis, v, &mut cfg, &mut self.branch.clone())?;
            if self.axis == SweepAxis::Layer && !self.layer_manifests.contains_key(&v.to_string()) {
                return Err(Error::Config(format!("no manifest for layer {v}")));
            }
        }
        if self.axis != SweepAxis::Layer && self.manifest.is_none() {
            return Err(Error::Config("sweep needs a manifest".into()));
        }
        self.base_config.validate()
    }
}

fn apply_value(axis: SweepAxis, value: &AxisValue, cfg: &mut TrainConfig, branch: &mut Branch) -> Result<()> {
    let bad = || Error::Config(format!("{value:?} is not a valid {} value", axis.name()));
    match axis {
        SweepAxis::LambdaCe => {
            cfg.model.lambda_ce = match value {
                AxisValue::Number(v) => *v,
                AxisValue::Text(s) => s.parse().map_err(|_| bad())?,
            };
        }
        SweepAxis::PositionMode => {
            cfg.model.position_mode = PositionMode::parse(&value.to_string()).ok_or_else(bad)?;
        }
        SweepAxis::Layer => {}
        SweepAxis::Variant => match value.to_string().as_str() {
            "alst" => *branch = Branch::Classification,
            "alst_r" => *branch = Branch::Regression,
            "alst_fa" => {
                *branch = Branch::Regression;
                cfg.model.pooling_mode = PoolingMode::Phoneme;
            }
            _ => return Err(bad()),
        },
    }
    cfg.model.validate()
}

/// Finished cell. `cached` is true when the report came from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub value: String,
    pub seed: u64,
    pub key: String,
    pub report: MetricReport,
    pub cached: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub value: String,
    pub runs: usize,
    /// Per metric in [`METRIC_COLUMNS`] order; `None` when no run has it.
    pub mean: Vec<Option<f64>>,
    /// Sample standard deviation; 0 for a single run.
    pub sd: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub cells: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
    /// Cells trained by this call, as opposed to read from the cache.
    pub trained: usize,
}

struct Dataset {
    train: LoadedCohort,
    test: LoadedCohort,
    hash: String,
}

fn cohort_hash(h: &mut Sha256, cohort: &LoadedCohort) {
    h.update(cohort.manifest.to_jsonl().as_bytes());
    for f in cohort.features.iter().flatten() {
        h.update(f.to_bytes());
    }
}

fn load_dataset(manifest: &Path, test_manifest: Option<&Path>, fraction: f64, split_seed: u64) -> Result<Dataset> {
    let all = LoadedCohort::from_path(manifest)?;
    let (train, test) = match test_manifest {
        Some(t) => (all, LoadedCohort::from_path(t)?),
        None => all.split(fraction, split_seed)?,
    };
    let mut h = Sha256::new();
    cohort_hash(&mut h, &train);
    h.update(b"\0test\0");
    cohort_hash(&mut h, &test);
    Ok(Dataset {
        train,
        test,
        hash: hex::encode(h.finalize()),
    })
}

struct CellPlan {
    value: String,
    seed: u64,
    config: TrainConfig,
    branch: Branch,
    data: usize,
    key: String,
}

fn cell_key(config: &TrainConfig, branch: Branch, data_hash: &str) -> String {
    let doc = serde_json::json!({
        "format": CELL_FORMAT,
        "config": config,
        "branch": branch,
        "data": data_hash,
    });
    hex::encode(Sha256::digest(doc.to_string().as_bytes()))
}

fn run_cell(plan: &CellPlan, data: &Dataset, cells_dir: &Path) -> Result<(MetricReport, bool)> {
    let dir = cells_dir.join(&plan.key);
    let report_path = dir.join("report.json");
    if let Ok(text) = fs::read_to_string(&report_path) {
        if let Ok(report) = serde_json::from_str(&text) {
            log::info!("cell {} ({} seed {}) cached", &plan.key[..12], plan.value, plan.seed);
            return Ok((report, true));
        }
    }
    log::info!("cell {} ({} seed {}) training", &plan.key[..12], plan.value, plan.seed);
    let outcome = train(&data.train, &plan.config, None, None)?;
    if let Some(e) = outcome.abort {
        return Err(e);
    }
    let report = evaluate(&outcome.checkpoint.params, &data.test, plan.branch, plan.config.tie_epsilon)?;

    // Write into a scratch directory, then rename, so a killed sweep never
    // leaves a half-written cell that looks complete.
    let tmp = cells_dir.join(format!(".{}.partial", plan.key));
    let _ = fs::remove_dir_all(&tmp);
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let files = [
        ("config.json", serde_json::to_string_pretty(&plan.config).expect("config serializes") + "\n"),
        ("log.jsonl", outcome.log.to_jsonl()),
        ("report.json", report.to_json()),
    ];
    for (name, body) in files {
        let p = tmp.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    let _ = fs::remove_dir_all(&dir);
    fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
    Ok((report, false))
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (Some(mean), Some(sd))
}

fn summarize(values: &[AxisValue], cells: &[CellResult]) -> Vec<SummaryRow> {
    values
        .iter()
        .map(|v| {
            let label = v.to_string();
            let runs: Vec<&CellResult> = cells.iter().filter(|c| c.value == label).collect();
            let (mean, sd) = (0..METRIC_COLUMNS.len())
                .map(|m| {
                    let xs: Vec<f64> = runs.iter().filter_map(|c| c.report.metric_values()[m]).collect();
                    mean_sd(&xs)
                })
                .unzip();
            SummaryRow {
                value: label,
                runs: runs.len(),
                mean,
                sd,
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SweepResult {
    pub fn cells_csv(&self) -> String {
        let mut out = format!("axis,value,seed,cell,{}\n", METRIC_COLUMNS.join(","));
        for c in &self.cells {
            let metrics: Vec<String> = c.report.metric_values().into_iter().map(fmt_opt).collect();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.axis.name(),
                c.value,
                c.seed,
                c.key,
                metrics.join(",")
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let cols: Vec<String> = METRIC_COLUMNS.iter().flat_map(|m| [format!("{m}_mean"), format!("{m}_sd")]).collect();
        let mut out = format!("axis,value,runs,{}\n", cols.join(","));
        for r in &self.summary {
            let vals: Vec<String> = r.mean.iter().zip(&r.sd).flat_map(|(m, s)| [fmt_opt(*m), fmt_opt(*s)]).collect();
            out.push_str(&format!("{},{},{},{}\n", self.axis.name(), r.value, r.runs, vals.join(",")));
        }
        out
    }
}

/// Runs every cell of `spec` on up to `threads` worker threads and writes
/// `cells/`, `cells.csv` and `summary.csv` under `out_dir`. Each training
/// run is serial; threads only spread cells.
pub fn run_sweep(spec: &SweepSpec, out_dir: &Path, threads: usize) -> Result<SweepResult> {
    spec.validate()?;
    let mut datasets = Vec::new();
    let mut data_index = BTreeMap::new();
    let mut plans = Vec::new();
    for v in &spec.values {
        let label = v.to_string();
        let source = match spec.axis {
            SweepAxis::Layer => (spec.layer_manifests[&label].clone(), None),
            _ => (
                spec.manifest.clone().expect("validated"),
                spec.test_manifest.clone(),
            ),
        };
        let data = match data_index.get(&source) {
            Some(&i) => i,
            None => {
                datasets.push(load_dataset(&source.0, source.1.as_deref(), spec.test_fraction, spec.split_seed)?);
                data_index.insert(source, datasets.len() - 1);
                datasets.len() - 1
            }
        };
        for &seed in &spec.seeds {
            let mut config = spec.base_config.clone();
            let mut branch = spec.branch;
            apply_value(spec.axis, v, &mut config, &mut branch)?;
            config.seed = seed;
            config.model = fit_model_to_cohort(&config.model, &datasets[data].train)?;
            config.validate()?;
            let key = cell_key(&config, branch, &datasets[data].hash);
            plans.push(CellPlan {
                value: label.clone(),
                seed,
                config,
                branch,
                data,
                key,
            });
        }
    }

    let cells_dir = out_dir.join("cells");
    fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<(MetricReport, bool)>> = pool.install(|| {
        plans
            .par_iter()
            .map(|p| run_cell(p, &datasets[p.data], &cells_dir))
            .collect()
    });

    let mut cells = Vec::with_capacity(plans.len());
    let mut trained = 0;
    for (plan, outcome) in plans.into_iter().zip(outcomes) {
        let (report, cached) = outcome?;
        trained += usize::from(!cached);
        cells.push(CellResult {
            value: plan.value,
            seed: plan.seed,
            key: plan.key,
            report,
            cached,
        });
    }
    let result = SweepResult {
        axis: spec.axis,
        summary: summarize(&spec.values, &cells),
        cells,
        trained,
    };
    for (name, body) in [("cells.csv", result.cells_csv()), ("summary.csv", result.summary_csv())] {
        let p = out_dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(result)
}
