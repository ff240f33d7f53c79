//! Executes validated experiment configs: data, training, prediction and
//! the on-disk artifacts of every repetition.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use seek_gp::bench::{load_csv_dataset, synthesize_dataset, test_set_description, test_set_sized, BenchmarkName};
use seek_gp::metrics::{evaluate, MetricsReport};
use seek_gp::optim::{fd_check, multi_restart_fit, FD_STEP};
use seek_gp::{Dataset, GpModel, Noise, PosteriorPrediction, Standardizer};

use crate::config::{ConfigKind, ExperimentConfig, RESTART_SEED_STRIDE};
use crate::error::{CliError, Result};
use crate::report::{self, Summary};

/// Starting noise variance for learned noise; every restart redraws it.
const INITIAL_NOISE: f64 = 1e-2;

/// Largest gradient-check error accepted by the `gradcheck` verb.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Seeds that define one repetition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RepSeeds {
    pub rep: usize,
    /// `config.seed + rep`.
    pub seed: u64,
    pub data: u64,
    pub train: u64,
}

impl RepSeeds {
    pub fn new(cfg: &ExperimentConfig, rep: usize) -> Self {
        let seed = cfg.seed.wrapping_add(rep as u64);
        Self {
            rep,
            seed,
            data: cfg.benchmark.seed.wrapping_add(seed),
            train: cfg.train.seed.wrapping_add(seed.wrapping_mul(RESTART_SEED_STRIDE)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RepStatus {
    Ok,
    Failed,
}

/// Everything recorded about one repetition.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub rep: usize,
    pub seed: u64,
    pub status: RepStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_nll: Option<f64>,
    /// Epochs of the winning restart.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    pub wall_ms: u128,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_restart: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_restarts: Option<usize>,
    /// SHA-256 of the raw training inputs and targets.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_hash: Option<String>,
    /// Absolute diagonal jitter of the final factorization.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_variance: Option<f64>,
}

/// Test inputs, truths and the prediction in data units.
#[derive(Clone, Debug)]
pub struct PredictionTable {
    pub x: DMatrix<f64>,
    pub truth: Vec<f64>,
    pub prediction: PosteriorPrediction,
}

/// Raw training and test data of one repetition.
#[derive(Clone, Debug)]
pub struct RepData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn dataset_hash(data: &Dataset) -> String {
    let mut h = Sha256::new();
    for i in 0..data.x.nrows() {
        for v in data.x.row(i).iter() {
            h.update(v.to_le_bytes());
        }
    }
    for v in &data.y {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn csv_subsample(data: Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > data.len() {
        return Err(CliError::validation(format!(
            "n_train = {n} but the csv file has only {} rows",
            data.len()
        )));
    }
    if n == data.len() {
        return Ok(data);
    }
    let mut rows: Vec<usize> = (0..data.len()).collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    rows.truncate(n);
    rows.sort_unstable();
    Ok(data.select(&rows)?)
}

/// Training and test data for one repetition, in data units.
pub fn load_data(cfg: &ExperimentConfig, seeds: RepSeeds) -> Result<RepData> {
    match cfg.benchmark.name {
        BenchmarkName::Csv => {
            let csv = cfg
                .benchmark
                .csv
                .as_ref()
                .ok_or_else(|| CliError::validation("the csv benchmark needs a [benchmark.csv] table"))?;
            let features = csv.feature_columns.as_deref();
            let all = load_csv_dataset(&csv.path, &csv.target_column, features)?;
            let train = csv_subsample(all, cfg.benchmark.n_train, seeds.seed)?;
            let test_path = csv
                .test_path
                .as_ref()
                .ok_or_else(|| CliError::validation("the csv benchmark needs csv.test_path"))?;
            let test = load_csv_dataset(test_path, &csv.target_column, features)?;
            Ok(RepData { train, test })
        }
        name => {
            let mut spec = cfg.benchmark.clone();
            spec.seed = seeds.data;
            let train = synthesize_dataset(&spec)?;
            let points = cfg.test_points().unwrap_or_else(|| seek_gp::bench::default_test_points(name));
            let test = test_set_sized(name, points)?;
            Ok(RepData { train, test })
        }
    }
}

pub fn test_description(cfg: &ExperimentConfig) -> String {
    match cfg.test_points() {
        Some(n) => test_set_description(cfg.benchmark.name, n),
        None => {
            let path = cfg.benchmark.csv.as_ref().and_then(|c| c.test_path.clone());
            format!("held-out csv file {}", path.unwrap_or_default())
        }
    }
}

/// Untrained model for the config, on `dim` inputs.
pub fn build_model(cfg: &ExperimentConfig, dim: usize, seed: u64) -> Result<GpModel> {
    let kernel_cfg = cfg
        .kernel
        .as_ref()
        .ok_or_else(|| CliError::validation("missing [kernel] table"))?;
    let kernel = kernel_cfg.build(dim, seed)?;
    let noise = match cfg.fixed_noise {
        Some(v) => Noise::fixed(v)?,
        None => Noise::learned(INITIAL_NOISE)?,
    };
    Ok(GpModel::new(kernel, noise))
}

fn train_and_predict(cfg: &ExperimentConfig, seeds: RepSeeds, record: &mut RunRecord) -> Result<PredictionTable> {
    let data = load_data(cfg, seeds)?;
    record.dataset_hash = Some(dataset_hash(&data.train));
    if data.test.dim() != data.train.dim() {
        return Err(CliError::Runtime(format!(
            "test data has {} input columns, training data has {}",
            data.test.dim(),
            data.train.dim()
        )));
    }
    let standardizer = Standardizer::fit(&data.train, "training set");
    let train = standardizer.transform(&data.train)?;
    let model = build_model(cfg, train.dim(), seeds.train)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seeds.train;
    let (trained, fit) = multi_restart_fit(&model, &train, &train_cfg)?;
    record.final_nll = Some(fit.best_loss);
    record.epochs = Some(fit.restarts[fit.best_restart].epochs);
    record.converged = Some(fit.converged);
    record.best_restart = Some(fit.best_restart);
    record.failed_restarts = Some(fit.restarts.iter().filter(|r| r.error.is_some()).count());
    record.noise_variance = Some(trained.noise.variance());
    let posterior = trained.condition(&train)?;
    record.jitter = Some(posterior.jitter());
    let x_test = standardizer.apply_x(&data.test.x);
    let pred = posterior.predict(&x_test, cfg.test.interval)?;
    let prediction = standardizer.inverse_prediction(&pred);
    record.metrics = Some(evaluate(&prediction.mean, &prediction.lower, &prediction.upper, &data.test.y)?);
    Ok(PredictionTable {
        x: data.test.x,
        truth: data.test.y,
        prediction,
    })
}

fn run_repetition(cfg: &ExperimentConfig, rep: usize) -> (RunRecord, Option<PredictionTable>) {
    let seeds = RepSeeds::new(cfg, rep);
    let start = Instant::now();
    let mut record = RunRecord {
        rep,
        seed: seeds.seed,
        status: RepStatus::Ok,
        error: None,
        metrics: None,
        final_nll: None,
        epochs: None,
        wall_ms: 0,
        converged: None,
        best_restart: None,
        failed_restarts: None,
        dataset_hash: None,
        jitter: None,
        noise_variance: None,
    };
    let outcome = train_and_predict(cfg, seeds, &mut record);
    record.wall_ms = start.elapsed().as_millis();
    match outcome {
        Ok(table) => (record, Some(table)),
        Err(e) => {
            log::warn!("repetition {rep} failed: {e}");
            record.status = RepStatus::Failed;
            record.error = Some(e.to_string());
            record.metrics = None;
            (record, None)
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(format!(
                "{} is in use by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Results of all repetitions of one plain run.
#[derive(Clone, Debug)]
pub struct BatchResult {
    pub label: String,
    pub dir: PathBuf,
    pub records: Vec<RunRecord>,
    pub summary: Summary,
}

impl BatchResult {
    pub fn failed(&self) -> usize {
        self.records.iter().filter(|r| r.status == RepStatus::Failed).count()
    }
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// Runs every repetition of a plain config and writes its artifacts to `dir`.
pub fn run_batch(label: &str, cfg: &ExperimentConfig, dir: &Path) -> Result<BatchResult> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut records = Vec::with_capacity(cfg.repetitions);
    for rep in 0..cfg.repetitions {
        log::info!("{label}: repetition {}/{}", rep + 1, cfg.repetitions);
        let (record, table) = run_repetition(cfg, rep);
        if let (Some(table), true) = (&table, cfg.test.write_predictions) {
            let path = dir.join(format!("predictions_rep{rep}.csv"));
            report::write_predictions(create(&path)?, table).map_err(|e| CliError::io(&path, e))?;
        }
        records.push(record);
    }
    let path = dir.join("metrics.csv");
    report::write_metrics_csv(create(&path)?, &records).map_err(|e| CliError::io(&path, e))?;
    write_json(&dir.join("records.json"), &records)?;
    let summary = Summary::new(label, cfg, test_description(cfg), &records);
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(BatchResult {
        label: label.to_string(),
        dir: dir.to_path_buf(),
        records,
        summary,
    })
}

/// Directory name for a sweep or compare group.
pub fn group_dir_name(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Outcome of a run, sweep or compare invocation.
#[derive(Clone, Debug)]
pub struct Execution {
    pub kind: ConfigKind,
    pub dir: PathBuf,
    pub batches: Vec<BatchResult>,
}

impl Execution {
    pub fn status_line(&self) -> String {
        let groups: Vec<serde_json::Value> = self
            .batches
            .iter()
            .map(|b| {
                serde_json::json!({
                    "label": b.label,
                    "dir": b.dir.display().to_string(),
                    "repetitions": b.records.len(),
                    "failed": b.failed(),
                })
            })
            .collect();
        serde_json::json!({
            "status": "ok",
            "kind": self.kind,
            "out": self.dir.display().to_string(),
            "groups": groups,
        })
        .to_string()
    }
}

/// Validates `cfg` in full, requires it to be of kind `expected`, then runs
/// it under a lock on the output directory.
pub fn execute(cfg: &ExperimentConfig, expected: ConfigKind) -> Result<Execution> {
    let (kind, runs) = cfg.plan()?;
    if kind != expected {
        let verb = |k: ConfigKind| match k {
            ConfigKind::Run => "run",
            ConfigKind::Sweep => "sweep",
            ConfigKind::Compare => "compare",
        };
        return Err(CliError::validation(format!(
            "this config describes a {} and must be started with `{}`, not `{}`",
            verb(kind),
            verb(kind),
            verb(expected)
        )));
    }
    let dir = cfg.output_dir_or(&group_dir_name(&cfg.label()));
    let _lock = OutputLock::acquire(&dir)?;
    let mut batches = Vec::with_capacity(runs.len());
    for (label, run) in &runs {
        let sub = match kind {
            ConfigKind::Run => dir.clone(),
            _ => dir.join(group_dir_name(label)),
        };
        batches.push(run_batch(label, run, &sub)?);
    }
    match kind {
        ConfigKind::Run => {}
        ConfigKind::Sweep => {
            let path = dir.join("sweep.csv");
            report::write_sweep_csv(create(&path)?, &cfg.sweep.as_ref().expect("sweep").axis, &batches)
                .map_err(|e| CliError::io(&path, e))?;
        }
        ConfigKind::Compare => {
            let path = dir.join("compare.csv");
            report::write_compare_csv(create(&path)?, &batches).map_err(|e| CliError::io(&path, e))?;
        }
    }
    if kind != ConfigKind::Run {
        let summaries: Vec<&Summary> = batches.iter().map(|b| &b.summary).collect();
        write_json(&dir.join("summary.json"), &summaries)?;
    }
    let total: usize = batches.iter().map(|b| b.records.len()).sum();
    let failed: usize = batches.iter().map(|b| b.failed()).sum();
    if total > 0 && failed == total {
        let first = batches
            .iter()
            .flat_map(|b| b.records.iter())
            .find_map(|r| r.error.clone())
            .unwrap_or_default();
        return Err(CliError::Runtime(format!(
            "all {total} repetitions failed; first error: {first}"
        )));
    }
    Ok(Execution { kind, dir, batches })
}

/// Gradient check of one planned run at a freshly initialized model.
#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub label: String,
    pub family: String,
    pub n_params: usize,
    pub n_train: usize,
    pub nll: f64,
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub pass: bool,
}

/// Compares the analytic NLL gradient against central differences for
/// every planned run, using repetition 0's data and initialization.
pub fn gradcheck(cfg: &ExperimentConfig) -> Result<Vec<GradcheckReport>> {
    let (_, runs) = cfg.plan()?;
    let mut reports = Vec::with_capacity(runs.len());
    for (label, run) in runs {
        let seeds = RepSeeds::new(&run, 0);
        let data = load_data(&run, seeds)?;
        let train = Standardizer::fit(&data.train, "training set").transform(&data.train)?;
        let mut model = build_model(&run, train.dim(), seeds.train)?;
        model.reinitialize(&mut ChaCha8Rng::seed_from_u64(seeds.train));
        let params = model.params();
        let (nll, grad) = model.nll_and_gradient(&train)?;
        let loss = |theta: &[f64]| {
            let mut m = model.clone();
            m.set_params(theta)?;
            m.nll(&train)
        };
        let indices: Vec<usize> = (0..params.len()).collect();
        let fd = fd_check(loss, &params, &grad, FD_STEP, &indices)?;
        let names = model.param_layout();
        let worst_param = fd
            .worst_index
            .map(|i| format!("{}[{i}]", names.group_of(i).unwrap_or("?")));
        reports.push(GradcheckReport {
            label,
            family: run.kernel.as_ref().map(|k| k.family.clone()).unwrap_or_default(),
            n_params: params.len(),
            n_train: train.len(),
            nll,
            max_rel_error: fd.max_rel_error,
            worst_param,
            pass: fd.max_rel_error <= GRADCHECK_TOLERANCE,
        });
    }
    Ok(reports)
}

/// Summary printed by the `validate` verb.
pub fn describe(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let (kind, runs) = cfg.plan()?;
    let mut groups = Vec::with_capacity(runs.len());
    for (label, run) in &runs {
        let dim = run.input_dim()?;
        let model = build_model(run, dim, 0)?;
        groups.push(serde_json::json!({
            "label": label,
            "family": run.kernel.as_ref().map(|k| k.family.as_str()),
            "input_dim": dim,
            "n_params": model.n_params(),
            "n_train": run.benchmark.n_train,
            "repetitions": run.repetitions,
            "restarts": run.train.restarts,
            "test_set": test_description(run),
        }));
    }
    Ok(serde_json::json!({
        "status": "ok",
        "kind": kind,
        "out": cfg.output_dir_or(&group_dir_name(&cfg.label())).display().to_string(),
        "groups": groups,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::from_toml_str(
            r#"
            repetitions = 2
            seed = 3
            [benchmark]
            name = "analytic1"
            n_train = 12
            noise_variance = 1e-4
            [kernel]
            family = "gaussian"
            [train]
            restarts = 2
            max_epochs = 60
            [test]
            points = 50
            "#,
        )
        .unwrap()
    }

    #[test]
    fn seeds_follow_the_documented_scheme() {
        let mut cfg = tiny();
        cfg.benchmark.seed = 10;
        cfg.train.seed = 7;
        let s = RepSeeds::new(&cfg, 1);
        assert_eq!(s.seed, 4);
        assert_eq!(s.data, 14);
        assert_eq!(s.train, 7 + 4 * RESTART_SEED_STRIDE);
    }

    #[test]
    fn repetitions_differ_but_reruns_match() {
        let cfg = tiny();
        let a = load_data(&cfg, RepSeeds::new(&cfg, 0)).unwrap();
        let b = load_data(&cfg, RepSeeds::new(&cfg, 1)).unwrap();
        let a2 = load_data(&cfg, RepSeeds::new(&cfg, 0)).unwrap();
        assert_ne!(dataset_hash(&a.train), dataset_hash(&b.train));
        assert_eq!(dataset_hash(&a.train), dataset_hash(&a2.train));
        assert_eq!(a.test.len(), 50);
    }

    #[test]
    fn a_failing_repetition_is_recorded() {
        let mut cfg = tiny();
        cfg.benchmark.name = BenchmarkName::Csv;
        let (record, table) = run_repetition(&cfg, 0);
        assert!(table.is_none());
        assert_eq!(record.status, RepStatus::Failed);
        assert!(record.error.is_some());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        assert!(matches!(OutputLock::acquire(dir.path()), Err(CliError::Locked(_))));
        drop(lock);
        OutputLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn csv_subsample_is_deterministic() {
        let x = DMatrix::from_fn(20, 1, |i, _| i as f64);
        let data = Dataset::new(x, (0..20).map(|i| i as f64).collect()).unwrap();
        let a = csv_subsample(data.clone(), 8, 1).unwrap();
        let b = csv_subsample(data.clone(), 8, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        assert!(csv_subsample(data, 21, 1).is_err());
    }
}
