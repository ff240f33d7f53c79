//! Experiment configuration: a TOML file resolved and validated in full
//! before anything is trained.
//!
//! ```toml
//! seed = 0
//! repetitions = 16
//!
//! [benchmark]
//! name = "analytic1"
//! n_train = 50
//! noise_variance = 1e-4
//!
//! [kernel]
//! family = "seek"
//! bases = ["gaussian", "periodic", "matern52"]
//! width = 4
//!
//! [train]
//! restarts = 16
//! ```
//!
//! A `[sweep]` table turns the file into a sweep over one axis and a
//! `[compare]` table into a side-by-side comparison of kernel families.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seek_gp::bench::{default_test_points, BenchmarkName, BenchmarkSpec};
use seek_gp::neural::Activation;
use seek_gp::seek::WeightNets;
use seek_gp::{
    BaseKernel, BaseKernelKind, DeepKernel, GibbsKernel, IntervalMode, Kernel, KernelExpr, MaternNu, Mlp,
    MlpSpec, SeekActivation, SeekKernel, TrainConfig,
};

use crate::error::{CliError, Result};

pub const DEFAULT_REPETITIONS: usize = 16;

/// Seeds of consecutive repetitions' restarts are spaced this far apart so
/// restart groups never overlap.
pub const RESTART_SEED_STRIDE: u64 = 100_000;

pub const KERNEL_FAMILIES: [&str; 5] = ["seek", "gaussian", "stationary", "gibbs", "deep"];
pub const BASE_TAGS: [&str; 7] = [
    "gaussian",
    "matern12",
    "matern32",
    "matern52",
    "periodic",
    "power_exponential",
    "pe",
];
pub const SEEK_PRESETS: [&str; 2] = ["comparative", "illustrative"];
pub const SWEEP_AXES: [&str; 5] = ["n_train", "structure", "activation", "net_activation", "width"];

fn default_repetitions() -> usize {
    DEFAULT_REPETITIONS
}

fn default_true() -> bool {
    true
}

/// Kernel family tag plus whatever structure that family takes. Fields that
/// do not apply to the chosen family are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub family: String,
    /// SEEK: `comparative` (default) or `illustrative`; explicit fields
    /// override the preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// SEEK: structure code `G-k`, `PE-k` or `H-k`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure: Option<String>,
    /// SEEK: explicit base kernel tags.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bases: Option<Vec<String>>,
    /// Stationary and deep kernels: the base kernel tag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<String>,
    /// Shorthand for two hidden layers of this width in every network.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_hidden: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_outputs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_hidden: Option<Vec<usize>>,
    /// Zero drops the bias network.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_outputs: Option<usize>,
    /// SEEK: one network emits every weight vector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_weights: Option<bool>,
    /// Gibbs and deep kernels: hidden widths of the single network.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    /// Deep kernel: feature dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<usize>,
    /// Hidden-layer nonlinearity: softplus, tanh or identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub net_activation: Option<String>,
    /// SEEK: exp, sinh, cosh or iden.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<String>,
}

impl KernelConfig {
    pub fn family(family: &str) -> Self {
        Self {
            family: family.to_string(),
            ..Self::default()
        }
    }

    fn set_fields(&self) -> Vec<&'static str> {
        let mut f = Vec::new();
        let mut mark = |name, set: bool| {
            if set {
                f.push(name)
            }
        };
        mark("preset", self.preset.is_some());
        mark("structure", self.structure.is_some());
        mark("bases", self.bases.is_some());
        mark("base", self.base.is_some());
        mark("width", self.width.is_some());
        mark("weight_hidden", self.weight_hidden.is_some());
        mark("weight_outputs", self.weight_outputs.is_some());
        mark("bias_hidden", self.bias_hidden.is_some());
        mark("bias_outputs", self.bias_outputs.is_some());
        mark("shared_weights", self.shared_weights.is_some());
        mark("hidden", self.hidden.is_some());
        mark("features", self.features.is_some());
        mark("net_activation", self.net_activation.is_some());
        mark("activation", self.activation.is_some());
        f
    }

    fn check_fields(&self, allowed: &[&str]) -> Result<()> {
        for field in self.set_fields() {
            if !allowed.contains(&field) {
                return Err(CliError::validation(format!(
                    "kernel field `{field}` does not apply to family `{}` (it accepts: {})",
                    self.family,
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Instantiates the kernel for `dim` inputs. `seed` only fixes the
    /// starting parameters, which every restart redraws anyway.
    pub fn build(&self, dim: usize, seed: u64) -> Result<Kernel> {
        if dim == 0 {
            return Err(CliError::validation("the benchmark has no input columns"));
        }
        let kernel = match self.family.as_str() {
            "seek" => Kernel::Seek(self.build_seek(dim, seed)?),
            "gaussian" => {
                self.check_fields(&[])?;
                Kernel::Expr(KernelExpr::base(BaseKernel::unit(BaseKernelKind::Gaussian, dim)?))
            }
            "stationary" => {
                self.check_fields(&["base"])?;
                let tag = self
                    .base
                    .as_deref()
                    .ok_or_else(|| CliError::validation("family `stationary` needs `base`"))?;
                Kernel::Expr(KernelExpr::base(BaseKernel::unit(parse_base(tag)?, dim)?))
            }
            "gibbs" => {
                self.check_fields(&["width", "hidden", "net_activation"])?;
                let hidden = self.network_hidden(vec![4 * dim, 4 * dim])?;
                let spec = MlpSpec::new(dim, hidden, dim, self.net_activation()?)?;
                Kernel::Gibbs(GibbsKernel::new(Mlp::init(spec, seed))?)
            }
            "deep" => {
                self.check_fields(&["width", "hidden", "features", "base", "net_activation"])?;
                let hidden = self.network_hidden(vec![4 * dim, 4 * dim])?;
                let features = self.features.unwrap_or(dim);
                if features == 0 {
                    return Err(CliError::validation("deep kernel `features` must be positive"));
                }
                let base = parse_base(self.base.as_deref().unwrap_or("gaussian"))?;
                let spec = MlpSpec::new(dim, hidden, features, self.net_activation()?)?;
                Kernel::Deep(DeepKernel::new(Mlp::init(spec, seed), BaseKernel::unit(base, features)?)?)
            }
            other => {
                return Err(CliError::validation(format!(
                    "unknown kernel family `{other}`; valid families: {}",
                    KERNEL_FAMILIES.join(", ")
                )))
            }
        };
        Ok(kernel)
    }

    fn network_hidden(&self, default: Vec<usize>) -> Result<Vec<usize>> {
        if self.width.is_some() && self.hidden.is_some() {
            return Err(CliError::validation("give either `width` or `hidden`, not both"));
        }
        let hidden = match (self.width, &self.hidden) {
            (Some(w), _) => vec![w, w],
            (None, Some(h)) => h.clone(),
            (None, None) => default,
        };
        check_widths("hidden", &hidden)?;
        Ok(hidden)
    }

    fn net_activation(&self) -> Result<Activation> {
        match self.net_activation.as_deref() {
            None | Some("softplus") => Ok(Activation::Softplus),
            Some("tanh") => Ok(Activation::Tanh),
            Some("identity") | Some("iden") | Some("linear") => Ok(Activation::Identity),
            Some(other) => Err(CliError::validation(format!(
                "unknown network activation `{other}`; valid: softplus, tanh, identity"
            ))),
        }
    }

    fn build_seek(&self, dim: usize, seed: u64) -> Result<SeekKernel> {
        self.check_fields(&[
            "preset",
            "structure",
            "bases",
            "width",
            "weight_hidden",
            "weight_outputs",
            "bias_hidden",
            "bias_outputs",
            "shared_weights",
            "net_activation",
            "activation",
        ])?;
        let preset = self.preset.as_deref().unwrap_or("comparative");
        let (mut kinds, mut hidden, mut weight_outputs, mut bias_outputs) = match preset {
            "comparative" => (vec![BaseKernelKind::Gaussian], vec![2 * dim, 2 * dim], 1, 2),
            "illustrative" => (
                vec![
                    BaseKernelKind::Gaussian,
                    BaseKernelKind::periodic(1.0)?,
                    BaseKernelKind::Matern(MaternNu::FiveHalves),
                ],
                vec![4, 4],
                1,
                2,
            ),
            other => {
                return Err(CliError::validation(format!(
                    "unknown SEEK preset `{other}`; valid presets: {}",
                    SEEK_PRESETS.join(", ")
                )))
            }
        };
        match (&self.structure, &self.bases) {
            (Some(_), Some(_)) => return Err(CliError::validation("give either `structure` or `bases`, not both")),
            (Some(code), None) => kinds = parse_structure(code)?,
            (None, Some(tags)) => kinds = tags.iter().map(|t| parse_base(t)).collect::<Result<_>>()?,
            (None, None) => {}
        }
        if let Some(w) = self.width {
            if self.weight_hidden.is_some() || self.bias_hidden.is_some() {
                return Err(CliError::validation(
                    "`width` conflicts with `weight_hidden`/`bias_hidden`",
                ));
            }
            hidden = vec![w, w];
        }
        let weight_hidden = self.weight_hidden.clone().unwrap_or_else(|| hidden.clone());
        let bias_hidden = self.bias_hidden.clone().unwrap_or(hidden);
        check_widths("weight_hidden", &weight_hidden)?;
        check_widths("bias_hidden", &bias_hidden)?;
        if let Some(w) = self.weight_outputs {
            weight_outputs = w;
        }
        if let Some(b) = self.bias_outputs {
            bias_outputs = b;
        }
        if weight_outputs == 0 && !kinds.is_empty() {
            return Err(CliError::validation("`weight_outputs` must be positive"));
        }
        if kinds.is_empty() && bias_outputs == 0 {
            return Err(CliError::validation("a SEEK kernel needs at least one base kernel or a bias network"));
        }
        let net_activation = self.net_activation()?;
        let activation = match self.activation.as_deref() {
            None => SeekActivation::Exp,
            Some(tag) => SeekActivation::parse(tag).ok_or_else(|| {
                CliError::validation(format!("unknown SEEK activation `{tag}`; valid: exp, sinh, cosh, iden"))
            })?,
        };
        if self.shared_weights.unwrap_or(false) {
            let bases = kinds
                .iter()
                .map(|k| BaseKernel::unit(*k, dim))
                .collect::<seek_gp::Result<Vec<_>>>()?;
            let widths = vec![weight_outputs; kinds.len()];
            let spec = MlpSpec::new(dim, weight_hidden, weight_outputs * kinds.len(), net_activation)?;
            let bias = if bias_outputs > 0 {
                let spec = MlpSpec::new(dim, bias_hidden, bias_outputs, net_activation)?;
                Some(Mlp::init(spec, seed.wrapping_add(1)))
            } else {
                None
            };
            let weights = WeightNets::Shared {
                net: Mlp::init(spec, seed),
                widths,
            };
            return Ok(SeekKernel::new(bases, weights, bias, activation)?);
        }
        Ok(SeekKernel::with_networks(
            dim,
            &kinds,
            &weight_hidden,
            weight_outputs,
            &bias_hidden,
            bias_outputs,
            net_activation,
            activation,
            seed,
        )?)
    }
}

fn check_widths(name: &str, widths: &[usize]) -> Result<()> {
    if widths.contains(&0) {
        return Err(CliError::validation(format!("`{name}` widths must be positive, got {widths:?}")));
    }
    Ok(())
}

pub fn parse_base(tag: &str) -> Result<BaseKernelKind> {
    Ok(match tag.to_ascii_lowercase().as_str() {
        "gaussian" | "g" => BaseKernelKind::Gaussian,
        "matern12" => BaseKernelKind::Matern(MaternNu::Half),
        "matern32" => BaseKernelKind::Matern(MaternNu::ThreeHalves),
        "matern52" | "m" => BaseKernelKind::Matern(MaternNu::FiveHalves),
        "periodic" | "p" => BaseKernelKind::periodic(1.0)?,
        "power_exponential" | "pe" => BaseKernelKind::power_exponential(1.0)?,
        _ => {
            return Err(CliError::validation(format!(
                "unknown base kernel `{tag}`; valid: {}",
                BASE_TAGS.join(", ")
            )))
        }
    })
}

/// `G-k`: k Gaussians. `PE-k`: k power-exponential kernels. `H-k`: k bases
/// cycling through Gaussian, periodic and Matérn-5/2.
pub fn parse_structure(code: &str) -> Result<Vec<BaseKernelKind>> {
    let bad = || {
        CliError::validation(format!(
            "malformed structure code `{code}`; expected G-k, PE-k or H-k with k >= 1"
        ))
    };
    let (prefix, count) = code.split_once('-').ok_or_else(bad)?;
    let k: usize = count.parse().map_err(|_| bad())?;
    if k == 0 {
        return Err(bad());
    }
    let cycle: Vec<BaseKernelKind> = match prefix.to_ascii_uppercase().as_str() {
        "G" => vec![BaseKernelKind::Gaussian],
        "PE" => vec![BaseKernelKind::power_exponential(1.0)?],
        "H" => vec![
            BaseKernelKind::Gaussian,
            BaseKernelKind::periodic(1.0)?,
            BaseKernelKind::Matern(MaternNu::FiveHalves),
        ],
        _ => return Err(bad()),
    };
    Ok((0..k).map(|i| cycle[i % cycle.len()]).collect())
}

/// Which points the metrics are computed on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestConfig {
    /// Grid size (1D) or Sobol count (Hartmann). Defaults to 1000 and 4096.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    #[serde(default)]
    pub interval: IntervalMode,
    /// Write `predictions_rep{i}.csv` for every repetition.
    #[serde(default = "default_true")]
    pub write_predictions: bool,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            points: None,
            interval: IntervalMode::default(),
            write_predictions: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// One of n_train, structure, activation, net_activation, width.
    pub axis: String,
    pub values: Vec<toml::Value>,
}

/// One column of a comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareEntry {
    /// Defaults to the kernel family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub kernel: KernelConfig,
    /// Must equal the shared benchmark when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkSpec>,
    /// Must equal the shared repetition count when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetitions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    /// Shorthand: family tags with their default structure.
    #[serde(default)]
    pub families: Vec<String>,
    #[serde(default)]
    pub entries: Vec<CompareEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Repetition `i` uses seed `seed + i`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub benchmark: BenchmarkSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelConfig>,
    /// Fix the noise variance (standardized units) instead of learning it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_noise: Option<f64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub test: TestConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareConfig>,
}

/// What a config file asks for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfigKind {
    Run,
    Sweep,
    Compare,
}

/// Command-line overrides applied after parsing.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub repetitions: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::validation(format!("invalid config: {}", e.message())))
    }

    /// Parses a config file. Relative csv paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut String| {
            if Path::new(p.as_str()).is_relative() {
                *p = base.join(p.as_str()).display().to_string();
            }
        };
        if let Some(csv) = &mut self.benchmark.csv {
            fix(&mut csv.path);
            if let Some(t) = &mut csv.test_path {
                fix(t);
            }
        }
        if let Some(cmp) = &mut self.compare {
            for e in &mut cmp.entries {
                if let Some(csv) = e.benchmark.as_mut().and_then(|b| b.csv.as_mut()) {
                    fix(&mut csv.path);
                    if let Some(t) = &mut csv.test_path {
                        fix(t);
                    }
                }
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(r) = o.repetitions {
            self.repetitions = r;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = Some(d.clone());
        }
    }

    pub fn kind(&self) -> Result<ConfigKind> {
        match (&self.sweep, &self.compare) {
            (Some(_), Some(_)) => Err(CliError::validation("a config may have [sweep] or [compare], not both")),
            (Some(_), None) => Ok(ConfigKind::Sweep),
            (None, Some(_)) => Ok(ConfigKind::Compare),
            (None, None) => Ok(ConfigKind::Run),
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| format!("{:?}", self.benchmark.name).to_lowercase())
    }

    pub fn output_dir_or(&self, fallback: &str) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(fallback))
    }

    /// Input dimension of the benchmark, reading the csv header if needed.
    pub fn input_dim(&self) -> Result<usize> {
        if let Some(d) = self.benchmark.name.dim() {
            return Ok(d);
        }
        let csv = self
            .benchmark
            .csv
            .as_ref()
            .ok_or_else(|| CliError::validation("the csv benchmark needs a [benchmark.csv] table"))?;
        if let Some(f) = &csv.feature_columns {
            return Ok(f.len());
        }
        let mut reader = ::csv::Reader::from_path(&csv.path).map_err(|e| {
            CliError::Core(seek_gp::Error::Ingest {
                path: csv.path.clone(),
                message: e.to_string(),
            })
        })?;
        let headers = reader.headers().map_err(|e| {
            CliError::Core(seek_gp::Error::Ingest {
                path: csv.path.clone(),
                message: e.to_string(),
            })
        })?;
        if !headers.iter().any(|h| h == csv.target_column) {
            return Err(CliError::Core(seek_gp::Error::Ingest {
                path: csv.path.clone(),
                message: format!("no column named `{}`", csv.target_column),
            }));
        }
        Ok(headers.len() - 1)
    }

    pub fn test_points(&self) -> Option<usize> {
        match self.benchmark.name {
            BenchmarkName::Csv => None,
            name => Some(self.test.points.unwrap_or(default_test_points(name))),
        }
    }

    fn validate_common(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(CliError::validation("`repetitions` must be at least 1"));
        }
        self.benchmark
            .validate()
            .map_err(|e| CliError::validation(strip_prefix(e)))?;
        self.train.validate().map_err(|e| CliError::validation(strip_prefix(e)))?;
        if self.train.restarts as u64 >= RESTART_SEED_STRIDE {
            return Err(CliError::validation(format!(
                "`train.restarts` must be below {RESTART_SEED_STRIDE}"
            )));
        }
        if let Some(v) = self.fixed_noise {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CliError::validation(format!("`fixed_noise` must be non-negative, got {v}")));
            }
        }
        match (self.benchmark.name, self.test.points) {
            (BenchmarkName::Csv, Some(_)) => {
                return Err(CliError::validation("`test.points` does not apply to csv benchmarks"))
            }
            (BenchmarkName::Analytic1 | BenchmarkName::Analytic2, Some(n)) if n < 2 => {
                return Err(CliError::validation("a test grid needs at least 2 points"))
            }
            (_, Some(0)) => return Err(CliError::validation("`test.points` must be positive")),
            _ => {}
        }
        Ok(())
    }

    /// Checks everything a plain run needs, including that the kernel
    /// builds for the benchmark's dimension.
    pub fn validate_run(&self) -> Result<()> {
        self.validate_common()?;
        let kernel = self
            .kernel
            .as_ref()
            .ok_or_else(|| CliError::validation("missing [kernel] table"))?;
        kernel.build(self.input_dim()?, self.seed)?;
        Ok(())
    }

    /// Expands a config into the labelled plain runs it stands for, after
    /// validating every one of them.
    pub fn plan(&self) -> Result<(ConfigKind, Vec<(String, ExperimentConfig)>)> {
        let kind = self.kind()?;
        let mut base = self.clone();
        base.sweep = None;
        base.compare = None;
        let runs = match kind {
            ConfigKind::Run => vec![(self.label(), base)],
            ConfigKind::Sweep => expand_sweep(&base, self.sweep.as_ref().expect("sweep kind"))?,
            ConfigKind::Compare => expand_compare(&base, self.compare.as_ref().expect("compare kind"))?,
        };
        for (label, cfg) in &runs {
            cfg.validate_run()
                .map_err(|e| CliError::validation(format!("{label}: {e}")))?;
        }
        Ok((kind, runs))
    }
}

fn strip_prefix(e: seek_gp::Error) -> String {
    match e {
        seek_gp::Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn axis_int(axis: &str, v: &toml::Value) -> Result<usize> {
    v.as_integer()
        .filter(|i| *i > 0)
        .map(|i| i as usize)
        .ok_or_else(|| CliError::validation(format!("sweep axis `{axis}` needs positive integers, got {v}")))
}

fn axis_str<'a>(axis: &str, v: &'a toml::Value) -> Result<&'a str> {
    v.as_str()
        .ok_or_else(|| CliError::validation(format!("sweep axis `{axis}` needs strings, got {v}")))
}

fn expand_sweep(base: &ExperimentConfig, sweep: &SweepConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    if !SWEEP_AXES.contains(&sweep.axis.as_str()) {
        return Err(CliError::validation(format!(
            "unknown sweep axis `{}`; valid axes: {}",
            sweep.axis,
            SWEEP_AXES.join(", ")
        )));
    }
    if sweep.values.is_empty() {
        return Err(CliError::validation("sweep axis has no values"));
    }
    let axis = sweep.axis.as_str();
    let mut runs = Vec::with_capacity(sweep.values.len());
    for v in &sweep.values {
        let mut cfg = base.clone();
        let kernel = cfg.kernel.get_or_insert_with(|| KernelConfig::family("seek"));
        let tag = match axis {
            "n_train" => {
                let n = axis_int(axis, v)?;
                cfg.benchmark.n_train = n;
                format!("n_train={n}")
            }
            "structure" => {
                let code = axis_str(axis, v)?;
                kernel.structure = Some(code.to_string());
                kernel.bases = None;
                code.to_string()
            }
            "activation" => {
                let a = axis_str(axis, v)?;
                kernel.activation = Some(a.to_string());
                a.to_string()
            }
            "net_activation" => {
                let a = axis_str(axis, v)?;
                kernel.net_activation = Some(a.to_string());
                a.to_string()
            }
            "width" => {
                let w = axis_int(axis, v)?;
                kernel.width = Some(w);
                kernel.weight_hidden = None;
                kernel.bias_hidden = None;
                format!("width={w}")
            }
            _ => unreachable!("axis checked above"),
        };
        if runs.iter().any(|(t, _)| *t == tag) {
            return Err(CliError::validation(format!("sweep value `{tag}` appears twice")));
        }
        runs.push((tag, cfg));
    }
    Ok(runs)
}

fn expand_compare(base: &ExperimentConfig, cmp: &CompareConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    let mut entries: Vec<CompareEntry> = cmp
        .families
        .iter()
        .map(|f| CompareEntry {
            label: None,
            kernel: KernelConfig::family(f),
            benchmark: None,
            repetitions: None,
            train: None,
        })
        .collect();
    entries.extend(cmp.entries.iter().cloned());
    if entries.is_empty() {
        return Err(CliError::validation("[compare] lists no kernel families"));
    }
    let mut runs: Vec<(String, ExperimentConfig)> = Vec::with_capacity(entries.len());
    let mut seen = BTreeMap::new();
    for e in entries {
        if let Some(b) = &e.benchmark {
            if *b != base.benchmark {
                return Err(CliError::validation(format!(
                    "compare entry `{}` has benchmark settings that differ from the shared [benchmark]",
                    e.label.as_deref().unwrap_or(&e.kernel.family)
                )));
            }
        }
        if let Some(r) = e.repetitions {
            if r != base.repetitions {
                return Err(CliError::validation(format!(
                    "compare entry `{}` asks for {r} repetitions but the comparison uses {}",
                    e.label.as_deref().unwrap_or(&e.kernel.family),
                    base.repetitions
                )));
            }
        }
        let label = e.label.clone().unwrap_or_else(|| e.kernel.family.clone());
        if seen.insert(label.clone(), ()).is_some() {
            return Err(CliError::validation(format!("compare label `{label}` appears twice")));
        }
        let mut cfg = base.clone();
        cfg.kernel = Some(e.kernel);
        if let Some(t) = e.train {
            cfg.train = t;
        }
        runs.push((label, cfg));
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    const RUN: &str = r#"
        repetitions = 3
        [benchmark]
        name = "analytic1"
        n_train = 20
        [kernel]
        family = "seek"
    "#;

    fn parse(extra: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml_str(&format!("{RUN}\n{extra}"))
    }

    #[test]
    fn minimal_run_validates() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg.kind().unwrap(), ConfigKind::Run);
        cfg.validate_run().unwrap();
        assert_eq!(cfg.test_points(), Some(1000));
        assert_eq!(cfg.train.restarts, 80);
    }

    #[test]
    fn unknown_family_names_the_tag_and_lists_the_valid_ones() {
        let mut cfg = parse("").unwrap();
        cfg.kernel = Some(KernelConfig::family("attentive"));
        let msg = cfg.validate_run().unwrap_err().to_string();
        assert!(msg.contains("`attentive`"), "{msg}");
        for f in KERNEL_FAMILIES {
            assert!(msg.contains(f), "{msg}");
        }
    }

    #[test]
    fn fields_foreign_to_a_family_are_rejected() {
        let mut cfg = parse("").unwrap();
        cfg.kernel = Some(KernelConfig {
            activation: Some("exp".into()),
            ..KernelConfig::family("gaussian")
        });
        let err = cfg.validate_run().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("`activation`"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse("colour = 3").is_err());
    }

    #[test]
    fn structure_codes() {
        assert_eq!(parse_structure("G-4").unwrap(), vec![BaseKernelKind::Gaussian; 4]);
        let h = parse_structure("H-4").unwrap();
        assert_eq!(h[0], BaseKernelKind::Gaussian);
        assert_eq!(h[3], BaseKernelKind::Gaussian);
        assert!(matches!(h[1], BaseKernelKind::Periodic { .. }));
        assert!(matches!(h[2], BaseKernelKind::Matern(MaternNu::FiveHalves)));
        assert!(matches!(parse_structure("PE-2").unwrap()[1], BaseKernelKind::PowerExponential { .. }));
        for bad in ["G", "G-0", "X-2", "G-x", ""] {
            assert!(parse_structure(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn seek_structures_have_the_requested_bases() {
        let k = KernelConfig {
            structure: Some("G-6".into()),
            ..KernelConfig::family("seek")
        };
        match k.build(1, 0).unwrap() {
            Kernel::Seek(s) => {
                assert_eq!(s.bases().len(), 6);
                assert!(s.bias().is_some());
            }
            other => panic!("{}", other.family()),
        }
    }

    #[test]
    fn sweep_over_base_count_tags_groups() {
        let cfg = parse(
            r#"
            [sweep]
            axis = "structure"
            values = ["G-1", "G-2", "G-4", "G-6"]
            "#,
        )
        .unwrap();
        let (kind, runs) = cfg.plan().unwrap();
        assert_eq!(kind, ConfigKind::Sweep);
        let tags: Vec<&str> = runs.iter().map(|(t, _)| t.as_str()).collect();
        assert_eq!(tags, ["G-1", "G-2", "G-4", "G-6"]);
    }

    #[test]
    fn sweep_over_activations_gives_four_groups() {
        let cfg = parse(
            r#"
            [sweep]
            axis = "activation"
            values = ["exp", "sinh", "cosh", "iden"]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.plan().unwrap().1.len(), 4);
    }

    #[test]
    fn empty_or_invalid_sweeps_fail_before_running() {
        let empty = parse("[sweep]\naxis = \"structure\"\nvalues = []").unwrap();
        assert!(empty.plan().is_err());
        let bad = parse("[sweep]\naxis = \"structure\"\nvalues = [\"G-1\", \"Q-2\"]").unwrap();
        assert!(bad.plan().unwrap_err().to_string().contains("Q-2"));
        let axis = parse("[sweep]\naxis = \"colour\"\nvalues = [1]").unwrap();
        assert!(axis.plan().is_err());
    }

    #[test]
    fn compare_expands_families_and_rejects_mismatches() {
        let cfg = parse("[compare]\nfamilies = [\"seek\", \"gaussian\", \"gibbs\", \"deep\"]").unwrap();
        let (kind, runs) = cfg.plan().unwrap();
        assert_eq!(kind, ConfigKind::Compare);
        assert_eq!(runs.len(), 4);
        assert!(runs.iter().all(|(_, c)| c.benchmark == cfg.benchmark));

        let single = parse("[compare]\nfamilies = [\"gaussian\"]").unwrap();
        assert_eq!(single.plan().unwrap().1.len(), 1);

        let mismatch = parse(
            r#"
            [[compare.entries]]
            kernel = { family = "gaussian" }
            benchmark = { name = "analytic1", n_train = 21 }
            "#,
        )
        .unwrap();
        assert!(mismatch.plan().unwrap_err().to_string().contains("differ"));
        let reps = parse("[[compare.entries]]\nkernel = { family = \"deep\" }\nrepetitions = 5").unwrap();
        assert!(reps.plan().is_err());
    }

    #[test]
    fn overrides_replace_fields() {
        let mut cfg = parse("").unwrap();
        cfg.apply(&Overrides {
            seed: Some(9),
            repetitions: Some(2),
            output_dir: Some("x".into()),
        });
        assert_eq!((cfg.seed, cfg.repetitions), (9, 2));
        assert_eq!(cfg.output_dir_or("y"), PathBuf::from("x"));
    }

    #[test]
    fn csv_benchmark_needs_its_tables() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            [benchmark]
            name = "csv"
            n_train = 10
            [kernel]
            family = "gaussian"
            "#,
        )
        .unwrap();
        assert!(cfg.validate_run().is_err());
    }
}
