//! Benchmark functions, Sobol designs, noisy dataset synthesis and CSV
//! ingestion.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::Dataset;

/// Highest dimension with embedded direction numbers.
pub const SOBOL_MAX_DIM: usize = 6;

const SOBOL_BITS: usize = 32;

/// `(s, a, m_1..m_s)` for dimensions 2..=6 from the new-joe-kuo-6.21201 table.
const JOE_KUO: [(u32, u32, &[u32]); SOBOL_MAX_DIM - 1] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
];

/// Direction numbers `v[d][j]`, already shifted to 32-bit fixed point.
fn direction_numbers(dim: usize) -> Vec<[u32; SOBOL_BITS]> {
    let mut out = Vec::with_capacity(dim);
    let mut first = [0u32; SOBOL_BITS];
    for (j, v) in first.iter_mut().enumerate() {
        *v = 1 << (SOBOL_BITS - 1 - j);
    }
    out.push(first);
    for &(s, a, m) in JOE_KUO.iter().take(dim.saturating_sub(1)) {
        let s = s as usize;
        let mut v = [0u32; SOBOL_BITS];
        for j in 0..SOBOL_BITS {
            v[j] = if j < s {
                m[j] << (SOBOL_BITS - 1 - j)
            } else {
                let mut x = v[j - s] ^ (v[j - s] >> s);
                for k in 1..s {
                    if (a >> (s - 1 - k)) & 1 == 1 {
                        x ^= v[j - k];
                    }
                }
                x
            };
        }
        out.push(v);
    }
    out
}

/// Unscrambled Gray-code Sobol generator.
#[derive(Clone, Debug)]
pub struct Sobol {
    v: Vec<[u32; SOBOL_BITS]>,
    state: Vec<u32>,
    index: u64,
}

impl Sobol {
    /// Positioned at index 0 (the origin).
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > SOBOL_MAX_DIM {
            return Err(Error::Config(format!(
                "Sobol dimension must be in 1..={SOBOL_MAX_DIM}, got {dim}"
            )));
        }
        Ok(Self {
            v: direction_numbers(dim),
            state: vec![0; dim],
            index: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    /// Index of the point the next call to [`Sobol::next_point`] returns.
    pub fn index(&self) -> u64 {
        self.index
    }

    /// Jumps to `index` using the Gray code of the index directly.
    pub fn seek(&mut self, index: u64) -> Result<()> {
        if index >= 1 << SOBOL_BITS {
            return Err(Error::Config(format!("Sobol index {index} exceeds 2^32")));
        }
        let gray = index ^ (index >> 1);
        for (d, v) in self.v.iter().enumerate() {
            self.state[d] = (0..SOBOL_BITS)
                .filter(|j| (gray >> j) & 1 == 1)
                .fold(0, |acc, j| acc ^ v[j]);
        }
        self.index = index;
        Ok(())
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        let point = self.state.iter().map(|s| *s as f64 / 4294967296.0).collect();
        let c = self.index.trailing_ones() as usize;
        for (s, v) in self.state.iter_mut().zip(&self.v) {
            *s ^= v[c];
        }
        self.index += 1;
        point
    }
}

/// `n` consecutive Sobol points starting at `start` (one per row).
pub fn sobol_points(dim: usize, n: usize, start: u64) -> Result<DMatrix<f64>> {
    let mut s = Sobol::new(dim)?;
    s.seek(start)?;
    let mut out = DMatrix::zeros(n, dim);
    for i in 0..n {
        let p = s.next_point();
        for (d, v) in p.into_iter().enumerate() {
            out[(i, d)] = v;
        }
    }
    Ok(out)
}

/// Where a design starts in the Sobol sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SobolDesign {
    /// Start at `1 + seed mod 1024`.
    #[default]
    SeedOffset,
    /// Always start at index 1.
    Plain,
}

impl SobolDesign {
    pub fn start_index(self, seed: u64) -> u64 {
        match self {
            SobolDesign::SeedOffset => 1 + seed % 1024,
            SobolDesign::Plain => 1,
        }
    }
}

/// First index of the Hartmann test design, far past any training design.
pub const HARTMANN_TEST_START: u64 = 1 + (1 << 20);

pub fn analytic_one(x: f64) -> f64 {
    ((5.0 * x).sin() + (10.0 * x).cos()) / 3.94 + 1.435 * (x - 0.4).powi(2) * (100.0 * x).cos() + 0.659
}

fn envelope(x: f64) -> f64 {
    if x < 0.5 {
        4.0 * x
    } else if x <= 1.5 {
        2.0
    } else {
        4.0 * (2.0 - x)
    }
}

pub fn analytic_two(x: f64) -> f64 {
    if x < 2.0 {
        envelope(x) + 0.1 * (8.0 * PI * x).sin()
    } else if x < 4.0 {
        0.5 * (x - 2.0).exp() * (2.0 * PI * x).sin()
    } else if x < 6.0 {
        (2.0 * PI * (2.0 + (x - 4.0).powi(2)) * (x - 4.0) / 2.0).sin()
    } else if x < 8.0 {
        let t = (x - 6.0).rem_euclid(0.5);
        if t < 0.25 {
            16.0 * t
        } else {
            8.0 - 16.0 * t
        }
    } else {
        (2.0 * PI * x).sin() + 0.5 * (8.0 * PI * x).sin()
    }
}

pub const HARTMANN_ALPHA: [f64; 4] = [1.0, 1.2, 3.0, 3.2];

pub const HARTMANN_A: [[f64; 6]; 4] = [
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
];

pub const HARTMANN_P: [[f64; 6]; 4] = [
    [0.1312, 0.1696, 0.5569, 0.0124, 0.8283, 0.5886],
    [0.2329, 0.4135, 0.8307, 0.3736, 0.1004, 0.9991],
    [0.2348, 0.1451, 0.3522, 0.2883, 0.3047, 0.6650],
    [0.4047, 0.8828, 0.8732, 0.5743, 0.1091, 0.0381],
];

pub fn hartmann6(x: &[f64]) -> f64 {
    -(0..4)
        .map(|i| {
            let inner: f64 = (0..6).map(|j| HARTMANN_A[i][j] * (x[j] - HARTMANN_P[i][j]).powi(2)).sum();
            HARTMANN_ALPHA[i] * (-inner).exp()
        })
        .sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkName {
    Analytic1,
    Analytic2,
    Hartmann6,
    Csv,
}

impl BenchmarkName {
    /// Input dimension of the analytic problems.
    pub fn dim(self) -> Option<usize> {
        match self {
            BenchmarkName::Analytic1 | BenchmarkName::Analytic2 => Some(1),
            BenchmarkName::Hartmann6 => Some(6),
            BenchmarkName::Csv => None,
        }
    }

    /// Upper end of the (per-coordinate) domain `[0, upper]`.
    pub fn domain_upper(self) -> Option<f64> {
        match self {
            BenchmarkName::Analytic1 | BenchmarkName::Hartmann6 => Some(1.0),
            BenchmarkName::Analytic2 => Some(10.0),
            BenchmarkName::Csv => None,
        }
    }

    /// Noiseless value at `x`, for the analytic problems.
    pub fn eval(self, x: &[f64]) -> Option<f64> {
        match self {
            BenchmarkName::Analytic1 => Some(analytic_one(x[0])),
            BenchmarkName::Analytic2 => Some(analytic_two(x[0])),
            BenchmarkName::Hartmann6 => Some(hartmann6(x)),
            BenchmarkName::Csv => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvOptions {
    pub path: String,
    pub target_column: String,
    /// All other columns when absent.
    #[serde(default)]
    pub feature_columns: Option<Vec<String>>,
    /// Held-out file with the same columns.
    #[serde(default)]
    pub test_path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub name: BenchmarkName,
    pub n_train: usize,
    #[serde(default)]
    pub noise_variance: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sobol: SobolDesign,
    #[serde(default)]
    pub csv: Option<CsvOptions>,
}

impl BenchmarkSpec {
    pub fn analytic(name: BenchmarkName, n_train: usize, noise_variance: f64, seed: u64) -> Self {
        Self {
            name,
            n_train,
            noise_variance,
            seed,
            sobol: SobolDesign::default(),
            csv: None,
        }
    }

    /// The 50-point illustrative setup.
    pub fn analytic1_illustrative(seed: u64) -> Self {
        Self::analytic(BenchmarkName::Analytic1, 50, 1e-4, seed)
    }

    /// The 55-point comparative setup.
    pub fn analytic1_comparative(seed: u64) -> Self {
        Self::analytic(BenchmarkName::Analytic1, 55, 1e-4, seed)
    }

    pub fn analytic2_default(seed: u64) -> Self {
        Self::analytic(BenchmarkName::Analytic2, 140, 1e-4, seed)
    }

    pub fn hartmann6_default(seed: u64) -> Self {
        Self::analytic(BenchmarkName::Hartmann6, 800, 1e-4, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::Config(format!(
                "noise_variance must be non-negative, got {}",
                self.noise_variance
            )));
        }
        match (self.name, &self.csv) {
            (BenchmarkName::Csv, None) => Err(Error::Config("the csv benchmark needs a [csv] table".into())),
            (BenchmarkName::Csv, Some(c)) if c.test_path.is_none() => {
                Err(Error::Config("the csv benchmark needs csv.test_path".into()))
            }
            (BenchmarkName::Csv, Some(_)) => Ok(()),
            (_, Some(_)) => Err(Error::Config("csv options given for an analytic benchmark".into())),
            (_, None) => Ok(()),
        }
    }
}

fn evaluate_rows(name: BenchmarkName, x: &DMatrix<f64>) -> Vec<f64> {
    (0..x.nrows())
        .map(|i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            name.eval(&row).expect("analytic benchmark")
        })
        .collect()
}

/// Sobol design scaled to the domain with `f(X) + noise`.
pub fn synthesize_dataset(spec: &BenchmarkSpec) -> Result<Dataset> {
    spec.validate()?;
    let (Some(dim), Some(upper)) = (spec.name.dim(), spec.name.domain_upper()) else {
        return Err(Error::Config("csv data is loaded, not synthesized".into()));
    };
    let x = sobol_points(dim, spec.n_train, spec.sobol.start_index(spec.seed))? * upper;
    let mut y = evaluate_rows(spec.name, &x);
    if spec.noise_variance > 0.0 {
        let sd = spec.noise_variance.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for v in &mut y {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += sd * e;
        }
    }
    Dataset::new(x, y)
}

/// Number of points in the 1D test grids.
pub const GRID_POINTS: usize = 1000;

/// Number of Sobol points in the Hartmann test set.
pub const HARTMANN_TEST_POINTS: usize = 4096;

/// Noiseless test set: a uniform grid over the domain in 1D, Sobol points
/// from [`HARTMANN_TEST_START`] in 6D.
pub fn test_set(name: BenchmarkName) -> Result<Dataset> {
    test_set_sized(name, default_test_points(name))
}

/// Default size of [`test_set`]; zero for csv benchmarks.
pub fn default_test_points(name: BenchmarkName) -> usize {
    match name {
        BenchmarkName::Analytic1 | BenchmarkName::Analytic2 => GRID_POINTS,
        BenchmarkName::Hartmann6 => HARTMANN_TEST_POINTS,
        BenchmarkName::Csv => 0,
    }
}

/// [`test_set`] with `n` points instead of the default count. The grid
/// includes both endpoints, so it needs `n >= 2`.
pub fn test_set_sized(name: BenchmarkName, n: usize) -> Result<Dataset> {
    let x = match name {
        BenchmarkName::Analytic1 | BenchmarkName::Analytic2 => {
            if n < 2 {
                return Err(Error::Config(format!("a test grid needs at least 2 points, got {n}")));
            }
            let upper = name.domain_upper().unwrap_or(1.0);
            DMatrix::from_fn(n, 1, |i, _| upper * i as f64 / (n - 1) as f64)
        }
        BenchmarkName::Hartmann6 => {
            if n == 0 {
                return Err(Error::Config("the test set needs at least one point".into()));
            }
            sobol_points(6, n, HARTMANN_TEST_START)?
        }
        BenchmarkName::Csv => return Err(Error::Config("csv test sets come from csv.test_path".into())),
    };
    let y = evaluate_rows(name, &x);
    Dataset::new(x, y)
}

/// Human-readable description of [`test_set_sized`], recorded in summaries.
pub fn test_set_description(name: BenchmarkName, n: usize) -> String {
    match name {
        BenchmarkName::Analytic1 => format!("{n}-point uniform grid on [0, 1]"),
        BenchmarkName::Analytic2 => format!("{n}-point uniform grid on [0, 10]"),
        BenchmarkName::Hartmann6 => format!("{n} Sobol points starting at index {HARTMANN_TEST_START}"),
        BenchmarkName::Csv => "held-out csv file".into(),
    }
}

fn ingest(path: &Path, message: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Reads a headered numeric CSV. Data rows are numbered from 1 (the header
/// is not counted) in error messages.
pub fn load_csv_dataset(path: impl AsRef<Path>, target_column: &str, feature_columns: Option<&[String]>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ingest(path, e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| ingest(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ingest(path, format!("column '{name}' not found (columns: {})", headers.join(", "))))
    };
    let target = find(target_column)?;
    let features: Vec<usize> = match feature_columns {
        Some(cols) => cols.iter().map(|c| find(c)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|c| *c != target).collect(),
    };
    if features.is_empty() {
        return Err(ingest(path, "no feature columns"));
    }
    let mut xs = Vec::new();
    let mut y = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| ingest(path, format!("row {row}: {e}")))?;
        let cell = |c: usize| -> Result<f64> {
            let raw = record
                .get(c)
                .ok_or_else(|| ingest(path, format!("row {row}: missing column '{}'", headers[c])))?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| ingest(path, format!("row {row}, column '{}': '{raw}' is not a finite number", headers[c])))
        };
        for &c in &features {
            xs.push(cell(c)?);
        }
        y.push(cell(target)?);
    }
    if y.is_empty() {
        return Err(ingest(path, "no data rows"));
    }
    Dataset::new(DMatrix::from_row_slice(y.len(), features.len(), &xs), y)
}

/// Writes columns `x0..x{P-1}` and `target_column`.
pub fn write_csv_dataset(path: impl AsRef<Path>, data: &Dataset, target_column: &str) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| ingest(path, e.to_string()))?;
    let mut header: Vec<String> = (0..data.dim()).map(|p| format!("x{p}")).collect();
    header.push(target_column.to_string());
    w.write_record(&header).map_err(|e| ingest(path, e.to_string()))?;
    for i in 0..data.len() {
        let mut row: Vec<String> = data.x.row(i).iter().map(|v| v.to_string()).collect();
        row.push(data.y[i].to_string());
        w.write_record(&row).map_err(|e| ingest(path, e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
