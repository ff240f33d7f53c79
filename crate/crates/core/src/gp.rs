//! Zero-mean GP regression: standardization, negative log marginal
//! likelihood with its gradient, and the exact posterior.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::covariance::{Covariance, Kernel};
use crate::error::{contract, numerical, Result};
use crate::neural::ParamLayout;

/// Standard deviations below this are replaced by 1.
pub const STD_EPSILON: f64 = 1e-12;

/// Two-sided 95% standard-normal quantile.
pub const Z_95: f64 = 1.96;

/// Range for drawing `log(noise variance)` on re-initialization.
pub const LOG_NOISE_INIT: (f64, f64) = (-12.0, -2.0);

/// Inputs (one point per row) and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    /// Present when the data has been standardized.
    pub standardizer: Option<Standardizer>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(contract("a dataset needs at least one row"));
        }
        if x.nrows() != y.len() {
            return Err(contract(format!(
                "{} input rows but {} targets",
                x.nrows(),
                y.len()
            )));
        }
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            return Err(contract(format!(
                "non-finite input at row {}, column {}",
                k % x.nrows(),
                k / x.nrows()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(contract(format!("non-finite target at row {i}")));
        }
        Ok(Self {
            x,
            y,
            standardizer: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| **r >= self.len()) {
            return Err(contract(format!("row {r} out of range for {} rows", self.len())));
        }
        let x = self.x.select_rows(rows);
        let y = rows.iter().map(|r| self.y[*r]).collect();
        let mut d = Self::new(x, y)?;
        d.standardizer = self.standardizer.clone();
        Ok(d)
    }
}

/// Column-wise affine standardization fitted on a training set.
///
/// Uses the population standard deviation (divide by `N`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
    pub fitted_on: String,
    /// Columns whose spread fell below [`STD_EPSILON`].
    pub warnings: Vec<String>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Standardizer {
    pub fn fit(train: &Dataset, fitted_on: impl Into<String>) -> Self {
        let mut warnings = Vec::new();
        let mut guard = |std: f64, what: String| {
            if std < STD_EPSILON {
                log::warn!("{what} has zero spread; leaving it unscaled");
                warnings.push(what);
                1.0
            } else {
                std
            }
        };
        let mut x_mean = Vec::with_capacity(train.dim());
        let mut x_std = Vec::with_capacity(train.dim());
        for p in 0..train.dim() {
            let (m, s) = mean_std(train.x.column(p).iter().copied());
            x_mean.push(m);
            x_std.push(guard(s, format!("input column {p}")));
        }
        let (y_mean, s) = mean_std(train.y.iter().copied());
        let y_std = guard(s, "target".to_string());
        Self {
            x_mean,
            x_std,
            y_mean,
            y_std,
            fitted_on: fitted_on.into(),
            warnings,
        }
    }

    pub fn apply_x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, p| (x[(i, p)] - self.x_mean[p]) / self.x_std[p])
    }

    pub fn inverse_x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, p| x[(i, p)] * self.x_std[p] + self.x_mean[p])
    }

    pub fn apply_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.y_mean) / self.y_std).collect()
    }

    pub fn inverse_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| v * self.y_std + self.y_mean).collect()
    }

    /// Standardized copy of `data` carrying this standardizer.
    pub fn transform(&self, data: &Dataset) -> Result<Dataset> {
        if data.dim() != self.x_mean.len() {
            return Err(contract(format!(
                "standardizer fitted on {} columns, data has {}",
                self.x_mean.len(),
                data.dim()
            )));
        }
        Ok(Dataset {
            x: self.apply_x(&data.x),
            y: self.apply_y(&data.y),
            standardizer: Some(self.clone()),
        })
    }

    /// Maps a prediction made in standardized units back to data units.
    pub fn inverse_prediction(&self, pred: &PosteriorPrediction) -> PosteriorPrediction {
        let s2 = self.y_std * self.y_std;
        PosteriorPrediction {
            mean: self.inverse_y(&pred.mean),
            variance: pred.variance.iter().map(|v| v * s2).collect(),
            lower: self.inverse_y(&pred.lower),
            upper: self.inverse_y(&pred.upper),
        }
    }
}

/// Observation noise variance `lambda^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Noise {
    /// Trained, stored as `log(lambda^2)`.
    Learned { log_variance: f64 },
    /// Held constant; zero is allowed.
    Fixed(f64),
}

impl Noise {
    pub fn learned(variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(contract(format!("learned noise variance must be positive, got {variance}")));
        }
        Ok(Noise::Learned {
            log_variance: variance.ln(),
        })
    }

    pub fn fixed(variance: f64) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(contract(format!("noise variance must be non-negative, got {variance}")));
        }
        Ok(Noise::Fixed(variance))
    }

    pub fn variance(&self) -> f64 {
        match self {
            Noise::Learned { log_variance } => log_variance.exp(),
            Noise::Fixed(v) => *v,
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Noise::Learned { .. } => 1,
            Noise::Fixed(_) => 0,
        }
    }
}

/// Diagonal jitter, relative to `mean(diag C)`, tried in increasing order
/// until the Cholesky factorization succeeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterPolicy {
    pub initial: f64,
    pub max: f64,
    pub growth: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            initial: 1e-8,
            max: 1e-4,
            growth: 10.0,
        }
    }
}

/// Half-width convention of the 95% interval.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMode {
    /// `mean +- 1.96 sqrt(var)`.
    #[default]
    StdDev,
    /// `mean +- 1.96 var`, the literal printed form.
    Variance,
}

/// `(lower, upper)` endpoints of the 95% interval.
pub fn predict_interval(mean: f64, variance: f64, mode: IntervalMode) -> (f64, f64) {
    let v = variance.max(0.0);
    let half = match mode {
        IntervalMode::StdDev => Z_95 * v.sqrt(),
        IntervalMode::Variance => Z_95 * v,
    };
    (mean - half, mean + half)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorPrediction {
    pub mean: Vec<f64>,
    /// Latent-function variance, clamped at zero.
    pub variance: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// A kernel plus observation noise and a jitter policy.
#[derive(Clone, Debug)]
pub struct GpModel {
    pub kernel: Kernel,
    pub noise: Noise,
    pub jitter: JitterPolicy,
}

struct Factor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
    /// `d jitter / d C_ii`, identical for every diagonal entry.
    jitter_slope: f64,
}

impl GpModel {
    pub fn new(kernel: Kernel, noise: Noise) -> Self {
        Self {
            kernel,
            noise,
            jitter: JitterPolicy::default(),
        }
    }

    pub fn with_jitter(mut self, jitter: JitterPolicy) -> Self {
        self.jitter = jitter;
        self
    }

    /// Kernel parameters followed by `log_noise` when the noise is learned.
    pub fn param_layout(&self) -> ParamLayout {
        let mut l = self.kernel.param_layout();
        if let Noise::Learned { .. } = self.noise {
            l.push("log_noise", 1);
        }
        l
    }

    pub fn n_params(&self) -> usize {
        self.param_layout().total()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.kernel.params();
        if let Noise::Learned { log_variance } = self.noise {
            p.push(log_variance);
        }
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let nk = self.kernel.param_layout().total();
        if params.len() != nk + self.noise.n_params() {
            return Err(contract(format!(
                "model expects {} parameters, got {}",
                nk + self.noise.n_params(),
                params.len()
            )));
        }
        self.kernel.set_params(&params[..nk])?;
        if let Noise::Learned { log_variance } = &mut self.noise {
            *log_variance = params[nk];
        }
        Ok(())
    }

    pub fn reinitialize(&mut self, rng: &mut dyn RngCore) {
        self.kernel.reinitialize(rng);
        if let Noise::Learned { log_variance } = &mut self.noise {
            *log_variance = rng.random_range(LOG_NOISE_INIT.0..LOG_NOISE_INIT.1);
        }
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.kernel.input_dim() {
            return Err(contract(format!(
                "data has {} input columns, kernel expects {}",
                data.dim(),
                self.kernel.input_dim()
            )));
        }
        Ok(())
    }

    /// Cholesky of `C + lambda^2 I + jitter I`, escalating the jitter on failure.
    fn factorize(&self, gram: &DMatrix<f64>) -> Result<Factor> {
        let n = gram.nrows();
        if let Some(k) = gram.iter().position(|v| !v.is_finite()) {
            return Err(numerical(format!(
                "Gram entry ({}, {}) is {}",
                k % n,
                k / n,
                gram[k]
            )));
        }
        let mean_diag = gram.diagonal().mean();
        // A sinh-activated kernel may have a non-positive diagonal mean.
        let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
        let noise = self.noise.variance();
        let mut rel = self.jitter.initial;
        loop {
            let jitter = rel * scale;
            let mut c = gram.clone();
            for i in 0..n {
                c[(i, i)] += noise + jitter;
            }
            if let Some(chol) = Cholesky::new(c) {
                let jitter_slope = if mean_diag > 0.0 { rel / n as f64 } else { 0.0 };
                return Ok(Factor { chol, jitter, jitter_slope });
            }
            if rel >= self.jitter.max * (1.0 - 1e-9) {
                let diag = gram.diagonal();
                return Err(numerical(format!(
                    "Cholesky failed with jitter up to {jitter:.3e} (noise {noise:.3e}, n = {n}, diag range [{:.3e}, {:.3e}])",
                    diag.min(),
                    diag.max()
                )));
            }
            rel *= self.jitter.growth;
        }
    }

    fn nll_from(factor: &Factor, y: &DVector<f64>) -> (f64, DVector<f64>) {
        let alpha = factor.chol.solve(y);
        let log_det: f64 = factor.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        (0.5 * log_det + 0.5 * y.dot(&alpha), alpha)
    }

    /// `0.5 log|C_lambda| + 0.5 y^T C_lambda^-1 y`.
    pub fn nll(&self, data: &Dataset) -> Result<f64> {
        self.check_data(data)?;
        let gram = self.kernel.gram_sym(&data.x)?;
        let factor = self.factorize(&gram)?;
        let (loss, _) = Self::nll_from(&factor, &DVector::from_column_slice(&data.y));
        if !loss.is_finite() {
            return Err(numerical(format!("negative log likelihood is {loss}")));
        }
        Ok(loss)
    }

    /// Loss and its gradient with respect to [`GpModel::params`].
    pub fn nll_and_gradient(&self, data: &Dataset) -> Result<(f64, Vec<f64>)> {
        self.check_data(data)?;
        let gram = self.kernel.gram_sym(&data.x)?;
        let factor = self.factorize(&gram)?;
        let y = DVector::from_column_slice(&data.y);
        let (loss, alpha) = Self::nll_from(&factor, &y);
        if !loss.is_finite() {
            return Err(numerical(format!("negative log likelihood is {loss}")));
        }
        let mut adjoint = factor.chol.inverse();
        adjoint.ger(-1.0, &alpha, &alpha, 1.0);
        adjoint *= 0.5;
        // The jitter scales with mean(diag C), so it carries gradient too.
        let through_jitter = adjoint.trace() * factor.jitter_slope;
        let noise_adjoint = adjoint.trace();
        for i in 0..adjoint.nrows() {
            adjoint[(i, i)] += through_jitter;
        }
        let mut grad = self.kernel.gram_vjp(&data.x, &adjoint)?;
        if let Noise::Learned { .. } = self.noise {
            grad.push(noise_adjoint * self.noise.variance());
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            let layout = self.param_layout();
            return Err(numerical(format!(
                "gradient entry {i} ({}) is {}",
                layout.group_of(i).unwrap_or("?"),
                grad[i]
            )));
        }
        Ok((loss, grad))
    }

    /// Factorizes the training Gram once for repeated queries.
    pub fn condition(&self, train: &Dataset) -> Result<Posterior> {
        self.check_data(train)?;
        let gram = self.kernel.gram_sym(&train.x)?;
        let factor = self.factorize(&gram)?;
        let alpha = factor.chol.solve(&DVector::from_column_slice(&train.y));
        Ok(Posterior {
            kernel: self.kernel.clone(),
            x_train: train.x.clone(),
            jitter: factor.jitter,
            chol: factor.chol,
            alpha,
        })
    }

    pub fn posterior(&self, train: &Dataset, x_star: &DMatrix<f64>, mode: IntervalMode) -> Result<PosteriorPrediction> {
        self.condition(train)?.predict(x_star, mode)
    }
}

/// A model conditioned on training data, with the factorization cached.
#[derive(Clone, Debug)]
pub struct Posterior {
    kernel: Kernel,
    x_train: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
}

impl Posterior {
    /// Absolute jitter that was added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn predict(&self, x_star: &DMatrix<f64>, mode: IntervalMode) -> Result<PosteriorPrediction> {
        if x_star.ncols() != self.x_train.ncols() {
            return Err(contract(format!(
                "query points have {} columns, training data has {}",
                x_star.ncols(),
                self.x_train.ncols()
            )));
        }
        let cross = self.kernel.gram(x_star, &self.x_train)?;
        let prior = self.kernel.diag(x_star)?;
        let mean_v = &cross * &self.alpha;
        let mut v = cross.transpose();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut v);
        let n_q = x_star.nrows();
        let mut mean = Vec::with_capacity(n_q);
        let mut variance = Vec::with_capacity(n_q);
        let mut lower = Vec::with_capacity(n_q);
        let mut upper = Vec::with_capacity(n_q);
        for q in 0..n_q {
            let var = (prior[q] - v.column(q).norm_squared()).max(0.0);
            if !(mean_v[q].is_finite() && var.is_finite()) {
                return Err(numerical(format!("posterior at query {q} is not finite")));
            }
            let (l, u) = predict_interval(mean_v[q], var, mode);
            mean.push(mean_v[q]);
            variance.push(var);
            lower.push(l);
            upper.push(u);
        }
        Ok(PosteriorPrediction {
            mean,
            variance,
            lower,
            upper,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{BaseKernel, BaseKernelKind, KernelExpr};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian(dim: usize) -> Kernel {
        Kernel::Expr(KernelExpr::base(BaseKernel::unit(BaseKernelKind::Gaussian, dim).unwrap()))
    }

    fn no_jitter() -> JitterPolicy {
        JitterPolicy {
            initial: 0.0,
            max: 0.0,
            growth: 10.0,
        }
    }

    fn column(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn standardizer_population_std() {
        let d = Dataset::new(column(&[0.0, 1.0]), vec![1.0, 3.0]).unwrap();
        let s = Standardizer::fit(&d, "train");
        assert_eq!(s.y_mean, 2.0);
        assert_eq!(s.y_std, 1.0);
        assert_eq!(s.apply_y(&d.y), vec![-1.0, 1.0]);
    }

    #[test]
    fn standardizer_constant_column_is_guarded() {
        let d = Dataset::new(column(&[0.7, 0.7, 0.7]), vec![1.0, 2.0, 4.0]).unwrap();
        let s = Standardizer::fit(&d, "train");
        let t = s.transform(&d).unwrap();
        assert!(t.x.iter().all(|v| v.abs() < 1e-15));
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn standardizer_moments_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(30, 3, |_, p| rng.random_range(-5.0..5.0) * (p + 1) as f64 + 2.0);
        let y: Vec<f64> = (0..30).map(|_| rng.random_range(10.0..20.0)).collect();
        let d = Dataset::new(x, y).unwrap();
        let s = Standardizer::fit(&d, "train");
        let t = s.transform(&d).unwrap();
        for p in 0..3 {
            let (m, sd) = mean_std(t.x.column(p).iter().copied());
            assert!(m.abs() < 1e-10 && (sd - 1.0).abs() < 1e-10);
        }
        let (m, sd) = mean_std(t.y.iter().copied());
        assert!(m.abs() < 1e-10 && (sd - 1.0).abs() < 1e-10);
        let back = s.inverse_x(&t.x);
        assert!((back - &d.x).abs().max() < 1e-12);
        let yb = s.inverse_y(&t.y);
        assert!(yb.iter().zip(&d.y).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn nll_one_point_examples() {
        let m = GpModel::new(gaussian(1), Noise::Fixed(0.0)).with_jitter(no_jitter());
        let d = Dataset::new(column(&[0.3]), vec![0.0]).unwrap();
        assert_eq!(m.nll(&d).unwrap(), 0.0);

        let m = GpModel::new(gaussian(1), Noise::Fixed(1.0)).with_jitter(no_jitter());
        let d = Dataset::new(column(&[0.3]), vec![1.0]).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.25;
        assert_relative_eq!(m.nll(&d).unwrap(), expected, epsilon = 1e-15);
        assert_relative_eq!(expected, 0.59657, epsilon = 1e-5);
    }

    #[test]
    fn duplicate_points_give_finite_loss() {
        let m = GpModel::new(gaussian(1), Noise::learned(1e-3).unwrap());
        let d = Dataset::new(column(&[0.5, 0.5]), vec![1.0, -1.0]).unwrap();
        assert!(m.nll(&d).unwrap().is_finite());
        // Without noise the jitter escalation rescues the singular Gram.
        let m = GpModel::new(gaussian(1), Noise::Fixed(0.0));
        assert!(m.nll(&d).unwrap().is_finite());
    }

    #[test]
    fn singular_gram_without_jitter_errors() {
        let m = GpModel::new(gaussian(1), Noise::Fixed(0.0)).with_jitter(no_jitter());
        let d = Dataset::new(column(&[0.5, 0.5]), vec![1.0, -1.0]).unwrap();
        assert!(matches!(m.nll(&d), Err(crate::Error::Numerical(_))));
    }

    #[test]
    fn noise_gradient_one_point() {
        // L = 0.5 ln(1 + v) + 0.5 / (1 + v); dL/dv = 0.5/(1+v) - 0.5/(1+v)^2.
        for v in [1e-12, 0.3, 2.0] {
            let m = GpModel::new(gaussian(1), Noise::learned(v).unwrap()).with_jitter(no_jitter());
            let d = Dataset::new(column(&[0.1]), vec![1.0]).unwrap();
            let (_, g) = m.nll_and_gradient(&d).unwrap();
            let dv = 0.5 / (1.0 + v) - 0.5 / (1.0 + v).powi(2);
            // Chain rule through log v.
            assert_relative_eq!(g[g.len() - 1], dv * v, epsilon = 1e-15, max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_targets_leave_only_log_det_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(8, 2, |_, _| rng.random_range(0.0..1.0));
        let m = GpModel::new(gaussian(2), Noise::learned(0.1).unwrap());
        let d = Dataset::new(x.clone(), vec![0.0; 8]).unwrap();
        let (loss, g) = m.nll_and_gradient(&d).unwrap();
        let gram = m.kernel.gram_sym(&x).unwrap() + DMatrix::identity(8, 8) * (0.1 + 1e-8 * 1.0);
        let inv = gram.clone().cholesky().unwrap().inverse();
        assert_relative_eq!(loss, 0.5 * gram.determinant().ln(), max_relative = 1e-10);
        let expected = m.kernel.gram_vjp(&x, &(inv * 0.5)).unwrap();
        for (a, b) in g.iter().zip(&expected) {
            assert_relative_eq!(*a, *b, max_relative = 1e-8, epsilon = 1e-12);
        }
    }

    #[test]
    fn interpolation_at_training_points() {
        let xs: Vec<f64> = (0..15).map(|i| i as f64 / 14.0).collect();
        let y: Vec<f64> = xs.iter().map(|x| (6.0 * x).sin()).collect();
        let d = Dataset::new(column(&xs), y.clone()).unwrap();
        let narrow = BaseKernel::new(BaseKernelKind::Gaussian, crate::LengthscaleParams::new(vec![2.0]).unwrap()).unwrap();
        let m = GpModel::new(Kernel::Expr(KernelExpr::base(narrow)), Noise::Fixed(0.0));
        let p = m.posterior(&d, &d.x, IntervalMode::StdDev).unwrap();
        for i in 0..15 {
            assert!((p.mean[i] - y[i]).abs() < 1e-4);
            assert!(p.variance[i] < 1e-6);
        }
    }

    #[test]
    fn far_query_reverts_to_prior() {
        let d = Dataset::new(column(&[0.0, 0.5, 1.0]), vec![1.0, -2.0, 0.5]).unwrap();
        let m = GpModel::new(gaussian(1), Noise::learned(0.01).unwrap());
        let p = m.posterior(&d, &column(&[100.0]), IntervalMode::StdDev).unwrap();
        assert!(p.mean[0].abs() < 1e-6);
        assert!((p.variance[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn one_point_posterior_mean() {
        let lam = 0.25;
        let d = Dataset::new(column(&[0.2]), vec![1.7]).unwrap();
        let m = GpModel::new(gaussian(1), Noise::Fixed(lam)).with_jitter(no_jitter());
        let p = m.posterior(&d, &column(&[0.9]), IntervalMode::StdDev).unwrap();
        let c = (-(0.7f64 * 0.7)).exp();
        assert_relative_eq!(p.mean[0], c / (1.0 + lam) * 1.7, max_relative = 1e-14);
    }

    #[test]
    fn interval_examples() {
        assert_eq!(predict_interval(0.4, 0.0, IntervalMode::StdDev), (0.4, 0.4));
        assert_eq!(predict_interval(0.0, 1.0, IntervalMode::StdDev), (-1.96, 1.96));
        assert_eq!(predict_interval(0.0, 4.0, IntervalMode::Variance), (-7.84, 7.84));
        let mut last = 0.0;
        for k in 0..100 {
            let (l, u) = predict_interval(1.0, k as f64 * 0.05, IntervalMode::StdDev);
            assert!(u - l >= last);
            last = u - l;
        }
    }

    #[test]
    fn dataset_rejects_bad_input() {
        assert!(Dataset::new(DMatrix::zeros(0, 1), vec![]).is_err());
        assert!(Dataset::new(column(&[0.0, 1.0]), vec![1.0]).is_err());
        assert!(Dataset::new(column(&[0.0, f64::NAN]), vec![1.0, 2.0]).is_err());
        assert!(Noise::fixed(-1.0).is_err());
        assert!(Noise::learned(0.0).is_err());
    }

    fn random_problem(seed: u64, n: usize) -> (Dataset, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(0.0..2.0));
        let y = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = DMatrix::from_fn(10, 2, |_, _| rng.random_range(-1.0..3.0));
        (Dataset::new(x, y).unwrap(), q)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn variance_never_exceeds_prior(seed in 0u64..10_000, n in 1usize..12) {
            let (d, q) = random_problem(seed, n);
            let m = GpModel::new(gaussian(2), Noise::learned(1e-3).unwrap());
            let p = m.posterior(&d, &q, IntervalMode::StdDev).unwrap();
            for v in &p.variance {
                prop_assert!(*v <= 1.0 + 1e-10 && *v >= 0.0);
            }
            for i in 0..q.nrows() {
                prop_assert!(p.lower[i] <= p.mean[i] && p.mean[i] <= p.upper[i]);
            }
        }

        #[test]
        fn nll_invariant_to_row_order(seed in 0u64..10_000, n in 2usize..12) {
            let (d, _) = random_problem(seed, n);
            let m = GpModel::new(gaussian(2), Noise::learned(1e-2).unwrap());
            let mut order: Vec<usize> = (0..n).collect();
            order.reverse();
            order.rotate_left(seed as usize % n);
            let a = m.nll(&d).unwrap();
            let b = m.nll(&d.select(&order).unwrap()).unwrap();
            prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0));
        }

        #[test]
        fn more_noise_never_lowers_variance(seed in 0u64..10_000, n in 1usize..12, v in 1e-6f64..0.5, extra in 1e-6f64..1.0) {
            let (d, q) = random_problem(seed, n);
            let a = GpModel::new(gaussian(2), Noise::Fixed(v)).posterior(&d, &q, IntervalMode::StdDev).unwrap();
            let b = GpModel::new(gaussian(2), Noise::Fixed(v + extra)).posterior(&d, &q, IntervalMode::StdDev).unwrap();
            for (va, vb) in a.variance.iter().zip(&b.variance) {
                prop_assert!(vb + 1e-10 >= *va);
            }
        }
    }
}
