//! Stationary base kernels, the kernel algebra, and validity checks.
//!
//! Every base kernel except the periodic one is a profile of the squared
//! scaled distance `r = sum_p 10^omega_p (x_p - x'_p)^2`. Working with `r`
//! rather than `d = sqrt(r)` keeps the Gaussian smooth at the origin and
//! gives those kinds a single derivative entry point for backpropagation.
//!
//! The periodic kernel sums `sin^2` per coordinate,
//! `exp(-2 sum_p sin^2(pi sqrt(10^omega_p) |x_p - x'_p| / period))`. In one
//! dimension this is `exp(-2 sin^2(pi d / period))`; applying `sin^2` to the
//! full distance instead is not positive semidefinite for `P > 1`.

mod expr;
mod validity;

pub use expr::{Coefficient, FeatureFn, FeatureMap, KernelExpr};
pub use validity::{gram, validate_kernel, validate_kernel_with, GramMatrix, ValidityReport};

use std::f64::consts::{LN_10, PI};

use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::neural::{sigmoid, ParamLayout};

/// Range for freshly drawn lengthscale exponents.
pub const OMEGA_INIT: (f64, f64) = (-2.0, 2.0);
/// Range for freshly drawn log-periods.
pub const LOG_PERIOD_INIT: (f64, f64) = (-2.0, 1.0);
/// Range for freshly drawn power-exponential logits (exponent `2 sigmoid(eta)`).
pub const EXPONENT_LOGIT_INIT: (f64, f64) = (-1.0, 3.0);

/// Half-integer smoothness values with closed-form Matérn kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaternNu {
    Half,
    ThreeHalves,
    FiveHalves,
}

/// The stationary profile of a base kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BaseKernelKind {
    Gaussian,
    Matern(MaternNu),
    /// `exp(-2 sin^2(pi d / period))`; the period is learned on a log scale.
    Periodic { period: f64 },
    /// `exp(-d^gamma)` with `gamma` in `(0, 2]`, learned through a scaled sigmoid.
    PowerExponential { gamma: f64 },
}

impl BaseKernelKind {
    pub fn periodic(period: f64) -> Result<Self> {
        let k = BaseKernelKind::Periodic { period };
        k.validate()?;
        Ok(k)
    }

    pub fn power_exponential(gamma: f64) -> Result<Self> {
        let k = BaseKernelKind::PowerExponential { gamma };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            BaseKernelKind::Periodic { period } if !(period > 0.0 && period.is_finite()) => Err(
                contract(format!("periodic kernel needs a positive period, got {period}")),
            ),
            BaseKernelKind::PowerExponential { gamma } if !(gamma > 0.0 && gamma <= 2.0) => Err(
                contract(format!("power-exponential exponent must lie in (0, 2], got {gamma}")),
            ),
            _ => Ok(()),
        }
    }

    /// Short code used in kernel-structure labels.
    pub fn code(&self) -> &'static str {
        match self {
            BaseKernelKind::Gaussian => "G",
            BaseKernelKind::Matern(_) => "M",
            BaseKernelKind::Periodic { .. } => "P",
            BaseKernelKind::PowerExponential { .. } => "PE",
        }
    }

    fn has_shape_param(&self) -> bool {
        matches!(
            self,
            BaseKernelKind::Periodic { .. } | BaseKernelKind::PowerExponential { .. }
        )
    }
}

/// Per-dimension lengthscale exponents; the inverse squared lengthscale of
/// dimension `p` is `10^omega_p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthscaleParams(Vec<f64>);

impl LengthscaleParams {
    pub fn new(omega: Vec<f64>) -> Result<Self> {
        if omega.is_empty() {
            return Err(contract("lengthscale vector must not be empty"));
        }
        if let Some(bad) = omega.iter().find(|w| !w.is_finite()) {
            return Err(contract(format!("lengthscale exponent {bad} is not finite")));
        }
        Ok(Self(omega))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_dims(x: &[f64], y: &[f64], p: usize) -> Result<()> {
    if x.len() != p || y.len() != p {
        return Err(contract(format!(
            "point dimensions {} and {} do not match lengthscale dimension {p}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

#[inline]
fn sq_distance_unchecked(x: &[f64], y: &[f64], omega: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .zip(omega)
        .map(|((a, b), w)| {
            let diff = a - b;
            10f64.powf(*w) * diff * diff
        })
        .sum()
}

/// `sqrt(sum_p 10^omega_p (x_p - x'_p)^2)`.
pub fn scaled_distance(x: &[f64], x_prime: &[f64], omega: &LengthscaleParams) -> Result<f64> {
    check_dims(x, x_prime, omega.len())?;
    Ok(sq_distance_unchecked(x, x_prime, omega.as_slice()).sqrt())
}

pub fn eval_base(
    kind: BaseKernelKind,
    omega: &LengthscaleParams,
    x: &[f64],
    x_prime: &[f64],
) -> Result<f64> {
    kind.validate()?;
    check_dims(x, x_prime, omega.len())?;
    Ok(value_unchecked(kind, x, x_prime, omega.as_slice()))
}

/// Per-coordinate factors of [`value_with_factors`]: `10^omega_p` for the
/// radial kinds, the angular frequency `pi sqrt(10^omega_p) / period` for the
/// periodic kind.
fn coordinate_factors(kind: BaseKernelKind, omega: &[f64]) -> Vec<f64> {
    match kind {
        BaseKernelKind::Periodic { period } => omega.iter().map(|w| PI * 10f64.powf(0.5 * w) / period).collect(),
        _ => omega.iter().map(|w| 10f64.powf(*w)).collect(),
    }
}

#[inline]
fn value_with_factors(kind: BaseKernelKind, x: &[f64], y: &[f64], factors: &[f64]) -> f64 {
    match kind {
        BaseKernelKind::Periodic { .. } => {
            let s: f64 = x
                .iter()
                .zip(y)
                .zip(factors)
                .map(|((a, b), f)| (f * (a - b)).sin().powi(2))
                .sum();
            (-2.0 * s).exp()
        }
        _ => {
            let r: f64 = x
                .iter()
                .zip(y)
                .zip(factors)
                .map(|((a, b), f)| {
                    let d = a - b;
                    f * d * d
                })
                .sum();
            profile(kind, r)
        }
    }
}

fn value_unchecked(kind: BaseKernelKind, x: &[f64], y: &[f64], omega: &[f64]) -> f64 {
    value_with_factors(kind, x, y, &coordinate_factors(kind, omega))
}

/// Kernel value as a function of the squared scaled distance (all kinds
/// but the periodic one).
#[inline]
pub(crate) fn profile(kind: BaseKernelKind, r: f64) -> f64 {
    match kind {
        BaseKernelKind::Gaussian => (-r).exp(),
        BaseKernelKind::Matern(nu) => {
            let d = r.sqrt();
            match nu {
                MaternNu::Half => (-d).exp(),
                MaternNu::ThreeHalves => {
                    let s = 3f64.sqrt() * d;
                    (1.0 + s) * (-s).exp()
                }
                MaternNu::FiveHalves => {
                    let s = 5f64.sqrt() * d;
                    (1.0 + s + 5.0 * r / 3.0) * (-s).exp()
                }
            }
        }
        BaseKernelKind::PowerExponential { gamma } => (-r.powf(0.5 * gamma)).exp(),
        BaseKernelKind::Periodic { .. } => unreachable!("periodic kernels are not radial profiles"),
    }
}

/// `d profile / d r`. At `r == 0` this returns 0: every caller multiplies it
/// by a factor that vanishes there (a coordinate difference), and for the
/// rough kinds the true derivative is unbounded at the origin.
#[inline]
fn profile_dr(kind: BaseKernelKind, r: f64) -> f64 {
    if r <= 0.0 {
        return match kind {
            BaseKernelKind::Gaussian => -1.0,
            _ => 0.0,
        };
    }
    let d = r.sqrt();
    match kind {
        BaseKernelKind::Gaussian => -(-r).exp(),
        BaseKernelKind::Matern(MaternNu::Half) => -(-d).exp() / (2.0 * d),
        BaseKernelKind::Matern(MaternNu::ThreeHalves) => {
            let s = 3f64.sqrt() * d;
            -1.5 * (-s).exp()
        }
        BaseKernelKind::Matern(MaternNu::FiveHalves) => {
            let s = 5f64.sqrt() * d;
            -(5.0 / 6.0) * (1.0 + s) * (-s).exp()
        }
        BaseKernelKind::PowerExponential { gamma } => {
            let c = (-r.powf(0.5 * gamma)).exp();
            -0.5 * gamma * r.powf(0.5 * gamma - 1.0) * c
        }
        BaseKernelKind::Periodic { .. } => unreachable!("periodic kernels are not radial profiles"),
    }
}

/// Derivative with respect to the kind's unconstrained shape parameter
/// (log-period or exponent logit). Zero for kinds without one.
#[inline]
fn profile_dshape(kind: BaseKernelKind, r: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    match kind {
        BaseKernelKind::PowerExponential { gamma } => {
            let rg = r.powf(0.5 * gamma);
            let c = (-rg).exp();
            let dc_dgamma = -0.5 * c * rg * r.ln();
            dc_dgamma * gamma * (1.0 - 0.5 * gamma)
        }
        _ => 0.0,
    }
}

/// A base kernel together with its lengthscales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseKernel {
    pub kind: BaseKernelKind,
    pub omega: LengthscaleParams,
}

impl BaseKernel {
    pub fn new(kind: BaseKernelKind, omega: LengthscaleParams) -> Result<Self> {
        kind.validate()?;
        Ok(Self { kind, omega })
    }

    /// A kernel of the given kind with `omega = 0` in every dimension.
    pub fn unit(kind: BaseKernelKind, dim: usize) -> Result<Self> {
        Self::new(kind, LengthscaleParams::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dims(x, y, self.dim())?;
        Ok(self.eval_unchecked(x, y))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        value_unchecked(self.kind, x, y, self.omega.as_slice())
    }

    pub fn n_params(&self) -> usize {
        self.dim() + usize::from(self.kind.has_shape_param())
    }

    pub fn layout(&self, prefix: &str) -> ParamLayout {
        let mut l = ParamLayout::new();
        l.push(format!("{prefix}omega"), self.dim());
        match self.kind {
            BaseKernelKind::Periodic { .. } => l.push(format!("{prefix}log_period"), 1),
            BaseKernelKind::PowerExponential { .. } => l.push(format!("{prefix}exponent_logit"), 1),
            _ => {}
        }
        l
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.omega.as_slice().to_vec();
        match self.kind {
            BaseKernelKind::Periodic { period } => p.push(period.ln()),
            BaseKernelKind::PowerExponential { gamma } => {
                let half = (0.5 * gamma).min(1.0 - 1e-12);
                p.push((half / (1.0 - half)).ln());
            }
            _ => {}
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(contract(format!(
                "base kernel expects {} parameters, got {}",
                self.n_params(),
                p.len()
            )));
        }
        let dim = self.dim();
        self.omega = LengthscaleParams::new(p[..dim].to_vec())?;
        match &mut self.kind {
            BaseKernelKind::Periodic { period } => *period = p[dim].exp(),
            BaseKernelKind::PowerExponential { gamma } => *gamma = 2.0 * sigmoid(p[dim]),
            _ => {}
        }
        Ok(())
    }

    pub fn reinitialize(&mut self, rng: &mut dyn RngCore) {
        let omega = (0..self.dim())
            .map(|_| rng.random_range(OMEGA_INIT.0..OMEGA_INIT.1))
            .collect();
        self.omega = LengthscaleParams(omega);
        match &mut self.kind {
            BaseKernelKind::Periodic { period } => {
                *period = rng.random_range(LOG_PERIOD_INIT.0..LOG_PERIOD_INIT.1).exp()
            }
            BaseKernelKind::PowerExponential { gamma } => {
                *gamma = 2.0 * sigmoid(rng.random_range(EXPONENT_LOGIT_INIT.0..EXPONENT_LOGIT_INIT.1))
            }
            _ => {}
        }
    }

    /// Gram matrix over one point set; the upper triangle is computed and
    /// mirrored so the result is exactly symmetric.
    pub(crate) fn gram_sym_rows(&self, rows: &[Vec<f64>]) -> DMatrix<f64> {
        let n = rows.len();
        let f = coordinate_factors(self.kind, self.omega.as_slice());
        let mut c = DMatrix::zeros(n, n);
        for i in 0..n {
            c[(i, i)] = value_with_factors(self.kind, &rows[i], &rows[i], &f);
            for j in i + 1..n {
                let v = value_with_factors(self.kind, &rows[i], &rows[j], &f);
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        c
    }

    pub(crate) fn gram_rows(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
        let f = coordinate_factors(self.kind, self.omega.as_slice());
        DMatrix::from_fn(a.len(), b.len(), |i, j| value_with_factors(self.kind, &a[i], &b[j], &f))
    }

    /// Accumulates `sum_ij adjoint_ij dC_ij/dtheta` into `grad` (length
    /// `n_params()`), where `C` is the symmetric Gram over `rows`. When
    /// `input_adjoint` is given, the gradient with respect to the points is
    /// accumulated too.
    pub(crate) fn backward_sym(
        &self,
        rows: &[Vec<f64>],
        adjoint: &DMatrix<f64>,
        grad: &mut [f64],
        mut input_adjoint: Option<&mut DMatrix<f64>>,
    ) {
        if let BaseKernelKind::Periodic { period } = self.kind {
            return self.periodic_backward_sym(period, rows, adjoint, grad, input_adjoint);
        }
        let dim = self.dim();
        let scales: Vec<f64> = self.omega.as_slice().iter().map(|w| 10f64.powf(*w)).collect();
        let shape = self.kind.has_shape_param();
        let n = rows.len();
        let mut diff = vec![0.0; dim];
        for i in 0..n {
            for j in i + 1..n {
                let weight = adjoint[(i, j)] + adjoint[(j, i)];
                if weight == 0.0 {
                    continue;
                }
                let mut r = 0.0;
                for p in 0..dim {
                    diff[p] = rows[i][p] - rows[j][p];
                    r += scales[p] * diff[p] * diff[p];
                }
                let dr = weight * profile_dr(self.kind, r);
                for p in 0..dim {
                    grad[p] += dr * LN_10 * scales[p] * diff[p] * diff[p];
                }
                if shape {
                    grad[dim] += weight * profile_dshape(self.kind, r);
                }
                if let Some(ia) = input_adjoint.as_deref_mut() {
                    for p in 0..dim {
                        let g = dr * 2.0 * scales[p] * diff[p];
                        ia[(i, p)] += g;
                        ia[(j, p)] -= g;
                    }
                }
            }
        }
    }
}

impl BaseKernel {
    fn periodic_backward_sym(
        &self,
        period: f64,
        rows: &[Vec<f64>],
        adjoint: &DMatrix<f64>,
        grad: &mut [f64],
        mut input_adjoint: Option<&mut DMatrix<f64>>,
    ) {
        let dim = self.dim();
        // u_p = pi sqrt(10^omega_p) (x_p - x'_p) / period
        let freq: Vec<f64> = self
            .omega
            .as_slice()
            .iter()
            .map(|w| PI * 10f64.powf(0.5 * w) / period)
            .collect();
        let n = rows.len();
        let mut u = vec![0.0; dim];
        for i in 0..n {
            for j in i + 1..n {
                let weight = adjoint[(i, j)] + adjoint[(j, i)];
                if weight == 0.0 {
                    continue;
                }
                let mut s = 0.0;
                for p in 0..dim {
                    u[p] = freq[p] * (rows[i][p] - rows[j][p]);
                    s += u[p].sin().powi(2);
                }
                let c = (-2.0 * s).exp();
                for p in 0..dim {
                    // dC/du_p
                    let g = -2.0 * weight * c * (2.0 * u[p]).sin();
                    grad[p] += g * 0.5 * LN_10 * u[p];
                    grad[dim] -= g * u[p];
                    if let Some(ia) = input_adjoint.as_deref_mut() {
                        ia[(i, p)] += g * freq[p];
                        ia[(j, p)] -= g * freq[p];
                    }
                }
            }
        }
    }
}

/// Rows of a point matrix as owned vectors.
pub(crate) fn rows_of(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows())
        .map(|i| x.row(i).iter().copied().collect())
        .collect()
}
