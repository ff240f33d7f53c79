//! The interface every trainable covariance function implements, and the
//! closed set of kernel families a [`GpModel`](crate::GpModel) can hold.

use nalgebra::DMatrix;
use rand::RngCore;

use crate::error::{contract, Result};
use crate::kernels::{rows_of, KernelExpr};
use crate::neural::ParamLayout;
use crate::seek::{DeepKernel, GibbsKernel, SeekKernel};

/// A covariance function with a flat vector of learnable parameters.
pub trait Covariance: Send + Sync {
    fn input_dim(&self) -> usize;

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64>;

    /// Cross-covariance between the rows of `a` and `b`.
    fn gram(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (ra, rb) = (rows_of(a), rows_of(b));
        let mut out = DMatrix::zeros(ra.len(), rb.len());
        for (i, x) in ra.iter().enumerate() {
            for (j, y) in rb.iter().enumerate() {
                out[(i, j)] = self.eval(x, y)?;
            }
        }
        Ok(out)
    }

    /// Gram over one point set, exactly symmetric.
    fn gram_sym(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let rows = rows_of(x);
        let n = rows.len();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = self.eval(&rows[i], &rows[j])?;
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(out)
    }

    /// `c(x, x)` for every row.
    fn diag(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        rows_of(x).iter().map(|r| self.eval(r, r)).collect()
    }

    fn param_layout(&self) -> ParamLayout;

    fn params(&self) -> Vec<f64>;

    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    /// `sum_ij adjoint_ij dC_ij/dtheta` for the symmetric Gram `C` over `x`.
    fn gram_vjp(&self, x: &DMatrix<f64>, adjoint: &DMatrix<f64>) -> Result<Vec<f64>>;

    /// Draws fresh parameters for a new optimization restart.
    fn reinitialize(&mut self, rng: &mut dyn RngCore);
}

/// Any of the supported kernel families.
#[derive(Clone, Debug)]
pub enum Kernel {
    Expr(KernelExpr),
    Seek(SeekKernel),
    Gibbs(GibbsKernel),
    Deep(DeepKernel),
}

impl Kernel {
    pub fn family(&self) -> &'static str {
        match self {
            Kernel::Expr(_) => "expr",
            Kernel::Seek(_) => "seek",
            Kernel::Gibbs(_) => "gibbs",
            Kernel::Deep(_) => "deep",
        }
    }
}

macro_rules! dispatch {
    ($self:expr, $k:ident => $body:expr) => {
        match $self {
            Kernel::Expr($k) => $body,
            Kernel::Seek($k) => $body,
            Kernel::Gibbs($k) => $body,
            Kernel::Deep($k) => $body,
        }
    };
}

impl Covariance for Kernel {
    fn input_dim(&self) -> usize {
        dispatch!(self, k => k.input_dim())
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        dispatch!(self, k => Covariance::eval(k, x, y))
    }

    fn gram(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        dispatch!(self, k => Covariance::gram(k, a, b))
    }

    fn gram_sym(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        dispatch!(self, k => Covariance::gram_sym(k, x))
    }

    fn diag(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        dispatch!(self, k => Covariance::diag(k, x))
    }

    fn param_layout(&self) -> ParamLayout {
        dispatch!(self, k => Covariance::param_layout(k))
    }

    fn params(&self) -> Vec<f64> {
        dispatch!(self, k => Covariance::params(k))
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        dispatch!(self, k => Covariance::set_params(k, params))
    }

    fn gram_vjp(&self, x: &DMatrix<f64>, adjoint: &DMatrix<f64>) -> Result<Vec<f64>> {
        dispatch!(self, k => Covariance::gram_vjp(k, x, adjoint))
    }

    fn reinitialize(&mut self, rng: &mut dyn RngCore) {
        dispatch!(self, k => Covariance::reinitialize(k, rng))
    }
}

impl Covariance for KernelExpr {
    fn input_dim(&self) -> usize {
        KernelExpr::input_dim(self)
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.compose(x, y)
    }

    fn gram(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.gram_cross(a, b)
    }

    fn gram_sym(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        KernelExpr::gram_sym(self, x)
    }

    fn param_layout(&self) -> ParamLayout {
        self.layout()
    }

    fn params(&self) -> Vec<f64> {
        KernelExpr::params(self)
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        KernelExpr::set_params(self, params)
    }

    fn gram_vjp(&self, x: &DMatrix<f64>, adjoint: &DMatrix<f64>) -> Result<Vec<f64>> {
        KernelExpr::gram_vjp(self, x, adjoint)
    }

    fn reinitialize(&mut self, rng: &mut dyn RngCore) {
        KernelExpr::reinitialize(self, rng)
    }
}

pub(crate) fn check_square(adjoint: &DMatrix<f64>, n: usize) -> Result<()> {
    if adjoint.nrows() != n || adjoint.ncols() != n {
        return Err(contract(format!(
            "adjoint is {}x{} but the Gram is {n}x{n}",
            adjoint.nrows(),
            adjoint.ncols()
        )));
    }
    Ok(())
}
