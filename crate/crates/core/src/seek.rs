//! The SEEK kernel and the two neural nonstationary baselines.
//!
//! SEEK evaluates
//!
//! ```text
//! z(x, x') = sum_m w_m(x)^T w_m(x') c_m(x, x') + b(x)^T b(x')
//! c(x, x') = phi(z(x, x'))
//! ```
//!
//! where `w_m` and `b` are small networks and `phi` is one of `exp`, `sinh`,
//! `cosh` (power series with non-negative coefficients, hence PSD-preserving)
//! or the identity.

use nalgebra::DMatrix;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::covariance::{check_square, Covariance};
use crate::error::{contract, numerical, Result};
use crate::kernels::{rows_of, BaseKernel, BaseKernelKind, MaternNu};
use crate::neural::{sigmoid, softplus, Activation, Mlp, MlpSpec, MlpTrace, ParamLayout};

/// Pre-activations are clamped to `[-Z_CLAMP, Z_CLAMP]` before the
/// exponential-type activations.
pub const Z_CLAMP: f64 = 30.0;

/// Lower bound added to softplus-transformed Gibbs lengthscales.
pub const GIBBS_LENGTHSCALE_FLOOR: f64 = 1e-3;

/// The outer activation `phi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeekActivation {
    Exp,
    Sinh,
    Cosh,
    #[serde(alias = "identity")]
    Iden,
}

impl SeekActivation {
    pub const ALL: [SeekActivation; 4] = [
        SeekActivation::Exp,
        SeekActivation::Sinh,
        SeekActivation::Cosh,
        SeekActivation::Iden,
    ];

    pub fn code(self) -> &'static str {
        match self {
            SeekActivation::Exp => "exp",
            SeekActivation::Sinh => "sinh",
            SeekActivation::Cosh => "cosh",
            SeekActivation::Iden => "iden",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exp" => Some(SeekActivation::Exp),
            "sinh" => Some(SeekActivation::Sinh),
            "cosh" => Some(SeekActivation::Cosh),
            "iden" | "identity" => Some(SeekActivation::Iden),
            _ => None,
        }
    }

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        let zc = z.clamp(-Z_CLAMP, Z_CLAMP);
        match self {
            SeekActivation::Exp => zc.exp(),
            SeekActivation::Sinh => zc.sinh(),
            SeekActivation::Cosh => zc.cosh(),
            SeekActivation::Iden => z,
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        if self != SeekActivation::Iden && z.abs() > Z_CLAMP {
            return 0.0;
        }
        match self {
            SeekActivation::Exp => z.exp(),
            SeekActivation::Sinh => z.cosh(),
            SeekActivation::Cosh => z.sinh(),
            SeekActivation::Iden => 1.0,
        }
    }
}

/// How the weight functions `w_m` are realized.
#[derive(Clone, Debug)]
pub enum WeightNets {
    /// One network per base kernel.
    PerKernel(Vec<Mlp>),
    /// One network whose output is split into consecutive blocks, one per
    /// base kernel, of the given widths.
    Shared { net: Mlp, widths: Vec<usize> },
}

impl WeightNets {
    fn nets(&self) -> Vec<&Mlp> {
        match self {
            WeightNets::PerKernel(v) => v.iter().collect(),
            WeightNets::Shared { net, .. } => vec![net],
        }
    }

    fn nets_mut(&mut self) -> Vec<&mut Mlp> {
        match self {
            WeightNets::PerKernel(v) => v.iter_mut().collect(),
            WeightNets::Shared { net, .. } => vec![net],
        }
    }
}

/// Learnable, activation-wrapped, input-weighted composition of base kernels.
#[derive(Clone, Debug)]
pub struct SeekKernel {
    bases: Vec<BaseKernel>,
    weights: WeightNets,
    bias: Option<Mlp>,
    activation: SeekActivation,
}

struct SeekForward {
    rows: Vec<Vec<f64>>,
    base_grams: Vec<DMatrix<f64>>,
    weight_traces: Vec<MlpTrace>,
    weight_outputs: Vec<DMatrix<f64>>,
    bias_trace: Option<MlpTrace>,
    z: DMatrix<f64>,
}

impl SeekKernel {
    pub fn new(
        bases: Vec<BaseKernel>,
        weights: WeightNets,
        bias: Option<Mlp>,
        activation: SeekActivation,
    ) -> Result<Self> {
        let dim = match (bases.first(), &bias) {
            (Some(b), _) => b.dim(),
            (None, Some(net)) => net.input_dim(),
            (None, None) => {
                return Err(contract(
                    "a kernel without base kernels needs a bias network with at least one output",
                ))
            }
        };
        if let Some(b) = bases.iter().find(|b| b.dim() != dim) {
            return Err(contract(format!(
                "base kernels disagree on input dimension ({} vs {dim})",
                b.dim()
            )));
        }
        match &weights {
            WeightNets::PerKernel(nets) => {
                if nets.len() != bases.len() {
                    return Err(contract(format!(
                        "{} weight networks for {} base kernels",
                        nets.len(),
                        bases.len()
                    )));
                }
            }
            WeightNets::Shared { net, widths } => {
                if widths.len() != bases.len() || widths.contains(&0) {
                    return Err(contract(
                        "shared weight network needs one positive output width per base kernel",
                    ));
                }
                if widths.iter().sum::<usize>() != net.output_dim() {
                    return Err(contract(format!(
                        "shared weight network has {} outputs but the widths sum to {}",
                        net.output_dim(),
                        widths.iter().sum::<usize>()
                    )));
                }
            }
        }
        for net in weights.nets().into_iter().chain(bias.as_ref()) {
            if net.input_dim() != dim {
                return Err(contract(format!(
                    "network input dimension {} does not match the kernel dimension {dim}",
                    net.input_dim()
                )));
            }
        }
        Ok(Self {
            bases,
            weights,
            bias,
            activation,
        })
    }

    /// One network per base kernel, each with the same architecture.
    #[allow(clippy::too_many_arguments)]
    pub fn with_networks(
        dim: usize,
        kinds: &[BaseKernelKind],
        weight_hidden: &[usize],
        weight_outputs: usize,
        bias_hidden: &[usize],
        bias_outputs: usize,
        net_activation: Activation,
        activation: SeekActivation,
        seed: u64,
    ) -> Result<Self> {
        let bases = kinds
            .iter()
            .map(|k| BaseKernel::unit(*k, dim))
            .collect::<Result<Vec<_>>>()?;
        let weight_spec = MlpSpec::new(dim, weight_hidden.to_vec(), weight_outputs, net_activation)?;
        let nets = (0..kinds.len())
            .map(|m| Mlp::init(weight_spec.clone(), seed.wrapping_add(m as u64)))
            .collect();
        let bias = if bias_outputs > 0 {
            let spec = MlpSpec::new(dim, bias_hidden.to_vec(), bias_outputs, net_activation)?;
            Some(Mlp::init(spec, seed.wrapping_add(kinds.len() as u64)))
        } else {
            None
        };
        Self::new(bases, WeightNets::PerKernel(nets), bias, activation)
    }

    /// The one-dimensional illustrative configuration: Gaussian, periodic and
    /// Matérn-5/2 bases, one `(4, 4) -> 1` weight network per base, a
    /// `(4, 4) -> 2` bias network, softplus hidden layers and `phi = exp`.
    pub fn illustrative_default(dim: usize, seed: u64) -> Result<Self> {
        Self::with_networks(
            dim,
            &[
                BaseKernelKind::Gaussian,
                BaseKernelKind::periodic(1.0)?,
                BaseKernelKind::Matern(MaternNu::FiveHalves),
            ],
            &[4, 4],
            1,
            &[4, 4],
            2,
            Activation::Softplus,
            SeekActivation::Exp,
            seed,
        )
    }

    /// The comparative-study configuration: one Gaussian base, weight
    /// network `(2P, 2P) -> 1`, bias network `(2P, 2P) -> 2`, softplus
    /// hidden layers and `phi = exp`.
    pub fn comparative_default(dim: usize, seed: u64) -> Result<Self> {
        Self::with_networks(
            dim,
            &[BaseKernelKind::Gaussian],
            &[2 * dim, 2 * dim],
            1,
            &[2 * dim, 2 * dim],
            2,
            Activation::Softplus,
            SeekActivation::Exp,
            seed,
        )
    }

    pub fn bases(&self) -> &[BaseKernel] {
        &self.bases
    }

    pub fn weights(&self) -> &WeightNets {
        &self.weights
    }

    pub fn bias(&self) -> Option<&Mlp> {
        self.bias.as_ref()
    }

    pub fn activation(&self) -> SeekActivation {
        self.activation
    }

    pub fn dim(&self) -> usize {
        self.bases
            .first()
            .map(|b| b.dim())
            .or_else(|| self.bias.as_ref().map(|n| n.input_dim()))
            .unwrap_or(0)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(contract(format!(
                "point has dimension {}, kernel expects {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Weight vectors `w_m(x)` for every base kernel.
    fn weight_values(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        match &self.weights {
            WeightNets::PerKernel(nets) => nets.iter().map(|n| n.forward(x)).collect(),
            WeightNets::Shared { net, widths } => {
                let out = net.forward(x)?;
                let mut start = 0;
                Ok(widths
                    .iter()
                    .map(|w| {
                        let block = out[start..start + w].to_vec();
                        start += w;
                        block
                    })
                    .collect())
            }
        }
    }

    /// The pre-activation `z(x, x')`.
    pub fn preactivation(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        self.check_point(y)?;
        let wx = self.weight_values(x)?;
        let wy = self.weight_values(y)?;
        let mut z = 0.0;
        for ((base, a), b) in self.bases.iter().zip(&wx).zip(&wy) {
            z += dot(a, b) * base.eval_unchecked(x, y);
        }
        if let Some(net) = &self.bias {
            z += dot(&net.forward(x)?, &net.forward(y)?);
        }
        if !z.is_finite() {
            return Err(numerical(format!(
                "pre-activation is {z} at the pair ({x:?}, {y:?})"
            )));
        }
        Ok(z)
    }

    pub fn seek_eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let c = self.activation.apply(self.preactivation(x, y)?);
        if !c.is_finite() {
            return Err(numerical(format!("kernel value is {c} at the pair ({x:?}, {y:?})")));
        }
        Ok(c)
    }

    fn weight_batch(&self, x: &DMatrix<f64>) -> Result<(Vec<MlpTrace>, Vec<DMatrix<f64>>)> {
        match &self.weights {
            WeightNets::PerKernel(nets) => {
                let traces = nets.iter().map(|n| n.forward_batch(x)).collect::<Result<Vec<_>>>()?;
                let outs = traces.iter().map(|t| t.output.clone()).collect();
                Ok((traces, outs))
            }
            WeightNets::Shared { net, widths } => {
                let trace = net.forward_batch(x)?;
                let mut start = 0;
                let outs = widths
                    .iter()
                    .map(|w| {
                        let block = trace.output.columns(start, *w).into_owned();
                        start += w;
                        block
                    })
                    .collect();
                Ok((vec![trace], outs))
            }
        }
    }

    fn forward_sym(&self, x: &DMatrix<f64>) -> Result<SeekForward> {
        if x.ncols() != self.dim() {
            return Err(contract(format!(
                "points have dimension {}, kernel expects {}",
                x.ncols(),
                self.dim()
            )));
        }
        let rows = rows_of(x);
        let n = rows.len();
        let (weight_traces, weight_outputs) = self.weight_batch(x)?;
        let mut z = DMatrix::zeros(n, n);
        let mut base_grams = Vec::with_capacity(self.bases.len());
        for (base, w) in self.bases.iter().zip(&weight_outputs) {
            let c = base.gram_sym_rows(&rows);
            z += (w * w.transpose()).component_mul(&c);
            base_grams.push(c);
        }
        let bias_trace = match &self.bias {
            Some(net) => {
                let t = net.forward_batch(x)?;
                z += &t.output * t.output.transpose();
                Some(t)
            }
            None => None,
        };
        for i in 0..n {
            for j in i + 1..n {
                z[(j, i)] = z[(i, j)];
            }
        }
        if let Some(k) = z.iter().position(|v| !v.is_finite()) {
            return Err(numerical(format!(
                "pre-activation is {} at Gram entry ({}, {})",
                z[k],
                k % n,
                k / n
            )));
        }
        Ok(SeekForward {
            rows,
            base_grams,
            weight_traces,
            weight_outputs,
            bias_trace,
            z,
        })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

impl Covariance for SeekKernel {
    fn input_dim(&self) -> usize {
        self.dim()
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.seek_eval(x, y)
    }

    fn gram(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if a.ncols() != self.dim() || b.ncols() != self.dim() {
            return Err(contract("point dimensions do not match the kernel"));
        }
        let (ra, rb) = (rows_of(a), rows_of(b));
        let (_, wa) = self.weight_batch(a)?;
        let (_, wb) = self.weight_batch(b)?;
        let mut z = DMatrix::zeros(ra.len(), rb.len());
        for ((base, w1), w2) in self.bases.iter().zip(&wa).zip(&wb) {
            z += (w1 * w2.transpose()).component_mul(&base.gram_rows(&ra, &rb));
        }
        if let Some(net) = &self.bias {
            z += net.forward_batch(a)?.output * net.forward_batch(b)?.output.transpose();
        }
        let act = self.activation;
        let c = z.map(|v| act.apply(v));
        if let Some(k) = c.iter().position(|v| !v.is_finite()) {
            return Err(numerical(format!(
                "kernel value is {} at cross-Gram entry ({}, {})",
                c[k],
                k % c.nrows(),
                k / c.nrows()
            )));
        }
        Ok(c)
    }

    fn gram_sym(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let act = self.activation;
        Ok(self.forward_sym(x)?.z.map(|v| act.apply(v)))
    }

    fn diag(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let (_, ws) = self.weight_batch(x)?;
        let b = match &self.bias {
            Some(net) => Some(net.forward_batch(x)?.output),
            None => None,
        };
        Ok((0..x.nrows())
            .map(|i| {
                let mut z: f64 = ws.iter().map(|w| w.row(i).norm_squared()).sum();
                if let Some(b) = &b {
                    z += b.row(i).norm_squared();
                }
                self.activation.apply(z)
            })
            .collect())
    }

    fn param_layout(&self) -> ParamLayout {
        let mut l = ParamLayout::new();
        for (m, b) in self.bases.iter().enumerate() {
            l.extend_prefixed(&format!("base{m}."), &b.layout(""));
        }
        match &self.weights {
            WeightNets::PerKernel(nets) => {
                for (m, n) in nets.iter().enumerate() {
                    l.extend_prefixed(&format!("weight_net{m}."), &n.layout());
                }
            }
            WeightNets::Shared { net, .. } => l.extend_prefixed("weight_net.", &net.layout()),
        }
        if let Some(net) = &self.bias {
            l.extend_prefixed("bias_net.", &net.layout());
        }
        l
    }

    fn params(&self) -> Vec<f64> {
        let mut p = Vec::new();
        for b in &self.bases {
            p.extend(b.params());
        }
        for n in self.weights.nets() {
            p.extend_from_slice(n.params());
        }
        if let Some(n) = &self.bias {
            p.extend_from_slice(n.params());
        }
        p
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let total = self.param_layout().total();
        if params.len() != total {
            return Err(contract(format!(
                "kernel expects {total} parameters, got {}",
                params.len()
            )));
        }
        let mut rest = params;
        for b in &mut self.bases {
            let (head, tail) = rest.split_at(b.n_params());
            b.set_params(head)?;
            rest = tail;
        }
        for n in self.weights.nets_mut().into_iter().chain(self.bias.as_mut()) {
            let (head, tail) = rest.split_at(n.n_params());
            n.set_params(head)?;
            rest = tail;
        }
        Ok(())
    }

    fn gram_vjp(&self, x: &DMatrix<f64>, adjoint: &DMatrix<f64>) -> Result<Vec<f64>> {
        let fwd = self.forward_sym(x)?;
        let n = fwd.rows.len();
        check_square(adjoint, n)?;
        let act = self.activation;
        let mut z_adj = adjoint.clone();
        z_adj.zip_apply(&fwd.z, |a, z| *a *= act.derivative(z));
        let z_adj_sym = &z_adj + z_adj.transpose();

        let mut grad = vec![0.0; self.param_layout().total()];
        let mut offset = 0;
        let mut w_adjs = Vec::with_capacity(self.bases.len());
        for ((base, c), w) in self.bases.iter().zip(&fwd.base_grams).zip(&fwd.weight_outputs) {
            let k = w * w.transpose();
            let np = base.n_params();
            base.backward_sym(&fwd.rows, &z_adj.component_mul(&k), &mut grad[offset..offset + np], None);
            offset += np;
            let s = z_adj_sym.component_mul(c);
            w_adjs.push(s * w);
        }
        match &self.weights {
            WeightNets::PerKernel(nets) => {
                for ((net, trace), wa) in nets.iter().zip(&fwd.weight_traces).zip(&w_adjs) {
                    let np = net.n_params();
                    net.backward(trace, wa, &mut grad[offset..offset + np], None);
                    offset += np;
                }
            }
            WeightNets::Shared { net, widths } => {
                let mut full = DMatrix::zeros(n, net.output_dim());
                let mut start = 0;
                for (w, wa) in widths.iter().zip(&w_adjs) {
                    full.columns_mut(start, *w).copy_from(wa);
                    start += w;
                }
                let np = net.n_params();
                net.backward(&fwd.weight_traces[0], &full, &mut grad[offset..offset + np], None);
                offset += np;
            }
        }
        if let (Some(net), Some(trace)) = (&self.bias, &fwd.bias_trace) {
            let b_adj = &z_adj_sym * &trace.output;
            let np = net.n_params();
            net.backward(trace, &b_adj, &mut grad[offset..offset + np], None);
        }
        Ok(grad)
    }

    fn reinitialize(&mut self, rng: &mut dyn RngCore) {
        for b in &mut self.bases {
            b.reinitialize(rng);
        }
        for n in self.weights.nets_mut().into_iter().chain(self.bias.as_mut()) {
            n.reinitialize(rng);
        }
    }
}

/// Gibbs kernel value for explicit per-dimension lengthscales at both points:
///
/// ```text
/// prod_p sqrt(2 l_p l'_p / (l_p^2 + l'_p^2)) * exp(-sum_p (x_p - x'_p)^2 / (l_p^2 + l'_p^2))
/// ```
pub fn gibbs_value(x: &[f64], y: &[f64], lx: &[f64], ly: &[f64]) -> Result<f64> {
    let p = x.len();
    if y.len() != p || lx.len() != p || ly.len() != p {
        return Err(contract("Gibbs kernel arguments disagree on dimension"));
    }
    if let Some(l) = lx.iter().chain(ly).find(|l| !(**l > 0.0)) {
        return Err(contract(format!("Gibbs lengthscale {l} is not positive")));
    }
    Ok(gibbs_unchecked(x, y, lx, ly))
}

#[inline]
fn gibbs_unchecked(x: &[f64], y: &[f64], lx: &[f64], ly: &[f64]) -> f64 {
    let mut log_prefactor = 0.0;
    let mut exponent = 0.0;
    for p in 0..x.len() {
        let s = lx[p] * lx[p] + ly[p] * ly[p];
        log_prefactor += 0.5 * (2.0 * lx[p] * ly[p] / s).ln();
        let d = x[p] - y[p];
        exponent += d * d / s;
    }
    (log_prefactor - exponent).exp()
}

/// Nonstationary squared-exponential kernel with network-predicted,
/// per-dimension lengthscales `l(x) = softplus(net(x)) + 1e-3`.
#[derive(Clone, Debug)]
pub struct GibbsKernel {
    net: Mlp,
}

impl GibbsKernel {
    pub fn new(net: Mlp) -> Result<Self> {
        if net.input_dim() != net.output_dim() {
            return Err(contract(format!(
                "lengthscale network must map R^{0} to R^{0}; it outputs {1}",
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(Self { net })
    }

    /// Two hidden layers of width `4P`, softplus, linear output of width `P`.
    pub fn comparative_default(dim: usize, seed: u64) -> Result<Self> {
        let spec = MlpSpec::new(dim, vec![4 * dim, 4 * dim], dim, Activation::Softplus)?;
        Self::new(Mlp::init(spec, seed))
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn lengthscales(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .net
            .forward(x)?
            .into_iter()
            .map(|u| softplus(u) + GIBBS_LENGTHSCALE_FLOOR)
            .collect())
    }

    pub fn gibbs_eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        gibbs_value(x, y, &self.lengthscales(x)?, &self.lengthscales(y)?)
    }

    fn lengthscale_batch(&self, x: &DMatrix<f64>) -> Result<(MlpTrace, DMatrix<f64>)> {
        let t = self.net.forward_batch(x)?;
        let l = t.output.map(|u| softplus(u) + GIBBS_LENGTHSCALE_FLOOR);
        Ok((t, l))
    }
}

impl Covariance for GibbsKernel {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.gibbs_eval(x, y)
    }

    fn gram(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (_, la) = self.lengthscale_batch(a)?;
        let (_, lb) = self.lengthscale_batch(b)?;
        let (ra, rb) = (rows_of(a), rows_of(b));
        let (la, lb) = (rows_of(&la), rows_of(&lb));
        Ok(DMatrix::from_fn(ra.len(), rb.len(), |i, j| {
            gibbs_unchecked(&ra[i], &rb[j], &la[i], &lb[j])
        }))
    }

    fn gram_sym(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (_, l) = self.lengthscale_batch(x)?;
        let (r, l) = (rows_of(x), rows_of(&l));
        let n = r.len();
        let mut c = DMatrix::zeros(n, n);
        for i in 0..n {
            c[(i, i)] = gibbs_unchecked(&r[i], &r[i], &l[i], &l[i]);
            for j in i + 1..n {
                let v = gibbs_unchecked(&r[i], &r[j], &l[i], &l[j]);
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        Ok(c)
    }

    fn param_layout(&self) -> ParamLayout {
        let mut l = ParamLayout::new();
        l.extend_prefixed("lengthscale_net.", &self.net.layout());
        l
    }

    fn params(&self) -> Vec<f64> {
        self.net.params().to_vec()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.net.set_params(params)
    }

    fn gram_vjp(&self, x: &DMatrix<f64>, adjoint: &DMatrix<f64>) -> Result<Vec<f64>> {
        let n = x.nrows();
        check_square(adjoint, n)?;
        let (trace, l) = self.lengthscale_batch(x)?;
        let rows = rows_of(x);
        let lr = rows_of(&l);
        let dim = self.input_dim();
        let mut l_adj = DMatrix::zeros(n, dim);
        for i in 0..n {
            for j in i + 1..n {
                let weight = adjoint[(i, j)] + adjoint[(j, i)];
                if weight == 0.0 {
                    continue;
                }
                let c = gibbs_unchecked(&rows[i], &rows[j], &lr[i], &lr[j]);
                for p in 0..dim {
                    let (a, b) = (lr[i][p], lr[j][p]);
                    let s = a * a + b * b;
                    let d = rows[i][p] - rows[j][p];
                    let d2 = d * d;
                    let ga = 0.5 / a - a / s + 2.0 * a * d2 / (s * s);
                    let gb = 0.5 / b - b / s + 2.0 * b * d2 / (s * s);
                    l_adj[(i, p)] += weight * c * ga;
                    l_adj[(j, p)] += weight * c * gb;
                }
            }
        }
        // dl/du = sigmoid(u) for the softplus transform.
        l_adj.zip_apply(&trace.output, |a, u| *a *= sigmoid(u));
        let mut grad = vec![0.0; self.net.n_params()];
        self.net.backward(&trace, &l_adj, &mut grad, None);
        Ok(grad)
    }

    fn reinitialize(&mut self, rng: &mut dyn RngCore) {
        self.net.reinitialize(rng);
    }
}

/// A base kernel applied to the output of a learned feature network.
#[derive(Clone, Debug)]
pub struct DeepKernel {
    net: Mlp,
    base: BaseKernel,
}

impl DeepKernel {
    pub fn new(net: Mlp, base: BaseKernel) -> Result<Self> {
        if net.output_dim() != base.dim() {
            return Err(contract(format!(
                "feature network outputs {} dimensions but the base kernel expects {}",
                net.output_dim(),
                base.dim()
            )));
        }
        Ok(Self { net, base })
    }

    /// Two hidden layers of width `4P`, softplus, linear output of width
    /// `P`, Gaussian base kernel on the features.
    pub fn comparative_default(dim: usize, seed: u64) -> Result<Self> {
        let spec = MlpSpec::new(dim, vec![4 * dim, 4 * dim], dim, Activation::Softplus)?;
        Self::new(Mlp::init(spec, seed), BaseKernel::unit(BaseKernelKind::Gaussian, dim)?)
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn base(&self) -> &BaseKernel {
        &self.base
    }

    pub fn deep_eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.base.eval(&self.net.forward(x)?, &self.net.forward(y)?)
    }
}

impl Covariance for DeepKernel {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.deep_eval(x, y)
    }

    fn gram(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let za = rows_of(&self.net.forward_batch(a)?.output);
        let zb = rows_of(&self.net.forward_batch(b)?.output);
        Ok(self.base.gram_rows(&za, &zb))
    }

    fn gram_sym(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let z = rows_of(&self.net.forward_batch(x)?.output);
        Ok(self.base.gram_sym_rows(&z))
    }

    fn param_layout(&self) -> ParamLayout {
        let mut l = ParamLayout::new();
        l.extend_prefixed("base.", &self.base.layout(""));
        l.extend_prefixed("feature_net.", &self.net.layout());
        l
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.base.params();
        p.extend_from_slice(self.net.params());
        p
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let nb = self.base.n_params();
        if params.len() != nb + self.net.n_params() {
            return Err(contract(format!(
                "kernel expects {} parameters, got {}",
                nb + self.net.n_params(),
                params.len()
            )));
        }
        self.base.set_params(&params[..nb])?;
        self.net.set_params(&params[nb..])
    }

    fn gram_vjp(&self, x: &DMatrix<f64>, adjoint: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_square(adjoint, x.nrows())?;
        let trace = self.net.forward_batch(x)?;
        let z = rows_of(&trace.output);
        let nb = self.base.n_params();
        let mut grad = vec![0.0; nb + self.net.n_params()];
        let mut z_adj = DMatrix::zeros(trace.output.nrows(), trace.output.ncols());
        let (gb, gn) = grad.split_at_mut(nb);
        self.base.backward_sym(&z, adjoint, gb, Some(&mut z_adj));
        self.net.backward(&trace, &z_adj, gn, None);
        Ok(grad)
    }

    fn reinitialize(&mut self, rng: &mut dyn RngCore) {
        self.base.reinitialize(rng);
        self.net.reinitialize(rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{LengthscaleParams, MaternNu};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A network that ignores its input and returns `value`.
    fn constant_net(dim: usize, outputs: usize, value: f64) -> Mlp {
        let spec = MlpSpec::new(dim, vec![2, 2], outputs, Activation::Softplus).unwrap();
        let mut p = vec![0.0; spec.n_params()];
        let n = p.len();
        for v in &mut p[n - outputs..] {
            *v = value;
        }
        Mlp::new(spec, p).unwrap()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, dim, |_, _| rng.random_range(-1.5..1.5))
    }

    fn single_base(dim: usize, bias_value: f64, act: SeekActivation) -> (SeekKernel, BaseKernel) {
        let base = BaseKernel::new(
            BaseKernelKind::Matern(MaternNu::FiveHalves),
            LengthscaleParams::new(vec![0.4; dim]).unwrap(),
        )
        .unwrap();
        let k = SeekKernel::new(
            vec![base.clone()],
            WeightNets::PerKernel(vec![constant_net(dim, 1, 1.0)]),
            Some(constant_net(dim, 1, bias_value)),
            act,
        )
        .unwrap();
        (k, base)
    }

    #[test]
    fn unit_weight_zero_bias_reduces_to_base() {
        let (k, base) = single_base(2, 0.0, SeekActivation::Iden);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert_eq!(k.preactivation(&x, &y).unwrap(), base.eval(&x, &y).unwrap());
            assert_eq!(k.seek_eval(&x, &y).unwrap(), base.eval(&x, &y).unwrap());
        }
    }

    #[test]
    fn constant_bias_only_kernel() {
        let k = SeekKernel::new(
            vec![],
            WeightNets::PerKernel(vec![]),
            Some(constant_net(1, 1, 1.0)),
            SeekActivation::Exp,
        )
        .unwrap();
        assert_eq!(k.preactivation(&[0.2], &[-4.0]).unwrap(), 1.0);

        let zero = SeekKernel::new(
            vec![],
            WeightNets::PerKernel(vec![]),
            Some(constant_net(1, 1, 0.0)),
            SeekActivation::Exp,
        )
        .unwrap();
        assert_eq!(zero.seek_eval(&[0.2], &[-4.0]).unwrap(), 1.0);
        let sinh = SeekKernel::new(
            vec![],
            WeightNets::PerKernel(vec![]),
            Some(constant_net(1, 1, 0.0)),
            SeekActivation::Sinh,
        )
        .unwrap();
        assert_eq!(sinh.seek_eval(&[0.2], &[-4.0]).unwrap(), 0.0);
    }

    #[test]
    fn kernel_without_bases_or_bias_is_rejected() {
        assert!(SeekKernel::new(vec![], WeightNets::PerKernel(vec![]), None, SeekActivation::Exp).is_err());
    }

    #[test]
    fn preactivation_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = SeekKernel::with_networks(
            3,
            &[BaseKernelKind::Gaussian, BaseKernelKind::periodic(0.8).unwrap()],
            &[4, 4],
            2,
            &[4, 4],
            2,
            Activation::Tanh,
            SeekActivation::Cosh,
            17,
        )
        .unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = k.preactivation(&x, &y).unwrap();
            let b = k.preactivation(&y, &x).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn activation_clamp_keeps_values_finite() {
        assert_eq!(SeekActivation::Exp.apply(1e6), 30f64.exp());
        assert_eq!(SeekActivation::Exp.derivative(31.0), 0.0);
        assert_eq!(SeekActivation::Iden.apply(1e6), 1e6);
    }

    fn check_vjp<K: Covariance + Clone>(k: &K, x: &DMatrix<f64>) {
        let n = x.nrows();
        let adj = DMatrix::from_fn(n, n, |i, j| ((3 * i + 5 * j) % 7) as f64 / 7.0 - 0.45);
        let grad = k.gram_vjp(x, &adj).unwrap();
        let p0 = k.params();
        assert_eq!(grad.len(), p0.len());
        // Rounding in the differenced sums grows with the Gram's magnitude.
        let scale = k.gram_sym(x).unwrap().abs().sum();
        let eps = 1e-6 + 1e-8 * scale;
        for q in 0..p0.len() {
            let h = 1e-6 * p0[q].abs().max(1.0);
            let mut a = k.clone();
            let mut b = k.clone();
            let mut pa = p0.clone();
            let mut pb = p0.clone();
            pa[q] += h;
            pb[q] -= h;
            a.set_params(&pa).unwrap();
            b.set_params(&pb).unwrap();
            let fd = (a.gram_sym(x).unwrap().dot(&adj) - b.gram_sym(x).unwrap().dot(&adj)) / (2.0 * h);
            assert_relative_eq!(grad[q], fd, epsilon = eps, max_relative = 1e-5);
        }
    }

    #[test]
    fn seek_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_points(&mut rng, 7, 2);
        for act in SeekActivation::ALL {
            let k = SeekKernel::with_networks(
                2,
                &[
                    BaseKernelKind::Gaussian,
                    BaseKernelKind::periodic(1.1).unwrap(),
                    BaseKernelKind::power_exponential(1.4).unwrap(),
                ],
                &[3, 3],
                2,
                &[3, 3],
                2,
                Activation::Softplus,
                act,
                3,
            )
            .unwrap();
            check_vjp(&k, &x);
        }
    }

    #[test]
    fn shared_weight_net_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_points(&mut rng, 6, 1);
        let spec = MlpSpec::new(1, vec![4, 4], 3, Activation::Tanh).unwrap();
        let k = SeekKernel::new(
            vec![
                BaseKernel::unit(BaseKernelKind::Gaussian, 1).unwrap(),
                BaseKernel::unit(BaseKernelKind::Matern(MaternNu::ThreeHalves), 1).unwrap(),
            ],
            WeightNets::Shared {
                net: Mlp::init(spec, 4),
                widths: vec![1, 2],
            },
            Some(Mlp::init(MlpSpec::new(1, vec![4, 4], 2, Activation::Tanh).unwrap(), 5)),
            SeekActivation::Exp,
        )
        .unwrap();
        check_vjp(&k, &x);
        let rows = rows_of(&x);
        let g = k.gram_sym(&x).unwrap();
        assert_relative_eq!(g[(1, 4)], k.seek_eval(&rows[1], &rows[4]).unwrap(), max_relative = 1e-12);
    }

    #[test]
    fn gibbs_constant_lengthscale_is_gaussian() {
        let u0: f64 = 0.3;
        let l = softplus(u0) + GIBBS_LENGTHSCALE_FLOOR;
        let spec = MlpSpec::new(2, vec![4, 4], 2, Activation::Softplus).unwrap();
        let mut p = vec![0.0; spec.n_params()];
        let n = p.len();
        p[n - 2] = u0;
        p[n - 1] = u0;
        let k = GibbsKernel::new(Mlp::new(spec, p).unwrap()).unwrap();
        let w = (1.0 / (2.0 * l * l)).log10();
        let gauss = BaseKernel::new(BaseKernelKind::Gaussian, LengthscaleParams::new(vec![w, w]).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert_relative_eq!(k.gibbs_eval(&x, &y).unwrap(), gauss.eval(&x, &y).unwrap(), max_relative = 1e-10);
        }
    }

    #[test]
    fn gibbs_diagonal_and_symmetry() {
        let k = GibbsKernel::comparative_default(3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert_relative_eq!(k.gibbs_eval(&x, &x).unwrap(), 1.0, epsilon = 1e-15);
            let a = k.gibbs_eval(&x, &y).unwrap();
            let b = k.gibbs_eval(&y, &x).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        assert!(gibbs_value(&[0.0], &[1.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn gibbs_and_deep_vjp_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_points(&mut rng, 6, 2);
        check_vjp(&GibbsKernel::comparative_default(2, 1).unwrap(), &x);
        check_vjp(&DeepKernel::comparative_default(2, 2).unwrap(), &x);
    }

    #[test]
    fn deep_identity_features_match_base() {
        let spec = MlpSpec::new(2, vec![3], 2, Activation::Identity).unwrap();
        // Hidden layer copies x into its first two units; output reads them back.
        let mut p = vec![0.0; spec.n_params()];
        p[0] = 1.0; // h0 <- x0
        p[3] = 1.0; // h1 <- x1
        let out = 2 * 3 + 3;
        p[out] = 1.0; // y0 <- h0
        p[out + 4] = 1.0; // y1 <- h1
        let net = Mlp::new(spec, p).unwrap();
        let base = BaseKernel::new(BaseKernelKind::Gaussian, LengthscaleParams::new(vec![0.2, -0.1]).unwrap()).unwrap();
        let k = DeepKernel::new(net, base.clone()).unwrap();
        for (x, y) in [([0.0, 0.0], [1.0, -1.0]), ([0.3, 0.7], [0.3, 0.7]), ([-2.0, 1.0], [0.5, 0.5])] {
            assert_relative_eq!(k.deep_eval(&x, &y).unwrap(), base.eval(&x, &y).unwrap(), max_relative = 1e-14);
        }
        assert_eq!(k.deep_eval(&[0.4, 0.1], &[0.4, 0.1]).unwrap(), 1.0);
    }

    #[test]
    fn random_deep_kernel_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let k = DeepKernel::comparative_default(3, 7).unwrap();
        let x = random_points(&mut rng, 20, 3);
        let r = crate::kernels::validate_kernel(|a, b| k.eval(a, b), &[x], 1e-8).unwrap();
        assert!(r.symmetric && r.psd);
    }
}
