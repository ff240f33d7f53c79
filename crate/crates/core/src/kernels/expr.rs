//! Kernel algebra: scaling, addition, product and input warping.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::RngCore;

use super::{rows_of, BaseKernel};
use crate::error::{contract, Result};
use crate::neural::{Mlp, MlpTrace, ParamLayout};

/// A non-negative coefficient of a scaling or addition node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Coefficient {
    /// Held constant during training. Must be `>= 0` to evaluate.
    Fixed(f64),
    /// Trained on a log scale; the coefficient is `exp(log_value)`.
    Learnable { log_value: f64 },
}

impl Coefficient {
    pub fn learnable(value: f64) -> Result<Self> {
        if !(value > 0.0 && value.is_finite()) {
            return Err(contract(format!(
                "learnable coefficient must be positive and finite, got {value}"
            )));
        }
        Ok(Coefficient::Learnable {
            log_value: value.ln(),
        })
    }

    pub fn value(&self) -> f64 {
        match *self {
            Coefficient::Fixed(v) => v,
            Coefficient::Learnable { log_value } => log_value.exp(),
        }
    }

    fn checked(&self) -> Result<f64> {
        let v = self.value();
        if v < 0.0 || v.is_nan() {
            return Err(contract(format!("scale coefficient {v} is negative")));
        }
        Ok(v)
    }

    fn n_params(&self) -> usize {
        usize::from(matches!(self, Coefficient::Learnable { .. }))
    }
}

/// A fixed, user-supplied feature map.
#[derive(Clone)]
pub struct FeatureFn {
    pub input_dim: usize,
    pub output_dim: usize,
    pub f: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
}

impl fmt::Debug for FeatureFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureFn")
            .field("input_dim", &self.input_dim)
            .field("output_dim", &self.output_dim)
            .finish_non_exhaustive()
    }
}

/// The map `psi` of a warping node.
#[derive(Clone, Debug)]
pub enum FeatureMap {
    Identity,
    /// A learnable network.
    Mlp(Mlp),
    Function(FeatureFn),
}

impl FeatureMap {
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            FeatureMap::Identity => Ok(x.to_vec()),
            FeatureMap::Mlp(net) => net.forward(x),
            FeatureMap::Function(func) => {
                if x.len() != func.input_dim {
                    return Err(contract(format!(
                        "feature map expects input dimension {}, got {}",
                        func.input_dim,
                        x.len()
                    )));
                }
                Ok((func.f)(x))
            }
        }
    }

    fn apply_batch(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Option<MlpTrace>)> {
        match self {
            FeatureMap::Identity => Ok((x.clone(), None)),
            FeatureMap::Mlp(net) => {
                let trace = net.forward_batch(x)?;
                Ok((trace.output.clone(), Some(trace)))
            }
            FeatureMap::Function(func) => {
                let rows = rows_of(x);
                let mut out = DMatrix::zeros(rows.len(), func.output_dim);
                for (i, r) in rows.iter().enumerate() {
                    let z = self.apply(r)?;
                    if z.len() != func.output_dim {
                        return Err(contract(format!(
                            "feature map declared output dimension {} but produced {}",
                            func.output_dim,
                            z.len()
                        )));
                    }
                    for (k, v) in z.into_iter().enumerate() {
                        out[(i, k)] = v;
                    }
                }
                Ok((out, None))
            }
        }
    }
}

/// An algebraic tree of kernels. Each node is valid whenever its children
/// are, so any well-formed tree over valid bases is a valid kernel.
#[derive(Clone, Debug)]
pub enum KernelExpr {
    Base(BaseKernel),
    Scale {
        alpha: Coefficient,
        child: Box<KernelExpr>,
    },
    Sum {
        alpha1: Coefficient,
        left: Box<KernelExpr>,
        alpha2: Coefficient,
        right: Box<KernelExpr>,
    },
    Product(Box<KernelExpr>, Box<KernelExpr>),
    Warp {
        map: FeatureMap,
        child: Box<KernelExpr>,
    },
}

/// Cached forward values needed by the backward pass.
enum Trace {
    Base,
    Scale(Box<Trace>, DMatrix<f64>),
    Sum(Box<Trace>, DMatrix<f64>, Box<Trace>, DMatrix<f64>),
    Product(Box<Trace>, DMatrix<f64>, Box<Trace>, DMatrix<f64>),
    Warp {
        z: DMatrix<f64>,
        net: Option<MlpTrace>,
        child: Box<Trace>,
    },
}

impl KernelExpr {
    pub fn base(kernel: BaseKernel) -> Self {
        KernelExpr::Base(kernel)
    }

    pub fn scale(alpha: Coefficient, child: KernelExpr) -> Self {
        KernelExpr::Scale {
            alpha,
            child: Box::new(child),
        }
    }

    pub fn sum(alpha1: Coefficient, left: KernelExpr, alpha2: Coefficient, right: KernelExpr) -> Self {
        KernelExpr::Sum {
            alpha1,
            left: Box::new(left),
            alpha2,
            right: Box::new(right),
        }
    }

    pub fn product(left: KernelExpr, right: KernelExpr) -> Self {
        KernelExpr::Product(Box::new(left), Box::new(right))
    }

    pub fn warp(map: FeatureMap, child: KernelExpr) -> Self {
        KernelExpr::Warp {
            map,
            child: Box::new(child),
        }
    }

    /// Dimension of the points this expression accepts.
    pub fn input_dim(&self) -> usize {
        match self {
            KernelExpr::Base(k) => k.dim(),
            KernelExpr::Scale { child, .. } => child.input_dim(),
            KernelExpr::Sum { left, .. } => left.input_dim(),
            KernelExpr::Product(l, _) => l.input_dim(),
            KernelExpr::Warp { map, child } => match map {
                FeatureMap::Identity => child.input_dim(),
                FeatureMap::Mlp(net) => net.input_dim(),
                FeatureMap::Function(f) => f.input_dim,
            },
        }
    }

    /// Checks coefficient signs and dimension compatibility of the tree.
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelExpr::Base(k) => k.kind.validate(),
            KernelExpr::Scale { alpha, child } => {
                alpha.checked()?;
                child.validate()
            }
            KernelExpr::Sum {
                alpha1,
                left,
                alpha2,
                right,
            } => {
                alpha1.checked()?;
                alpha2.checked()?;
                same_dim(left, right)?;
                left.validate()?;
                right.validate()
            }
            KernelExpr::Product(l, r) => {
                same_dim(l, r)?;
                l.validate()?;
                r.validate()
            }
            KernelExpr::Warp { map, child } => {
                let out = match map {
                    FeatureMap::Identity => child.input_dim(),
                    FeatureMap::Mlp(net) => net.output_dim(),
                    FeatureMap::Function(f) => f.output_dim,
                };
                if out != child.input_dim() {
                    return Err(contract(format!(
                        "warp produces dimension {out} but its child expects {}",
                        child.input_dim()
                    )));
                }
                child.validate()
            }
        }
    }

    /// Pointwise evaluation of the tree.
    pub fn compose(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            KernelExpr::Base(k) => k.eval(x, y),
            KernelExpr::Scale { alpha, child } => Ok(alpha.checked()? * child.compose(x, y)?),
            KernelExpr::Sum {
                alpha1,
                left,
                alpha2,
                right,
            } => Ok(alpha1.checked()? * left.compose(x, y)? + alpha2.checked()? * right.compose(x, y)?),
            KernelExpr::Product(l, r) => Ok(l.compose(x, y)? * r.compose(x, y)?),
            KernelExpr::Warp { map, child } => child.compose(&map.apply(x)?, &map.apply(y)?),
        }
    }

    /// Cross-covariance between two point sets (one point per row).
    pub fn gram_cross(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            KernelExpr::Base(k) => {
                if a.ncols() != k.dim() || b.ncols() != k.dim() {
                    return Err(contract(format!(
                        "point dimensions {} and {} do not match kernel dimension {}",
                        a.ncols(),
                        b.ncols(),
                        k.dim()
                    )));
                }
                Ok(k.gram_rows(&rows_of(a), &rows_of(b)))
            }
            KernelExpr::Scale { alpha, child } => Ok(child.gram_cross(a, b)? * alpha.checked()?),
            KernelExpr::Sum {
                alpha1,
                left,
                alpha2,
                right,
            } => Ok(left.gram_cross(a, b)? * alpha1.checked()? + right.gram_cross(a, b)? * alpha2.checked()?),
            KernelExpr::Product(l, r) => Ok(l.gram_cross(a, b)?.component_mul(&r.gram_cross(a, b)?)),
            KernelExpr::Warp { map, child } => {
                let (za, _) = map.apply_batch(a)?;
                let (zb, _) = map.apply_batch(b)?;
                child.gram_cross(&za, &zb)
            }
        }
    }

    /// Gram over a single point set. Exactly symmetric: every leaf mirrors
    /// its upper triangle and every combinator acts elementwise.
    pub fn gram_sym(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_sym(x)?.0)
    }

    fn forward_sym(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Trace)> {
        match self {
            KernelExpr::Base(k) => {
                if x.ncols() != k.dim() {
                    return Err(contract(format!(
                        "point dimension {} does not match kernel dimension {}",
                        x.ncols(),
                        k.dim()
                    )));
                }
                Ok((k.gram_sym_rows(&rows_of(x)), Trace::Base))
            }
            KernelExpr::Scale { alpha, child } => {
                let a = alpha.checked()?;
                let (c, t) = child.forward_sym(x)?;
                Ok((&c * a, Trace::Scale(Box::new(t), c)))
            }
            KernelExpr::Sum {
                alpha1,
                left,
                alpha2,
                right,
            } => {
                let (a1, a2) = (alpha1.checked()?, alpha2.checked()?);
                let (c1, t1) = left.forward_sym(x)?;
                let (c2, t2) = right.forward_sym(x)?;
                Ok((&c1 * a1 + &c2 * a2, Trace::Sum(Box::new(t1), c1, Box::new(t2), c2)))
            }
            KernelExpr::Product(l, r) => {
                let (c1, t1) = l.forward_sym(x)?;
                let (c2, t2) = r.forward_sym(x)?;
                Ok((c1.component_mul(&c2), Trace::Product(Box::new(t1), c1, Box::new(t2), c2)))
            }
            KernelExpr::Warp { map, child } => {
                let (z, net) = map.apply_batch(x)?;
                let (c, t) = child.forward_sym(&z)?;
                Ok((
                    c,
                    Trace::Warp {
                        z,
                        net,
                        child: Box::new(t),
                    },
                ))
            }
        }
    }

    /// Parameter count in pre-order: a node's own parameters, then its
    /// children left to right.
    pub fn n_params(&self) -> usize {
        match self {
            KernelExpr::Base(k) => k.n_params(),
            KernelExpr::Scale { alpha, child } => alpha.n_params() + child.n_params(),
            KernelExpr::Sum {
                alpha1,
                left,
                alpha2,
                right,
            } => alpha1.n_params() + alpha2.n_params() + left.n_params() + right.n_params(),
            KernelExpr::Product(l, r) => l.n_params() + r.n_params(),
            KernelExpr::Warp { map, child } => {
                let own = match map {
                    FeatureMap::Mlp(net) => net.n_params(),
                    _ => 0,
                };
                own + child.n_params()
            }
        }
    }

    pub fn layout(&self) -> ParamLayout {
        let mut layout = ParamLayout::new();
        self.layout_into("", &mut layout);
        layout
    }

    fn layout_into(&self, path: &str, out: &mut ParamLayout) {
        match self {
            KernelExpr::Base(k) => out.extend_prefixed(&format!("{path}base."), &k.layout("")),
            KernelExpr::Scale { alpha, child } => {
                if alpha.n_params() == 1 {
                    out.push(format!("{path}scale.log_alpha"), 1);
                }
                child.layout_into(&format!("{path}scale."), out);
            }
            KernelExpr::Sum {
                alpha1,
                left,
                alpha2,
                right,
            } => {
                if alpha1.n_params() == 1 {
                    out.push(format!("{path}sum.log_alpha1"), 1);
                }
                if alpha2.n_params() == 1 {
                    out.push(format!("{path}sum.log_alpha2"), 1);
                }
                left.layout_into(&format!("{path}sum.left."), out);
                right.layout_into(&format!("{path}sum.right."), out);
            }
            KernelExpr::Product(l, r) => {
                l.layout_into(&format!("{path}product.left."), out);
                r.layout_into(&format!("{path}product.right."), out);
            }
            KernelExpr::Warp { map, child } => {
                if let FeatureMap::Mlp(net) = map {
                    out.extend_prefixed(&format!("{path}warp.net."), &net.layout());
                }
                child.layout_into(&format!("{path}warp."), out);
            }
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.params_into(&mut out);
        out
    }

    fn params_into(&self, out: &mut Vec<f64>) {
        let push_coef = |c: &Coefficient, out: &mut Vec<f64>| {
            if let Coefficient::Learnable { log_value } = c {
                out.push(*log_value);
            }
        };
        match self {
            KernelExpr::Base(k) => out.extend(k.params()),
            KernelExpr::Scale { alpha, child } => {
                push_coef(alpha, out);
                child.params_into(out);
            }
            KernelExpr::Sum {
                alpha1,
                left,
                alpha2,
                right,
            } => {
                push_coef(alpha1, out);
                push_coef(alpha2, out);
                left.params_into(out);
                right.params_into(out);
            }
            KernelExpr::Product(l, r) => {
                l.params_into(out);
                r.params_into(out);
            }
            KernelExpr::Warp { map, child } => {
                if let FeatureMap::Mlp(net) = map {
                    out.extend_from_slice(net.params());
                }
                child.params_into(out);
            }
        }
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(contract(format!(
                "kernel expression expects {} parameters, got {}",
                self.n_params(),
                p.len()
            )));
        }
        self.set_params_from(p);
        Ok(())
    }

    fn set_params_from<'a>(&mut self, mut p: &'a [f64]) -> &'a [f64] {
        fn take_coef<'a>(c: &mut Coefficient, p: &'a [f64]) -> &'a [f64] {
            if let Coefficient::Learnable { log_value } = c {
                *log_value = p[0];
                &p[1..]
            } else {
                p
            }
        }
        match self {
            KernelExpr::Base(k) => {
                let n = k.n_params();
                // Lengthscales are finite here: the flat vector comes from the optimizer.
                let _ = k.set_params(&p[..n]);
                &p[n..]
            }
            KernelExpr::Scale { alpha, child } => {
                p = take_coef(alpha, p);
                child.set_params_from(p)
            }
            KernelExpr::Sum {
                alpha1,
                left,
                alpha2,
                right,
            } => {
                p = take_coef(alpha1, p);
                p = take_coef(alpha2, p);
                p = left.set_params_from(p);
                right.set_params_from(p)
            }
            KernelExpr::Product(l, r) => {
                p = l.set_params_from(p);
                r.set_params_from(p)
            }
            KernelExpr::Warp { map, child } => {
                if let FeatureMap::Mlp(net) = map {
                    let n = net.n_params();
                    let _ = net.set_params(&p[..n]);
                    p = &p[n..];
                }
                child.set_params_from(p)
            }
        }
    }

    pub fn reinitialize(&mut self, rng: &mut dyn RngCore) {
        match self {
            KernelExpr::Base(k) => k.reinitialize(rng),
            KernelExpr::Scale { child, .. } => child.reinitialize(rng),
            KernelExpr::Sum { left, right, .. } | KernelExpr::Product(left, right) => {
                left.reinitialize(rng);
                right.reinitialize(rng);
            }
            KernelExpr::Warp { map, child } => {
                if let FeatureMap::Mlp(net) = map {
                    net.reinitialize(rng);
                }
                child.reinitialize(rng);
            }
        }
    }

    /// `sum_ij adjoint_ij dC_ij/dtheta` over all parameters, where `C` is
    /// the symmetric Gram over `x`.
    pub fn gram_vjp(&self, x: &DMatrix<f64>, adjoint: &DMatrix<f64>) -> Result<Vec<f64>> {
        let (_, trace) = self.forward_sym(x)?;
        let mut grad = vec![0.0; self.n_params()];
        self.backward(&trace, x, adjoint, &mut grad, None)?;
        Ok(grad)
    }

    fn backward(
        &self,
        trace: &Trace,
        x: &DMatrix<f64>,
        adjoint: &DMatrix<f64>,
        grad: &mut [f64],
        input_adjoint: Option<&mut DMatrix<f64>>,
    ) -> Result<()> {
        match (self, trace) {
            (KernelExpr::Base(k), Trace::Base) => {
                k.backward_sym(&rows_of(x), adjoint, grad, input_adjoint);
                Ok(())
            }
            (KernelExpr::Scale { alpha, child }, Trace::Scale(t, c)) => {
                let a = alpha.value();
                let own = alpha.n_params();
                if own == 1 {
                    grad[0] += a * adjoint.dot(c);
                }
                child.backward(t, x, &(adjoint * a), &mut grad[own..], input_adjoint)
            }
            (
                KernelExpr::Sum {
                    alpha1,
                    left,
                    alpha2,
                    right,
                },
                Trace::Sum(t1, c1, t2, c2),
            ) => {
                let (a1, a2) = (alpha1.value(), alpha2.value());
                let mut k = 0;
                if alpha1.n_params() == 1 {
                    grad[k] += a1 * adjoint.dot(c1);
                    k += 1;
                }
                if alpha2.n_params() == 1 {
                    grad[k] += a2 * adjoint.dot(c2);
                    k += 1;
                }
                let (gl, gr) = grad[k..].split_at_mut(left.n_params());
                match input_adjoint {
                    Some(ia) => {
                        left.backward(t1, x, &(adjoint * a1), gl, Some(&mut *ia))?;
                        right.backward(t2, x, &(adjoint * a2), gr, Some(ia))
                    }
                    None => {
                        left.backward(t1, x, &(adjoint * a1), gl, None)?;
                        right.backward(t2, x, &(adjoint * a2), gr, None)
                    }
                }
            }
            (KernelExpr::Product(l, r), Trace::Product(t1, c1, t2, c2)) => {
                let (gl, gr) = grad.split_at_mut(l.n_params());
                let adj_l = adjoint.component_mul(c2);
                let adj_r = adjoint.component_mul(c1);
                match input_adjoint {
                    Some(ia) => {
                        l.backward(t1, x, &adj_l, gl, Some(&mut *ia))?;
                        r.backward(t2, x, &adj_r, gr, Some(ia))
                    }
                    None => {
                        l.backward(t1, x, &adj_l, gl, None)?;
                        r.backward(t2, x, &adj_r, gr, None)
                    }
                }
            }
            (KernelExpr::Warp { map, child }, Trace::Warp { z, net, child: t }) => match map {
                FeatureMap::Identity => child.backward(t, z, adjoint, grad, input_adjoint),
                FeatureMap::Mlp(mlp) => {
                    let own = mlp.n_params();
                    let (gn, gc) = grad.split_at_mut(own);
                    let mut z_adj = DMatrix::zeros(z.nrows(), z.ncols());
                    child.backward(t, z, adjoint, gc, Some(&mut z_adj))?;
                    let net_trace = net.as_ref().expect("network warp keeps its trace");
                    mlp.backward(net_trace, &z_adj, gn, input_adjoint);
                    Ok(())
                }
                FeatureMap::Function(_) => {
                    if input_adjoint.is_some() {
                        return Err(contract(
                            "cannot differentiate through a fixed feature map nested inside a learnable warp",
                        ));
                    }
                    child.backward(t, z, adjoint, grad, None)
                }
            },
            _ => unreachable!("trace shape always mirrors the expression"),
        }
    }
}

fn same_dim(a: &KernelExpr, b: &KernelExpr) -> Result<()> {
    if a.input_dim() != b.input_dim() {
        return Err(contract(format!(
            "combined kernels act on different dimensions ({} and {})",
            a.input_dim(),
            b.input_dim()
        )));
    }
    Ok(())
}
