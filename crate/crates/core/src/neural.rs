//! Small feed-forward networks used as weight, bias, lengthscale and
//! feature functions, plus the flat parameter view the optimizer works on.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Hidden-layer nonlinearity. Output layers are always affine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softplus,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, t: f64) -> f64 {
        match self {
            Activation::Softplus => softplus(t),
            Activation::Tanh => t.tanh(),
            Activation::Identity => t,
        }
    }

    /// Derivative with respect to the pre-activation `t`.
    #[inline]
    pub fn derivative(self, t: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(t),
            Activation::Tanh => {
                let h = t.tanh();
                1.0 - h * h
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `ln(1 + e^t)` without overflow for large `t`.
#[inline]
pub fn softplus(t: f64) -> f64 {
    (-t.abs()).exp().ln_1p() + t.max(0.0)
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Architecture of a fully connected network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: Activation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden: Vec<usize>,
        output_dim: usize,
        hidden_activation: Activation,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.contains(&0) {
            return Err(contract(format!(
                "network layer widths must be positive (input {input_dim}, hidden {hidden:?}, output {output_dim})"
            )));
        }
        Ok(Self {
            input_dim,
            hidden,
            output_dim,
            hidden_activation,
        })
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn n_params(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(fan_in, fan_out)| (fan_in + 1) * fan_out)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub len: usize,
}

/// Named segments of a flat parameter vector, in order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    groups: Vec<ParamGroup>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, len: usize) {
        self.groups.push(ParamGroup {
            name: name.into(),
            len,
        });
    }

    /// Appends every group of `other`, prefixing its names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamLayout) {
        for g in &other.groups {
            self.push(format!("{prefix}{}", g.name), g.len);
        }
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn total(&self) -> usize {
        self.groups.iter().map(|g| g.len).sum()
    }

    pub fn offsets(&self) -> Vec<usize> {
        self.groups
            .iter()
            .scan(0, |acc, g| {
                let start = *acc;
                *acc += g.len;
                Some(start)
            })
            .collect()
    }

    /// Name of the group holding flat index `index`.
    pub fn group_of(&self, index: usize) -> Option<&str> {
        let mut start = 0;
        for g in &self.groups {
            if index < start + g.len {
                return Some(&g.name);
            }
            start += g.len;
        }
        None
    }

    pub fn flatten(&self, values: &[Vec<f64>]) -> Result<ParamVector> {
        if values.len() != self.groups.len() {
            return Err(contract(format!(
                "layout has {} groups but {} were supplied",
                self.groups.len(),
                values.len()
            )));
        }
        let mut flat = Vec::with_capacity(self.total());
        for (g, v) in self.groups.iter().zip(values) {
            if g.len != v.len() {
                return Err(contract(format!(
                    "group `{}` expects {} values, got {}",
                    g.name,
                    g.len,
                    v.len()
                )));
            }
            flat.extend_from_slice(v);
        }
        Ok(ParamVector {
            values: flat,
            layout: self.clone(),
        })
    }

    pub fn unflatten(&self, flat: &[f64]) -> Result<Vec<Vec<f64>>> {
        if flat.len() != self.total() {
            return Err(contract(format!(
                "flat vector has {} entries but the layout needs {}",
                flat.len(),
                self.total()
            )));
        }
        let mut rest = flat;
        Ok(self
            .groups
            .iter()
            .map(|g| {
                let (head, tail) = rest.split_at(g.len);
                rest = tail;
                head.to_vec()
            })
            .collect())
    }
}

/// A flat parameter vector together with the layout that names its parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = glorot(spec, &mut rng);
    ParamVector {
        values,
        layout: mlp_layout(spec),
    }
}

fn glorot<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Vec<f64> {
    let mut values = Vec::with_capacity(spec.n_params());
    for (fan_in, fan_out) in spec.layer_shapes() {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-a..=a)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    values
}

fn mlp_layout(spec: &MlpSpec) -> ParamLayout {
    let mut layout = ParamLayout::new();
    for (l, (fan_in, fan_out)) in spec.layer_shapes().into_iter().enumerate() {
        layout.push(format!("layer{l}.weight"), fan_in * fan_out);
        layout.push(format!("layer{l}.bias"), fan_out);
    }
    layout
}

/// Intermediate values of a batched forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    /// Input to each affine layer (the first is the raw batch).
    layer_inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of the hidden layers.
    hidden_pre: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

/// A network specification with concrete parameters.
///
/// Each layer stores its weights row-major as `fan_out x fan_in`, followed
/// by `fan_out` biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    params: Vec<f64>,
}

impl Mlp {
    pub fn new(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        if params.len() != spec.n_params() {
            return Err(contract(format!(
                "network expects {} parameters, got {}",
                spec.n_params(),
                params.len()
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn init(spec: MlpSpec, seed: u64) -> Self {
        let params = init_params(&spec, seed).values;
        Self { spec, params }
    }

    pub fn reinitialize<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.params = glorot(&self.spec, rng);
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(contract(format!(
                "network expects {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn layout(&self) -> ParamLayout {
        mlp_layout(&self.spec)
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.spec.input_dim {
            return Err(contract(format!(
                "network input has length {}, expected {}",
                x.len(),
                self.spec.input_dim
            )));
        }
        let shapes = self.spec.layer_shapes();
        let last = shapes.len() - 1;
        let mut h = x.to_vec();
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            offset += (fan_in + 1) * fan_out;
            h = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    let a = b[o] + row.iter().zip(&h).map(|(wi, hi)| wi * hi).sum::<f64>();
                    if l == last {
                        a
                    } else {
                        self.spec.hidden_activation.apply(a)
                    }
                })
                .collect();
        }
        Ok(h)
    }

    /// Forward pass over a batch with one input per row.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<MlpTrace> {
        if x.ncols() != self.spec.input_dim {
            return Err(contract(format!(
                "network input has {} columns, expected {}",
                x.ncols(),
                self.spec.input_dim
            )));
        }
        let shapes = self.spec.layer_shapes();
        let last = shapes.len() - 1;
        let mut layer_inputs = Vec::with_capacity(shapes.len());
        let mut hidden_pre = Vec::with_capacity(last);
        let mut h = x.clone();
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let w = DMatrix::from_row_slice(
                fan_out,
                fan_in,
                &self.params[offset..offset + fan_in * fan_out],
            );
            let b = &self.params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            offset += (fan_in + 1) * fan_out;
            let mut a = &h * w.transpose();
            for (o, bo) in b.iter().enumerate() {
                a.column_mut(o).add_scalar_mut(*bo);
            }
            layer_inputs.push(h);
            if l == last {
                h = a;
            } else {
                let act = self.spec.hidden_activation;
                h = a.map(|t| act.apply(t));
                hidden_pre.push(a);
            }
        }
        Ok(MlpTrace {
            layer_inputs,
            hidden_pre,
            output: h,
        })
    }

    /// Backpropagates `output_adjoint` (same shape as the batch output).
    ///
    /// Parameter gradients are accumulated into `grad`, which must have
    /// length `n_params()`. When `input_adjoint` is given, the gradient with
    /// respect to the batch inputs is accumulated into it as well.
    pub fn backward(
        &self,
        trace: &MlpTrace,
        output_adjoint: &DMatrix<f64>,
        grad: &mut [f64],
        input_adjoint: Option<&mut DMatrix<f64>>,
    ) {
        let shapes = self.spec.layer_shapes();
        let offsets: Vec<usize> = shapes
            .iter()
            .scan(0, |acc, &(i, o)| {
                let start = *acc;
                *acc += (i + 1) * o;
                Some(start)
            })
            .collect();
        let mut adj = output_adjoint.clone();
        for l in (0..shapes.len()).rev() {
            let (fan_in, fan_out) = shapes[l];
            let offset = offsets[l];
            let input = &trace.layer_inputs[l];
            let gw = adj.transpose() * input;
            for o in 0..fan_out {
                for i in 0..fan_in {
                    grad[offset + o * fan_in + i] += gw[(o, i)];
                }
                grad[offset + fan_in * fan_out + o] += adj.column(o).sum();
            }
            if l == 0 && input_adjoint.is_none() {
                break;
            }
            let w = DMatrix::from_row_slice(
                fan_out,
                fan_in,
                &self.params[offset..offset + fan_in * fan_out],
            );
            let mut h_adj = &adj * w;
            if l == 0 {
                if let Some(ia) = input_adjoint {
                    *ia += h_adj;
                }
                break;
            }
            let act = self.spec.hidden_activation;
            h_adj.zip_apply(&trace.hidden_pre[l - 1], |a, t| *a *= act.derivative(t));
            adj = h_adj;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn spec(p: usize, hidden: Vec<usize>, out: usize, act: Activation) -> MlpSpec {
        MlpSpec::new(p, hidden, out, act).unwrap()
    }

    #[test]
    fn parameter_count_by_layer_shapes() {
        let s = spec(2, vec![4, 4], 1, Activation::Softplus);
        assert_eq!(s.n_params(), 37);
        assert_eq!(init_params(&s, 0).len(), 37);
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let s = spec(3, vec![5, 5], 2, Activation::Tanh);
        assert_eq!(init_params(&s, 7), init_params(&s, 7));
        assert_ne!(init_params(&s, 7).values, init_params(&s, 8).values);
    }

    #[test]
    fn init_respects_glorot_bounds_and_zero_biases() {
        let s = spec(3, vec![6], 2, Activation::Softplus);
        let p = init_params(&s, 3);
        let groups = p.layout.unflatten(&p.values).unwrap();
        let a0 = (6.0f64 / 9.0).sqrt();
        assert!(groups[0].iter().all(|w| w.abs() <= a0));
        assert!(groups[1].iter().all(|&b| b == 0.0));
        assert!(groups[3].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_network_is_constant() {
        let s = spec(2, vec![3, 3], 2, Activation::Softplus);
        let mut params = vec![0.0; s.n_params()];
        let n = params.len();
        params[n - 2] = 0.5;
        params[n - 1] = -1.5;
        let net = Mlp::new(s, params).unwrap();
        for x in [[0.0, 0.0], [3.0, -7.0], [1e3, 2.0]] {
            assert_eq!(net.forward(&x).unwrap(), vec![0.5, -1.5]);
        }
    }

    #[test]
    fn softplus_hidden_units_are_positive() {
        let s = spec(2, vec![4], 1, Activation::Softplus);
        let net = Mlp::init(s, 11);
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, -50.0, 20.0, 700.0, -700.0]);
        let trace = net.forward_batch(&x).unwrap();
        assert!(trace.layer_inputs[1].iter().all(|&h| h > 0.0 || h == 0.0));
        assert!(trace.hidden_pre[0]
            .iter()
            .all(|&t| Activation::Softplus.apply(t) >= 0.0));
        assert!(softplus(-30.0) > 0.0);
        assert!(softplus(800.0).is_finite());
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let net = Mlp::init(spec(2, vec![3], 1, Activation::Tanh), 0);
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn batch_forward_matches_pointwise() {
        let net = Mlp::init(spec(3, vec![4, 5], 2, Activation::Tanh), 5);
        let x = DMatrix::from_fn(6, 3, |i, j| (i as f64 * 0.3 - j as f64 * 0.7).sin());
        let out = net.forward_batch(&x).unwrap().output;
        for i in 0..6 {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let y = net.forward(&row).unwrap();
            for (o, yo) in y.iter().enumerate() {
                assert_relative_eq!(out[(i, o)], *yo, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let s = spec(2, vec![3, 4], 2, Activation::Softplus);
        let mut net = Mlp::init(s, 9);
        let mut p = net.params().to_vec();
        for (i, v) in p.iter_mut().enumerate() {
            *v += 0.05 * ((i * 7 % 5) as f64 - 2.0);
        }
        net.set_params(&p).unwrap();
        let x = DMatrix::from_row_slice(3, 2, &[0.1, -0.4, 1.2, 0.3, -0.8, 0.9]);
        let adj = DMatrix::from_row_slice(3, 2, &[1.0, -0.5, 0.3, 2.0, -1.1, 0.7]);
        let loss = |n: &Mlp, x: &DMatrix<f64>| {
            let out = n.forward_batch(x).unwrap().output;
            out.component_mul(&adj).sum()
        };
        let trace = net.forward_batch(&x).unwrap();
        let mut grad = vec![0.0; net.n_params()];
        let mut xin = DMatrix::zeros(3, 2);
        net.backward(&trace, &adj, &mut grad, Some(&mut xin));
        let h = 1e-6;
        for k in 0..net.n_params() {
            let mut a = net.clone();
            let mut b = net.clone();
            let mut pa = p.clone();
            let mut pb = p.clone();
            pa[k] += h;
            pb[k] -= h;
            a.set_params(&pa).unwrap();
            b.set_params(&pb).unwrap();
            let fd = (loss(&a, &x) - loss(&b, &x)) / (2.0 * h);
            assert_relative_eq!(grad[k], fd, epsilon = 1e-7, max_relative = 1e-6);
        }
        for i in 0..3 {
            for j in 0..2 {
                let mut xa = x.clone();
                let mut xb = x.clone();
                xa[(i, j)] += h;
                xb[(i, j)] -= h;
                let fd = (loss(&net, &xa) - loss(&net, &xb)) / (2.0 * h);
                assert_relative_eq!(xin[(i, j)], fd, epsilon = 1e-7, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn layout_roundtrip_edge_cases() {
        let empty = ParamLayout::new();
        assert!(empty.flatten(&[]).unwrap().is_empty());

        let mut single = ParamLayout::new();
        single.push("s", 1);
        assert_eq!(single.flatten(&[vec![2.5]]).unwrap().len(), 1);

        let mut two = ParamLayout::new();
        two.push("a", 3);
        two.push("b", 5);
        let v = two
            .flatten(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0, 7.0, 8.0]])
            .unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(two.offsets(), vec![0, 3]);
        assert_eq!(two.group_of(4), Some("b"));
        assert!(two.unflatten(&[0.0; 7]).is_err());
        assert!(two.flatten(&[vec![1.0], vec![2.0]]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_identity(groups in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 0..6), 0..6)) {
            let mut layout = ParamLayout::new();
            for (i, g) in groups.iter().enumerate() {
                layout.push(format!("g{i}"), g.len());
            }
            let flat = layout.flatten(&groups).unwrap();
            prop_assert_eq!(layout.unflatten(&flat.values).unwrap(), groups);
        }

        #[test]
        fn parameter_count_matches_shapes(p in 1usize..6, h in prop::collection::vec(1usize..8, 0..4), out in 1usize..4) {
            let s = spec(p, h.clone(), out, Activation::Softplus);
            let mut widths = vec![p];
            widths.extend(&h);
            widths.push(out);
            let expected: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
            prop_assert_eq!(s.n_params(), expected);
            prop_assert_eq!(init_params(&s, 1).len(), expected);
        }

        #[test]
        fn identity_network_is_affine(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let net = Mlp::init(spec(3, vec![4, 4], 2, Activation::Identity), seed);
            let x1 = [0.3, -1.2, 0.8];
            let x2 = [-0.5, 0.4, 1.7];
            let f = |x: &[f64]| net.forward(x).unwrap();
            let f0 = f(&[0.0; 3]);
            let mix: Vec<f64> = x1.iter().zip(&x2).map(|(u, v)| a * u + b * v).collect();
            let lhs = f(&mix);
            let (g1, g2) = (f(&x1), f(&x2));
            for o in 0..2 {
                let rhs = a * (g1[o] - f0[o]) + b * (g2[o] - f0[o]);
                let l = lhs[o] - f0[o];
                prop_assert!((l - rhs).abs() <= 1e-10 * (1.0 + l.abs().max(rhs.abs())));
            }
        }
    }
}
