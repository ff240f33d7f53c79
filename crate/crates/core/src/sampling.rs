//! Random kernel configurations for property checks and benchmarks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::covariance::{Covariance, Kernel};
use crate::error::Result;
use crate::kernels::{BaseKernel, BaseKernelKind, Coefficient, FeatureMap, KernelExpr, MaternNu};
use crate::neural::{Activation, Mlp, MlpSpec};
use crate::seek::{DeepKernel, GibbsKernel, SeekActivation, SeekKernel, WeightNets};

/// Kernel families drawn by [`random_kernel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Seek,
    Gibbs,
    Deep,
    Algebra,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Seek, Family::Gibbs, Family::Deep, Family::Algebra];
}

pub fn random_kind(rng: &mut ChaCha8Rng) -> BaseKernelKind {
    match rng.random_range(0..6) {
        0 => BaseKernelKind::Gaussian,
        1 => BaseKernelKind::Matern(MaternNu::Half),
        2 => BaseKernelKind::Matern(MaternNu::ThreeHalves),
        3 => BaseKernelKind::Matern(MaternNu::FiveHalves),
        4 => BaseKernelKind::Periodic { period: 1.0 },
        _ => BaseKernelKind::PowerExponential { gamma: 1.0 },
    }
}

fn random_activation(rng: &mut ChaCha8Rng) -> Activation {
    [Activation::Softplus, Activation::Tanh, Activation::Identity][rng.random_range(0..3)]
}

fn random_net(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Result<Mlp> {
    let depth = rng.random_range(0..3);
    let hidden = (0..depth).map(|_| rng.random_range(1..6)).collect();
    let spec = MlpSpec::new(input, hidden, output, random_activation(rng))?;
    Ok(Mlp::init(spec, rng.random()))
}

fn random_base(rng: &mut ChaCha8Rng, dim: usize) -> Result<BaseKernel> {
    BaseKernel::unit(random_kind(rng), dim)
}

/// A SEEK kernel with `m` bases and random networks and activation.
pub fn random_seek(rng: &mut ChaCha8Rng, dim: usize, m: usize, activation: SeekActivation) -> Result<SeekKernel> {
    let bases = (0..m).map(|_| random_base(rng, dim)).collect::<Result<Vec<_>>>()?;
    let weights = if m > 0 && rng.random_bool(0.3) {
        let widths: Vec<usize> = (0..m).map(|_| rng.random_range(1..4)).collect();
        let net = random_net(rng, dim, widths.iter().sum())?;
        WeightNets::Shared { net, widths }
    } else {
        let nets = (0..m)
            .map(|_| {
                let w = rng.random_range(1..4);
                random_net(rng, dim, w)
            })
            .collect::<Result<Vec<_>>>()?;
        WeightNets::PerKernel(nets)
    };
    let bias_outputs = if m == 0 { rng.random_range(1..4) } else { rng.random_range(0..4) };
    let bias = if bias_outputs > 0 {
        Some(random_net(rng, dim, bias_outputs)?)
    } else {
        None
    };
    SeekKernel::new(bases, weights, bias, activation)
}

fn random_coefficient(rng: &mut ChaCha8Rng) -> Result<Coefficient> {
    let v = rng.random_range(0.05..3.0);
    if rng.random_bool(0.5) {
        Coefficient::learnable(v)
    } else {
        Ok(Coefficient::Fixed(v))
    }
}

/// A random algebra tree over `dim` inputs, at most `depth` levels deep.
pub fn random_expr(rng: &mut ChaCha8Rng, dim: usize, depth: usize) -> Result<KernelExpr> {
    if depth == 0 {
        return Ok(KernelExpr::base(random_base(rng, dim)?));
    }
    Ok(match rng.random_range(0..5) {
        0 => KernelExpr::base(random_base(rng, dim)?),
        1 => KernelExpr::scale(random_coefficient(rng)?, random_expr(rng, dim, depth - 1)?),
        2 => KernelExpr::sum(
            random_coefficient(rng)?,
            random_expr(rng, dim, depth - 1)?,
            random_coefficient(rng)?,
            random_expr(rng, dim, depth - 1)?,
        ),
        3 => KernelExpr::product(random_expr(rng, dim, depth - 1)?, random_expr(rng, dim, depth - 1)?),
        _ => {
            let out = rng.random_range(1..4);
            let net = random_net(rng, dim, out)?;
            KernelExpr::warp(FeatureMap::Mlp(net), random_expr(rng, out, depth - 1)?)
        }
    })
}

/// A kernel of the given family with randomized structure and parameters.
pub fn random_kernel(rng: &mut ChaCha8Rng, family: Family, dim: usize) -> Result<Kernel> {
    let mut k = match family {
        Family::Seek => {
            let m = rng.random_range(0..=6);
            let act = SeekActivation::ALL[rng.random_range(0..4)];
            Kernel::Seek(random_seek(rng, dim, m, act)?)
        }
        Family::Gibbs => {
            let depth = rng.random_range(0..3);
            let hidden = (0..depth).map(|_| rng.random_range(1..4 * dim + 1)).collect();
            let spec = MlpSpec::new(dim, hidden, dim, random_activation(rng))?;
            Kernel::Gibbs(GibbsKernel::new(Mlp::init(spec, rng.random()))?)
        }
        Family::Deep => {
            let out = rng.random_range(1..=dim);
            let net = random_net(rng, dim, out)?;
            Kernel::Deep(DeepKernel::new(net, random_base(rng, out)?)?)
        }
        Family::Algebra => Kernel::Expr(random_expr(rng, dim, 3)?),
    };
    k.reinitialize(rng);
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn every_family_builds_and_evaluates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for family in Family::ALL {
            for dim in 1..4 {
                let k = random_kernel(&mut rng, family, dim).unwrap();
                assert_eq!(k.input_dim(), dim);
                let x = vec![0.1; dim];
                assert!(k.eval(&x, &x).unwrap().is_finite());
            }
        }
    }
}
