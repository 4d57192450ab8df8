//! Parameter layout helpers shared by the encoder and the heads.

use personvit_tensor::{Bound, Graph, ParamId, ParamSet, Scalar, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two std.
    TruncNormal(f64),
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub decay: bool,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init, decay: bool) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init, decay }
    }
}

pub(crate) fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Adds freshly initialized parameters in spec order.
pub(crate) fn materialize<T: Scalar, R: Rng + ?Sized>(specs: &[ParamSpec], params: &mut ParamSet<T>, rng: &mut R) -> Vec<ParamId> {
    specs
        .iter()
        .map(|s| {
            let n: usize = s.shape.iter().product();
            let data: Vec<T> = match s.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::TruncNormal(std) => (0..n).map(|_| T::c(trunc_normal(rng, std))).collect(),
            };
            params.add(s.name.clone(), Tensor::from_vec(&s.shape, data), s.decay)
        })
        .collect()
}

/// Looks up existing parameters by name and checks their shapes.
pub(crate) fn resolve<T: Scalar>(specs: &[ParamSpec], params: &ParamSet<T>) -> Result<Vec<ParamId>> {
    specs
        .iter()
        .map(|s| {
            let id = params.id(&s.name).ok_or_else(|| Error::Contract(format!("missing parameter {}", s.name)))?;
            let have = params.get(id).shape();
            if have != s.shape.as_slice() {
                return Err(Error::Contract(format!("parameter {} has shape {have:?}, expected {:?}", s.name, s.shape)));
            }
            Ok(id)
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn specs(name: &str, fan_in: usize, fan_out: usize, std: f64) -> [ParamSpec; 2] {
        [
            ParamSpec::new(format!("{name}.weight"), &[fan_in, fan_out], Init::TruncNormal(std), true),
            ParamSpec::new(format!("{name}.bias"), &[fan_out], Init::Zeros, false),
        ]
    }

    pub fn take(ids: &mut impl Iterator<Item = ParamId>) -> Self {
        Self { weight: ids.next().unwrap(), bias: ids.next().unwrap() }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p[self.weight]);
        g.add(y, p[self.bias])
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn specs(name: &str, d: usize) -> [ParamSpec; 2] {
        [
            ParamSpec::new(format!("{name}.weight"), &[d], Init::Ones, false),
            ParamSpec::new(format!("{name}.bias"), &[d], Init::Zeros, false),
        ]
    }

    pub fn take(ids: &mut impl Iterator<Item = ParamId>) -> Self {
        Self { weight: ids.next().unwrap(), bias: ids.next().unwrap() }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, eps: f64) -> Var {
        g.layer_norm(x, p[self.weight], p[self.bias], eps)
    }
}
