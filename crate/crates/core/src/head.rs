//! Projection heads: a 3-layer GELU MLP, l2 normalization, then a
//! weight-normalized prototype layer (unit-norm prototypes, fixed gain 1).

use personvit_tensor::{Bound, Graph, ParamId, ParamSet, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{materialize, resolve, Init, Linear, ParamSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    /// Number of prototypes, shared by the cls and patch heads.
    pub out_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden_dim: 512, bottleneck_dim: 128, out_dim: 4096 }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.bottleneck_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ProjectionHead {
    in_dim: usize,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    /// `[out_dim, bottleneck]`, rows normalized at use.
    prototypes: ParamId,
}

/// Prototype parameter name for a head with the given prefix.
pub fn prototype_param_name(prefix: &str) -> String {
    format!("{prefix}.last_layer.weight_v")
}

impl ProjectionHead {
    fn specs(cfg: &HeadConfig, in_dim: usize, prefix: &str) -> Result<Vec<ParamSpec>> {
        cfg.validate()?;
        let mut s = Vec::new();
        s.extend(Linear::specs(&format!("{prefix}.mlp.0"), in_dim, cfg.hidden_dim, 0.02));
        s.extend(Linear::specs(&format!("{prefix}.mlp.1"), cfg.hidden_dim, cfg.hidden_dim, 0.02));
        s.extend(Linear::specs(&format!("{prefix}.mlp.2"), cfg.hidden_dim, cfg.bottleneck_dim, 0.02));
        s.push(ParamSpec::new(prototype_param_name(prefix), &[cfg.out_dim, cfg.bottleneck_dim], Init::TruncNormal(0.02), true));
        Ok(s)
    }

    fn from_ids(in_dim: usize, ids: Vec<ParamId>) -> Self {
        let mut it = ids.into_iter();
        Self {
            in_dim,
            fc1: Linear::take(&mut it),
            fc2: Linear::take(&mut it),
            fc3: Linear::take(&mut it),
            prototypes: it.next().unwrap(),
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(cfg: &HeadConfig, in_dim: usize, prefix: &str, params: &mut ParamSet<T>, rng: &mut R) -> Result<Self> {
        Ok(Self::from_ids(in_dim, materialize(&Self::specs(cfg, in_dim, prefix)?, params, rng)))
    }

    pub fn attach<T: Scalar>(cfg: &HeadConfig, in_dim: usize, prefix: &str, params: &ParamSet<T>) -> Result<Self> {
        Ok(Self::from_ids(in_dim, resolve(&Self::specs(cfg, in_dim, prefix)?, params)?))
    }

    pub fn prototypes(&self) -> ParamId {
        self.prototypes
    }

    /// Maps `[..., in_dim]` to `[..., out_dim]` logits.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let d = *g.shape(x).last().unwrap_or(&0);
        if d != self.in_dim {
            return Err(Error::Contract(format!("head expects feature dim {}, got {d}", self.in_dim)));
        }
        let h = self.fc1.forward(g, p, x);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, p, h);
        let h = g.gelu(h);
        let h = self.fc3.forward(g, p, h);
        let h = g.l2_normalize(h);
        let w = g.l2_normalize(p[self.prototypes]);
        Ok(g.matmul_nt(h, w))
    }
}

/// Outputs of the cls head and, optionally, the patch head.
#[derive(Clone, Debug)]
pub struct HeadOutputs<T> {
    pub y_cls: Vec<T>,
    /// `[n, out_dim]`
    pub y_patches: Option<Tensor<T>>,
}

/// Applies `cls_head` to `z_cls` and, when requested, `patch_head` to every
/// row of `z_patches`.
pub fn project<T: Scalar>(
    params: &ParamSet<T>,
    cls_head: &ProjectionHead,
    patch_head: &ProjectionHead,
    z_cls: &[T],
    z_patches: &Tensor<T>,
    with_patches: bool,
) -> Result<HeadOutputs<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let c = g.constant(Tensor::from_vec(&[1, z_cls.len()], z_cls.to_vec()));
    let y = cls_head.forward(&mut g, &p, c)?;
    let y_cls = g.value(y).data().to_vec();
    let y_patches = if with_patches {
        let z = g.constant(z_patches.clone());
        let y = patch_head.forward(&mut g, &p, z)?;
        Some(g.value(y).clone())
    } else {
        None
    };
    Ok(HeadOutputs { y_cls, y_patches })
}
