//! The pre-training network: a ViT backbone plus cls and patch heads.

use personvit_tensor::{ParamSet, Scalar};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::head::{HeadConfig, ProjectionHead};
use crate::vit::{Vit, VitConfig};

pub const BACKBONE: &str = "backbone";
pub const HEAD_CLS: &str = "head_cls";
pub const HEAD_PATCH: &str = "head_patch";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub vit: VitConfig,
    pub head: HeadConfig,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub vit: Vit,
    pub head_cls: ProjectionHead,
    pub head_patch: ProjectionHead,
}

impl Network {
    pub fn init<T: Scalar, R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Result<(Self, ParamSet<T>)> {
        let mut params = ParamSet::new();
        let vit = Vit::init(&cfg.vit, BACKBONE, &mut params, rng)?;
        let head_cls = ProjectionHead::init(&cfg.head, cfg.vit.dim, HEAD_CLS, &mut params, rng)?;
        let head_patch = ProjectionHead::init(&cfg.head, cfg.vit.dim, HEAD_PATCH, &mut params, rng)?;
        Ok((Self { vit, head_cls, head_patch }, params))
    }

    pub fn attach<T: Scalar>(cfg: &NetworkConfig, params: &ParamSet<T>) -> Result<Self> {
        Ok(Self {
            vit: Vit::attach(&cfg.vit, BACKBONE, params)?,
            head_cls: ProjectionHead::attach(&cfg.head, cfg.vit.dim, HEAD_CLS, params)?,
            head_patch: ProjectionHead::attach(&cfg.head, cfg.vit.dim, HEAD_PATCH, params)?,
        })
    }
}

/// The backbone subset of a parameter set (names kept).
pub fn backbone_params<T: Scalar>(params: &ParamSet<T>) -> ParamSet<T> {
    let mut out = ParamSet::new();
    let prefix = format!("{BACKBONE}.");
    for p in params.iter().filter(|p| p.name.starts_with(&prefix)) {
        out.add(p.name.clone(), p.value.clone(), p.decay);
    }
    out
}
