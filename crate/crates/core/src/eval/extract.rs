//! Embedding extraction from checkpoints and the embedding file format.

use std::path::Path;

use personvit_tensor::{ParamSet, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Image, ManifestEntry};
use crate::error::{Error, Result};
use crate::finetune::{prepare_image, FinetuneConfig, ReidModel};
use crate::model::BACKBONE;
use crate::rng::stream;
use crate::vit::{Vit, VitConfig};

use super::retrieval::EmbeddingSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractMode {
    /// Post-neck features of a fine-tuned model.
    FinetunedNeck,
    /// Raw `z_cls` of the pre-training teacher backbone.
    PretrainCls,
}

/// A frozen feature extractor built from a checkpoint.
pub enum Embedder {
    Finetuned(Box<ReidModel<f32>>),
    Pretrained { vit: Vit, params: ParamSet<f32> },
}

impl Embedder {
    pub fn from_checkpoint(ckpt: &Checkpoint, model: &VitConfig, mode: ExtractMode) -> Result<Self> {
        match mode {
            ExtractMode::FinetunedNeck => {
                let m = ReidModel::from_checkpoint(ckpt, model, &FinetuneConfig::default())?;
                Ok(Self::Finetuned(Box::new(m)))
            }
            ExtractMode::PretrainCls => {
                let mut params = ParamSet::new();
                let vit = Vit::init(model, BACKBONE, &mut params, &mut stream(0, &[]))?;
                ckpt.load_params("teacher.", &mut params)?;
                Ok(Self::Pretrained { vit, params })
            }
        }
    }

    pub fn config(&self) -> &VitConfig {
        match self {
            Self::Finetuned(m) => m.vit.config(),
            Self::Pretrained { vit, .. } => vit.config(),
        }
    }

    /// `[B, d]` features; images are resized to the model input size.
    pub fn embed(&self, images: &[&Image]) -> Result<Tensor<f32>> {
        let [h, w] = self.config().img_size;
        let sized: Vec<Image> = images.iter().map(|img| prepare_image(img, [h, w])).collect();
        let refs: Vec<&Image> = sized.iter().collect();
        match self {
            Self::Finetuned(m) => m.embed(&refs),
            Self::Pretrained { vit, params } => Ok(vit.extract(params, &refs)?.0),
        }
    }
}

/// Embeds `entries` in chunks of `batch_size`, in entry order.
pub fn extract_embeddings(
    embedder: &Embedder,
    dataset: &Dataset,
    entries: &[&ManifestEntry],
    batch_size: usize,
) -> Result<EmbeddingSet> {
    if entries.is_empty() {
        return Err(Error::Contract("no entries to embed".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let chunks: Vec<Tensor<f32>> = entries
        .par_chunks(batch_size)
        .map(|chunk| {
            let images = chunk.iter().map(|e| dataset.load_image(e)).collect::<Result<Vec<_>>>()?;
            embedder.embed(&images.iter().collect::<Vec<_>>())
        })
        .collect::<Result<_>>()?;
    let d = embedder.config().dim;
    let data: Vec<f32> = chunks.into_iter().flat_map(Tensor::into_data).collect();
    EmbeddingSet::new(
        entries.iter().map(|e| e.person_id).collect(),
        entries.iter().map(|e| e.camera_id).collect(),
        Tensor::from_vec(&[entries.len(), d], data),
    )
}

pub fn embeddings_to_checkpoint(set: &EmbeddingSet) -> Result<Checkpoint> {
    let mut c = Checkpoint::new();
    c.meta = serde_json::json!({ "kind": "embeddings" });
    c.insert_tensor("features", &set.features)?;
    c.insert_u64("person_ids", &set.person_ids)?;
    c.insert_u64("camera_ids", &set.camera_ids)?;
    Ok(c)
}

pub fn embeddings_from_checkpoint(c: &Checkpoint) -> Result<EmbeddingSet> {
    EmbeddingSet::new(c.u64s("person_ids")?.to_vec(), c.u64s("camera_ids")?.to_vec(), c.tensor("features")?)
        .map_err(|e| Error::Checkpoint(format!("embedding file: {e}")))
}

pub fn save_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    embeddings_to_checkpoint(set)?.save(path)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    embeddings_from_checkpoint(&Checkpoint::load(path)?)
}
