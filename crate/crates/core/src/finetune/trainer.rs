//! Supervised fine-tuning of a (pre-trained) backbone.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use personvit_tensor::{Graph, OptimMode, OptimState, ParamId, ParamSet, Scalar, Schedule, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{bnneck_train_graph, id_cross_entropy_graph, triplet_batch_hard_graph, NeckState};
use super::sampler::{pk_sample, IdentityIndex};
use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Image, Split};
use crate::error::{Error, IoContext, Result};
use crate::layers::{materialize, Init, ParamSpec};
use crate::model::BACKBONE;
use crate::rng::stream;
use crate::vit::{PatchBatch, Vit, VitConfig};

const TAG_PK: u64 = 0x504b;
const TAG_AUG: u64 = 0x4147;
const TAG_INIT: u64 = 0x4649;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Identities per batch (P).
    pub identities_per_batch: usize,
    /// Images per identity (K).
    pub images_per_identity: usize,
    pub margin: f64,
    pub label_smoothing: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    /// Base learning rate per 64 images.
    pub lr_coefficient: f64,
    pub min_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub neck_momentum: f64,
    pub neck_eps: f64,
    pub flip_prob: f64,
    pub erasing_prob: f64,
    /// Batches per epoch; defaults to train images / batch size.
    pub iters_per_epoch: Option<usize>,
    /// Pre-training checkpoint whose teacher backbone initializes the
    /// model; `None` trains from random initialization.
    pub backbone_checkpoint: Option<PathBuf>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            identities_per_batch: 16,
            images_per_identity: 4,
            margin: super::losses::TRIPLET_MARGIN,
            label_smoothing: 0.1,
            warmup_epochs: 20,
            epochs: 120,
            lr_coefficient: 0.0004,
            min_lr: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            neck_momentum: 0.1,
            neck_eps: 1e-5,
            flip_prob: 0.5,
            erasing_prob: 0.5,
            iters_per_epoch: None,
            backbone_checkpoint: None,
        }
    }
}

/// Fine-tuning base learning rate: `0.0004 * batch / 64`.
pub fn finetune_base_lr(batch_size: usize) -> f64 {
    0.0004 * batch_size as f64 / 64.0
}

impl FinetuneConfig {
    pub fn batch_size(&self) -> usize {
        self.identities_per_batch * self.images_per_identity
    }

    /// Linear warmup from 0 over `warmup_epochs`, then cosine decay to `min_lr`.
    pub fn lr_schedule(&self, iters_per_epoch: u64) -> Schedule {
        let total = iters_per_epoch * self.epochs as u64;
        Schedule::warmup_cosine(self.base_lr(), self.min_lr, iters_per_epoch * self.warmup_epochs as u64, total)
    }

    pub fn base_lr(&self) -> f64 {
        self.lr_coefficient * self.batch_size() as f64 / 64.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities_per_batch == 0 || self.images_per_identity == 0 {
            return Err(Error::Config("finetune P and K must be at least 1".into()));
        }
        if self.images_per_identity < 2 {
            return Err(Error::Config("finetune images_per_identity must be at least 2 for triplet mining".into()));
        }
        if self.identities_per_batch < 2 {
            return Err(Error::Config("finetune identities_per_batch must be at least 2 for triplet mining".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("finetune.margin must be non-negative, got {}", self.margin)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("finetune.label_smoothing must lie in [0, 1), got {}", self.label_smoothing)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("finetune.epochs must be positive".into()));
        }
        for (name, v) in [("flip_prob", self.flip_prob), ("erasing_prob", self.erasing_prob), ("neck_momentum", self.neck_momentum), ("momentum", self.momentum)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("finetune.{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.iters_per_epoch == Some(0) {
            return Err(Error::Config("finetune.iters_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

/// Backbone, neck scale, classifier and neck running statistics.
#[derive(Clone, Debug)]
pub struct ReidModel<T> {
    pub vit: Vit,
    pub params: ParamSet<T>,
    pub neck_scale: ParamId,
    pub classifier: ParamId,
    pub neck: NeckState<T>,
    pub classes: usize,
}

impl<T: Scalar> ReidModel<T> {
    pub fn new(model: &VitConfig, classes: usize, cfg: &FinetuneConfig, seed: u64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("fine-tuning needs at least one training identity".into()));
        }
        let mut rng = stream(seed, &[TAG_INIT]);
        let mut params = ParamSet::new();
        let vit = Vit::init(model, BACKBONE, &mut params, &mut rng)?;
        let d = model.dim;
        let ids = materialize(
            &[
                ParamSpec::new("neck.scale", &[d], Init::Ones, false),
                ParamSpec::new("classifier.weight", &[d, classes], Init::TruncNormal(0.001), true),
            ],
            &mut params,
            &mut rng,
        );
        Ok(Self { vit, params, neck_scale: ids[0], classifier: ids[1], neck: NeckState::new(d, cfg.neck_momentum, cfg.neck_eps), classes })
    }

    /// Copies `teacher.backbone.*` tensors from a pre-training checkpoint.
    pub fn load_pretrained_backbone(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut backbone = crate::model::backbone_params(&self.params);
        ckpt.load_params("teacher.", &mut backbone)?;
        for p in backbone.iter() {
            let id = self.params.id(&p.name).expect("backbone names come from this set");
            *self.params.get_mut(id) = p.value.clone();
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, epoch: u64, step: u64, seed: u64, person_ids: &[u64]) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.epoch = epoch;
        c.step = step;
        c.rng = serde_json::json!({ "seed": seed, "epoch": epoch, "step": step });
        c.meta = serde_json::json!({ "kind": "finetune", "classes": self.classes, "person_ids": person_ids });
        c.insert_params("", &self.params)?;
        let d = self.neck.running_mean.len();
        c.insert_tensor("neck.running_mean", &Tensor::from_vec(&[d], self.neck.running_mean.clone()))?;
        c.insert_tensor("neck.running_var", &Tensor::from_vec(&[d], self.neck.running_var.clone()))?;
        Ok(c)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, model: &VitConfig, cfg: &FinetuneConfig) -> Result<Self> {
        let classes = ckpt.tensor::<T>("classifier.weight")?.shape().get(1).copied().unwrap_or(0);
        let mut m = Self::new(model, classes, cfg, 0)?;
        ckpt.load_params("", &mut m.params)?;
        m.neck.running_mean = ckpt.tensor::<T>("neck.running_mean")?.into_data();
        m.neck.running_var = ckpt.tensor::<T>("neck.running_var")?.into_data();
        if m.neck.running_mean.len() != model.dim || m.neck.running_var.len() != model.dim {
            return Err(Error::Checkpoint("neck statistics do not match the model dim".into()));
        }
        Ok(m)
    }

    /// Retrieval features (`[B, d]`, inference-mode neck) for a batch.
    pub fn embed(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let (cls, _) = self.vit.extract(&self.params, images)?;
        self.neck.infer(&cls, self.params.get(self.neck_scale).data())
    }
}

/// Resizes to the model input size.
pub fn prepare_image(img: &Image, size: [usize; 2]) -> Image {
    img.resize(size[0], size[1])
}

/// Random horizontal flip plus random erasing with uniform noise.
pub fn augment(img: &Image, cfg: &FinetuneConfig, rng: &mut ChaCha8Rng) -> Image {
    let mut out = if rng.gen_bool(cfg.flip_prob) { img.flip_horizontal() } else { img.clone() };
    if rng.gen_bool(cfg.erasing_prob) {
        let (h, w) = (out.height() as f64, out.width() as f64);
        for _ in 0..10 {
            let area = h * w * rng.gen_range(0.02..0.4);
            let aspect = rng.gen_range(0.3f64.ln()..(1.0f64 / 0.3).ln()).exp();
            let eh = (area * aspect).sqrt().round() as usize;
            let ew = (area / aspect).sqrt().round() as usize;
            if eh >= 1 && ew >= 1 && eh < out.height() && ew < out.width() {
                let top = rng.gen_range(0..=out.height() - eh);
                let left = rng.gen_range(0..=out.width() - ew);
                for r in top..top + eh {
                    for c in left..left + ew {
                        for k in 0..3 {
                            out.set(r, c, k, rng.gen::<f32>());
                        }
                    }
                }
                break;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMetrics {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub l_triplet: f64,
    pub l_id: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneSummary {
    pub checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub final_loss: f64,
}

pub const FINETUNE_CHECKPOINT: &str = "finetune_final.pvit";

/// Fine-tunes on the `train` split and writes the final checkpoint.
pub fn run_finetune<T: Scalar>(model: &VitConfig, cfg: &FinetuneConfig, seed: u64, dataset: &Dataset, out_dir: &Path) -> Result<FinetuneSummary> {
    cfg.validate()?;
    model.validate()?;
    let entries = dataset.split(Split::Train);
    if entries.is_empty() {
        return Err(Error::Config("the manifest has no train entries".into()));
    }
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let images = entries
        .iter()
        .map(|e| Ok(prepare_image(&dataset.load_image(e)?, model.img_size)))
        .collect::<Result<Vec<_>>>()?;
    let pids: Vec<u64> = entries.iter().map(|e| e.person_id).collect();
    let index = IdentityIndex::new(&pids);
    let label_of = index.labels();
    let classes = index.identities();
    let mut net = ReidModel::<T>::new(model, classes, cfg, seed)?;
    if let Some(path) = &cfg.backbone_checkpoint {
        let ckpt = Checkpoint::load(path)?;
        net.load_pretrained_backbone(&ckpt)?;
        info!("backbone initialized from teacher weights in {}", path.display());
    }

    let batch = cfg.batch_size();
    let iters = cfg.iters_per_epoch.unwrap_or((images.len() / batch).max(1)) as u64;
    let total = iters * cfg.epochs as u64;
    let lr_s = cfg.lr_schedule(iters);
    let mut optim = OptimState::new(OptimMode::sgd(cfg.momentum), cfg.weight_decay, &net.params);

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut log = std::fs::File::create(&metrics_path).at(&metrics_path)?;
    let mut step = 0u64;
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let (mut sum, mut sum_t, mut sum_i) = (0.0, 0.0, 0.0);
        for it in 0..iters {
            let idx = pk_sample(&index, cfg.identities_per_batch, cfg.images_per_identity, &mut stream(seed, &[TAG_PK, epoch as u64, it]))?;
            let views: Vec<Image> = idx
                .iter()
                .enumerate()
                .map(|(slot, &i)| augment(&images[i], cfg, &mut stream(seed, &[TAG_AUG, epoch as u64, it, slot as u64])))
                .collect();
            let refs: Vec<&Image> = views.iter().collect();
            let labels: Vec<u64> = idx.iter().map(|&i| pids[i]).collect();
            let classes_idx: Vec<usize> = labels.iter().map(|l| label_of[l]).collect();

            let pb = PatchBatch::from_images(model, &refs, None)?;
            let mut g = Graph::new();
            let p = net.params.bind(&mut g, true);
            let out = net.vit.forward(&mut g, &p, &pb, false)?;
            let f_t = out.cls;
            let f_i = bnneck_train_graph(&mut g, &p, net.neck_scale, f_t, cfg.neck_eps)?;
            let logits = g.matmul(f_i, p[net.classifier]);
            let l_tri = triplet_batch_hard_graph(&mut g, f_t, &labels, cfg.margin)?;
            let l_id = id_cross_entropy_graph(&mut g, logits, &classes_idx, cfg.label_smoothing)?;
            let loss = g.add(l_tri, l_id);
            let value = g.item(loss).f64();
            if !value.is_finite() {
                return Err(Error::Contract(format!("non-finite fine-tuning loss at step {step}")));
            }
            let grads = g.backward(loss);
            let gs = p.grads(&net.params, &grads);
            let feats = g.value(f_t).data().to_vec();
            sum_t += g.item(l_tri).f64();
            sum_i += g.item(l_id).f64();
            drop(g);
            let lr = lr_s.value(step)?;
            optim.step(&mut net.params, &gs, lr)?;
            net.neck.update(&feats, idx.len());
            sum += value;
            final_loss = value;
            step += 1;
        }
        let n = iters as f64;
        let m = FinetuneMetrics { epoch, step, loss: sum / n, l_triplet: sum_t / n, l_id: sum_i / n, lr: lr_s.value(step.min(total))? };
        writeln!(log, "{}", serde_json::to_string(&m)?).at(&metrics_path)?;
        info!("finetune epoch {}/{}: loss {:.4} (triplet {:.4}, id {:.4})", epoch + 1, cfg.epochs, m.loss, m.l_triplet, m.l_id);
    }
    let path = out_dir.join(FINETUNE_CHECKPOINT);
    let ids: Vec<u64> = label_of.keys().copied().collect();
    net.to_checkpoint(cfg.epochs as u64, step, seed, &ids)?.save(&path)?;
    Ok(FinetuneSummary { checkpoint: path, metrics_path, final_loss })
}
