//! The pre-training loop.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use personvit_tensor::{Bound, GradSet, Graph, OptimMode, OptimState, ParamSet, Scalar, Schedule, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::losses::{check_weights, dino_loss_graph, masked_cross_entropy, masked_rows, pretrain_base_lr_with, teacher_distribution, update_center};
use crate::checkpoint::Checkpoint;
use crate::data::{multi_crop_views, sample_block_mask, CropParams, Dataset, Image, MaskPattern, Split};
use crate::error::{Error, IoContext, Result};
use crate::head::HeadConfig;
use crate::model::{Network, NetworkConfig};
use crate::rng::stream;
use crate::vit::{PatchBatch, VitConfig};

const TAG_SHUFFLE: u64 = 0x5348;
const TAG_VIEWS: u64 = 0x5649;
const TAG_INIT: u64 = 0x494e;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adamw,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub lambda_dino: f64,
    pub lambda_mim: f64,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub teacher_temp_final: f64,
    pub teacher_temp_warmup_epochs: usize,
    pub center_momentum: f64,
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub checkpoint_interval: usize,
    /// Base learning rate per 256 images.
    pub lr_coefficient: f64,
    pub lr_cap: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub weight_decay_end: f64,
    pub ema_momentum: f64,
    pub ema_momentum_end: f64,
    pub freeze_last_layer_epochs: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_grad: f64,
    pub optimizer: OptimizerKind,
    pub head: HeadConfig,
    pub crops: CropParams,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lambda_dino: 1.0,
            lambda_mim: 1.0,
            student_temp: 0.1,
            teacher_temp: 0.04,
            teacher_temp_final: 0.07,
            teacher_temp_warmup_epochs: 30,
            center_momentum: 0.9,
            mask_ratio: 0.3,
            epochs: 100,
            batch_size: 64,
            checkpoint_interval: 20,
            lr_coefficient: 0.0005,
            lr_cap: 0.002,
            min_lr: 1e-6,
            warmup_epochs: 10,
            weight_decay: 0.04,
            weight_decay_end: 0.4,
            ema_momentum: 0.996,
            ema_momentum_end: 1.0,
            freeze_last_layer_epochs: 1,
            clip_grad: 3.0,
            optimizer: OptimizerKind::Adamw,
            head: HeadConfig::default(),
            crops: CropParams::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_weights(self.lambda_dino, self.lambda_mim)?;
        for (name, t) in [("student_temp", self.student_temp), ("teacher_temp", self.teacher_temp), ("teacher_temp_final", self.teacher_temp_final)] {
            if !(t > 0.0) {
                return Err(Error::Config(format!("pretrain.{name} must be positive, got {t}")));
            }
        }
        for (name, v) in [("center_momentum", self.center_momentum), ("ema_momentum", self.ema_momentum), ("ema_momentum_end", self.ema_momentum_end), ("mask_ratio", self.mask_ratio)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("pretrain.{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("pretrain.checkpoint_interval must be at least 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("pretrain.epochs and pretrain.batch_size must be positive".into()));
        }
        if self.lr_coefficient < 0.0 || self.lr_cap < 0.0 || self.min_lr < 0.0 || self.weight_decay < 0.0 || self.weight_decay_end < 0.0 {
            return Err(Error::Config("learning rates and weight decay must be non-negative".into()));
        }
        self.head.validate()?;
        self.crops.validate()
    }

    /// Base learning rate for the configured batch size.
    pub fn base_lr(&self) -> f64 {
        pretrain_base_lr_with(self.lr_coefficient, self.lr_cap, self.batch_size)
    }

    /// Teacher temperature: linear warmup by epoch, then constant.
    pub fn teacher_temp_at(&self, epoch: usize) -> f64 {
        let w = self.teacher_temp_warmup_epochs;
        if w == 0 || epoch >= w {
            self.teacher_temp_final
        } else {
            self.teacher_temp + (self.teacher_temp_final - self.teacher_temp) * epoch as f64 / w as f64
        }
    }

    pub fn network(&self, model: &VitConfig) -> NetworkConfig {
        NetworkConfig { vit: VitConfig { img_size: self.crops.global_size, ..model.clone() }, head: self.head.clone() }
    }
}

/// Hash identifying a pre-training configuration (for resume checks).
pub fn config_hash(model: &VitConfig, cfg: &PretrainConfig, seed: u64) -> String {
    let json = serde_json::to_vec(&(model, cfg, seed)).expect("configs serialize");
    hex::encode(Sha256::digest(&json))
}

/// Student, teacher, centers and optimizer.
#[derive(Clone, Debug)]
pub struct PretrainState<T> {
    pub net: Network,
    pub student: ParamSet<T>,
    pub teacher: ParamSet<T>,
    pub center_cls: Vec<T>,
    pub center_patch: Vec<T>,
    pub optim: OptimState<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
}

fn optim_mode(kind: OptimizerKind) -> OptimMode {
    match kind {
        OptimizerKind::Adamw => OptimMode::adamw(),
        OptimizerKind::Sgd => OptimMode::sgd(0.9),
    }
}

impl<T: Scalar> PretrainState<T> {
    pub fn new(model: &VitConfig, cfg: &PretrainConfig, seed: u64) -> Result<Self> {
        let (net, student) = Network::init::<T, _>(&cfg.network(model), &mut stream(seed, &[TAG_INIT]))?;
        let k = cfg.head.out_dim;
        Ok(Self {
            net,
            teacher: student.clone(),
            optim: OptimState::new(optim_mode(cfg.optimizer), cfg.weight_decay, &student),
            student,
            center_cls: vec![T::zero(); k],
            center_patch: vec![T::zero(); k],
            epoch: 0,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, config_hash: &str, seed: u64) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.config_hash = config_hash.into();
        c.epoch = self.epoch as u64;
        c.step = self.step;
        c.rng = serde_json::json!({ "seed": seed, "epoch": self.epoch, "step": self.step });
        c.meta = serde_json::json!({ "kind": "pretrain", "optimizer_steps": self.optim.step_count() });
        c.insert_params("student.", &self.student)?;
        c.insert_params("teacher.", &self.teacher)?;
        let k = self.center_cls.len();
        c.insert_tensor("center.cls", &Tensor::from_vec(&[k], self.center_cls.clone()))?;
        c.insert_tensor("center.patch", &Tensor::from_vec(&[k], self.center_patch.clone()))?;
        for (i, p) in self.student.iter().enumerate() {
            let shape = p.value.shape();
            if let Some(m) = self.optim.first_moments().get(i) {
                c.insert_tensor(format!("optim.m.{}", p.name), &Tensor::from_vec(shape, m.clone()))?;
            }
            if let Some(v) = self.optim.second_moments().get(i) {
                c.insert_tensor(format!("optim.v.{}", p.name), &Tensor::from_vec(shape, v.clone()))?;
            }
        }
        Ok(c)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, model: &VitConfig, cfg: &PretrainConfig) -> Result<Self> {
        let mut s = Self::new(model, cfg, 0)?;
        ckpt.load_params("student.", &mut s.student)?;
        ckpt.load_params("teacher.", &mut s.teacher)?;
        s.center_cls = ckpt.tensor::<T>("center.cls")?.into_data();
        s.center_patch = ckpt.tensor::<T>("center.patch")?.into_data();
        let moments = |tag: &str| -> Result<Vec<Vec<T>>> {
            s.student
                .iter()
                .map(|p| Ok(ckpt.tensor::<T>(&format!("optim.{tag}.{}", p.name))?.into_data()))
                .collect()
        };
        let first = moments("m")?;
        let second = match cfg.optimizer {
            OptimizerKind::Adamw => moments("v")?,
            OptimizerKind::Sgd => Vec::new(),
        };
        let steps = ckpt.meta.get("optimizer_steps").and_then(serde_json::Value::as_u64).unwrap_or(ckpt.step);
        s.optim = OptimState::from_parts(optim_mode(cfg.optimizer), cfg.weight_decay, steps, first, second);
        s.epoch = ckpt.epoch as usize;
        s.step = ckpt.step;
        Ok(s)
    }
}

/// Views and masks for one image.
pub struct ItemViews {
    pub teacher_globals: Vec<Image>,
    pub student_globals: Vec<Image>,
    pub locals: Vec<Image>,
    pub masks: Vec<MaskPattern>,
}

/// Builds the multi-crop views and the two student-global masks for one
/// item from its own RNG stream.
pub fn build_item(img: &Image, model: &VitConfig, cfg: &PretrainConfig, seed: u64, coords: &[u64]) -> Result<ItemViews> {
    let mut parts = vec![TAG_VIEWS];
    parts.extend_from_slice(coords);
    let mut rng = stream(seed, &parts);
    let views = multi_crop_views(img, &cfg.crops, &mut rng)?;
    let [h, w] = cfg.crops.global_size;
    let (gh, gw) = model.grid(h, w)?;
    let masks = (0..views.student_globals.len())
        .map(|_| sample_block_mask(gh, gw, cfg.mask_ratio, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(ItemViews { teacher_globals: views.teacher_globals, student_globals: views.student_globals, locals: views.locals, masks })
}

/// Student-side inputs, grouped view-major (`[view, item]`).
pub struct StudentBatch<T> {
    pub batch: usize,
    /// Two masked global views, `2 * batch` images.
    pub globals: PatchBatch<T>,
    /// `local_views * batch` images.
    pub locals: Option<PatchBatch<T>>,
    pub local_views: usize,
}

/// Teacher-side targets (already centered and sharpened).
pub struct TeacherTargets<T> {
    /// Per global view, `[batch, K]`.
    pub cls: Vec<Tensor<T>>,
    /// `[2 * batch, n, K]`, present when the MIM term is active.
    pub patches: Option<Tensor<T>>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_dino: f64,
    pub lambda_mim: f64,
    pub student_temp: f64,
}

pub struct StudentLoss {
    pub total: personvit_tensor::Var,
    pub dino: personvit_tensor::Var,
    pub mim: Option<personvit_tensor::Var>,
    pub masked: usize,
}

/// Assembles per-item views into teacher and student batches.
pub fn assemble<T: Scalar>(model: &VitConfig, items: &[ItemViews]) -> Result<(PatchBatch<T>, StudentBatch<T>)> {
    let b = items.len();
    let gviews = 2;
    let view_major = |f: &dyn Fn(&ItemViews) -> &Vec<Image>, views: usize| -> Vec<&Image> {
        (0..views).flat_map(|v| items.iter().map(move |it| &f(it)[v])).collect()
    };
    let teacher = PatchBatch::from_images(model, &view_major(&|it| &it.teacher_globals, gviews), None)?;
    let masks: Vec<&MaskPattern> = (0..gviews).flat_map(|v| items.iter().map(move |it| &it.masks[v])).collect();
    let globals = PatchBatch::from_images(model, &view_major(&|it| &it.student_globals, gviews), Some(&masks))?;
    let local_views = items.first().map_or(0, |it| it.locals.len());
    let locals = if local_views > 0 {
        Some(PatchBatch::from_images(model, &view_major(&|it| &it.locals, local_views), None)?)
    } else {
        None
    };
    Ok((teacher, StudentBatch { batch: b, globals, locals, local_views }))
}

/// Teacher forward (no gradient): cls logits `[2B, K]` and, when requested,
/// patch logits `[2B, n, K]`.
pub fn teacher_forward<T: Scalar>(net: &Network, teacher: &ParamSet<T>, globals: &PatchBatch<T>, with_patches: bool) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let mut g = Graph::new();
    let p = teacher.bind(&mut g, false);
    let out = net.vit.forward(&mut g, &p, globals, false)?;
    let cls = net.head_cls.forward(&mut g, &p, out.cls)?;
    let cls = g.value(cls).clone();
    let patches = if with_patches {
        let y = net.head_patch.forward(&mut g, &p, out.patches)?;
        Some(g.value(y).clone())
    } else {
        None
    };
    Ok((cls, patches))
}

/// Builds the centered, sharpened teacher targets.
pub fn teacher_targets<T: Scalar>(cls_logits: &Tensor<T>, patch_logits: Option<&Tensor<T>>, center_cls: &[T], center_patch: &[T], tau_t: f64) -> Result<TeacherTargets<T>> {
    let k = cls_logits.last_dim();
    let b = cls_logits.shape()[0] / 2;
    let probs = teacher_distribution(cls_logits, center_cls, tau_t)?;
    let cls = (0..2)
        .map(|v| Tensor::from_vec(&[b, k], probs.data()[v * b * k..(v + 1) * b * k].to_vec()))
        .collect();
    let patches = patch_logits.map(|l| teacher_distribution(l, center_patch, tau_t)).transpose()?;
    Ok(TeacherTargets { cls, patches })
}

/// The student objective on a tape: DINO over all view pairs plus MIM over
/// the masked positions of the two global views.
pub fn student_loss<T: Scalar>(net: &Network, g: &mut Graph<T>, p: &Bound, batch: &StudentBatch<T>, targets: &TeacherTargets<T>, w: LossWeights) -> Result<StudentLoss> {
    let b = batch.batch;
    let gout = net.vit.forward(g, p, &batch.globals, false)?;
    let gcls = net.head_cls.forward(g, p, gout.cls)?;
    let mut views = vec![g.narrow(gcls, 0, 0, b), g.narrow(gcls, 0, b, b)];
    if let Some(locals) = &batch.locals {
        let lout = net.vit.forward(g, p, locals, false)?;
        let lcls = net.head_cls.forward(g, p, lout.cls)?;
        for v in 0..batch.local_views {
            views.push(g.narrow(lcls, 0, v * b, b));
        }
    }
    let dino = dino_loss_graph(g, &targets.cls, &views, w.student_temp)?;
    let mut total = g.scale(dino, T::c(w.lambda_dino));
    let mut mim = None;
    let mut masked = 0;
    if w.lambda_mim > 0.0 {
        let probs = targets
            .patches
            .as_ref()
            .ok_or_else(|| Error::Contract("MIM term active but no teacher patch targets".into()))?;
        let n = batch.globals.tokens();
        let bits = batch.globals.mask.as_deref().ok_or_else(|| Error::Contract("student globals carry no masks".into()))?;
        let sel = masked_rows(bits, 2, b, n);
        masked = sel.rows.len();
        let loss = if sel.rows.is_empty() {
            g.constant(Tensor::scalar(T::zero()))
        } else {
            let d = net.vit.config().dim;
            let flat = g.reshape(gout.patches, &[2 * b * n, d]);
            let z = g.index_select(flat, &sel.rows);
            let logits = net.head_patch.forward(g, p, z)?;
            let k = probs.last_dim();
            let mut rows = Vec::with_capacity(sel.rows.len() * k);
            for &r in &sel.rows {
                rows.extend_from_slice(&probs.data()[r * k..(r + 1) * k]);
            }
            masked_cross_entropy(g, rows, logits, &sel.weights, w.student_temp)
        };
        let weighted = g.scale(loss, T::c(w.lambda_mim));
        total = g.add(total, weighted);
        mim = Some(loss);
    }
    Ok(StudentLoss { total, dino, mim, masked })
}

/// Per-step scalars written to the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: u64,
    pub l_dino: f64,
    pub l_mim: f64,
    pub lr: f64,
    pub lambda_ema: f64,
    pub masked_fraction: f64,
}

/// Step-dependent hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct StepSchedule {
    pub lr: f64,
    pub weight_decay: f64,
    pub ema: f64,
    pub teacher_temp: f64,
    pub freeze_last_layer: bool,
}

/// One optimization step on a batch of prepared items.
pub fn train_step<T: Scalar>(state: &mut PretrainState<T>, cfg: &PretrainConfig, items: &[ItemViews], sched: StepSchedule) -> Result<StepMetrics> {
    let model = state.net.vit.config().clone();
    let (teacher_batch, student_batch) = assemble::<T>(&model, items)?;
    let with_patches = cfg.lambda_mim > 0.0;
    let (tcls, tpatch) = teacher_forward(&state.net, &state.teacher, &teacher_batch, with_patches)?;
    let targets = teacher_targets(&tcls, tpatch.as_ref(), &state.center_cls, &state.center_patch, sched.teacher_temp)?;

    let mut g = Graph::new();
    let p = state.student.bind(&mut g, true);
    let w = LossWeights { lambda_dino: cfg.lambda_dino, lambda_mim: cfg.lambda_mim, student_temp: cfg.student_temp };
    let loss = student_loss(&state.net, &mut g, &p, &student_batch, &targets, w)?;
    let l_dino = g.item(loss.dino).f64();
    let l_mim = loss.mim.map_or(0.0, |v| g.item(v).f64());
    let total = g.item(loss.total).f64();
    if !total.is_finite() {
        return Err(Error::Contract(format!("non-finite loss {total} at step {}", state.step)));
    }
    let grads = g.backward(loss.total);
    let mut gs: GradSet<T> = p.grads(&state.student, &grads);
    drop(g);
    if sched.freeze_last_layer {
        for id in [state.net.head_cls.prototypes(), state.net.head_patch.prototypes()] {
            gs.get_mut(id).iter_mut().for_each(|v| *v = T::zero());
        }
    }
    if cfg.clip_grad > 0.0 {
        gs.clip_global_norm(cfg.clip_grad);
    }
    state.optim.weight_decay = sched.weight_decay;
    state.optim.step(&mut state.student, &gs, sched.lr)?;
    super::losses::ema_update(&mut state.teacher, &state.student, sched.ema)?;
    update_center(&mut state.center_cls, &tcls, cfg.center_momentum)?;
    if let Some(tp) = &tpatch {
        update_center(&mut state.center_patch, tp, cfg.center_momentum)?;
    }
    let positions = student_batch.globals.batch * student_batch.globals.tokens();
    let metrics = StepMetrics {
        epoch: state.epoch,
        step: state.step,
        l_dino,
        l_mim,
        lr: sched.lr,
        lambda_ema: sched.ema,
        masked_fraction: if with_patches { loss.masked as f64 / positions as f64 } else { 0.0 },
    };
    if with_patches && loss.masked == 0 {
        warn!("step {}: no masked positions, MIM loss is zero", state.step);
    }
    state.step += 1;
    Ok(metrics)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Threads for view construction; results do not depend on it.
    pub workers: usize,
    /// Continue from this checkpoint (its config hash must match).
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub steps: u64,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("pretrain_epoch{epoch:04}.pvit")
}

/// Runs pre-training on the `pretrain` split of `dataset`.
pub fn run_pretrain<T: Scalar>(model: &VitConfig, cfg: &PretrainConfig, seed: u64, dataset: &Dataset, out_dir: &Path, opts: &RunOptions) -> Result<PretrainSummary> {
    cfg.validate()?;
    let net_cfg = cfg.network(model);
    net_cfg.vit.validate()?;
    net_cfg.vit.grid(cfg.crops.local_size[0], cfg.crops.local_size[1])?;
    let entries = dataset.split(Split::Pretrain);
    if entries.is_empty() {
        return Err(Error::Config("the manifest has no pretrain entries".into()));
    }
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let images = entries.iter().map(|e| dataset.load_image(e)).collect::<Result<Vec<_>>>()?;

    let hash = config_hash(model, cfg, seed);
    let mut state = match &opts.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config_hash != hash {
                return Err(Error::Config(format!(
                    "{} was written by a different configuration (hash {} != {hash})",
                    path.display(),
                    ckpt.config_hash
                )));
            }
            PretrainState::<T>::from_checkpoint(&ckpt, model, cfg)?
        }
        None => PretrainState::<T>::new(model, cfg, seed)?,
    };

    let batch = cfg.batch_size.min(images.len());
    let steps_per_epoch = (images.len() / batch) as u64;
    let total = steps_per_epoch * cfg.epochs as u64;
    let lr_s = Schedule::warmup_cosine(cfg.base_lr(), cfg.min_lr, steps_per_epoch * cfg.warmup_epochs as u64, total);
    let wd_s = Schedule::cosine(cfg.weight_decay, cfg.weight_decay_end, total);
    let ema_s = Schedule::cosine(cfg.ema_momentum, cfg.ema_momentum_end, total);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(opts.resume.is_some())
        .write(true)
        .truncate(opts.resume.is_none())
        .open(&metrics_path)
        .at(&metrics_path)?;
    let mut checkpoints = Vec::new();
    let mut final_checkpoint = None;

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut stream(seed, &[TAG_SHUFFLE, epoch as u64]));
        let (mut sum_dino, mut sum_mim) = (0.0, 0.0);
        for s in 0..steps_per_epoch as usize {
            let idx = &order[s * batch..(s + 1) * batch];
            let items: Vec<ItemViews> = pool.install(|| {
                use rayon::prelude::*;
                idx.par_iter()
                    .enumerate()
                    .map(|(slot, &i)| build_item(&images[i], model, cfg, seed, &[epoch as u64, s as u64, slot as u64]))
                    .collect::<Result<Vec<_>>>()
            })?;
            let step = state.step;
            let sched = StepSchedule {
                lr: lr_s.value(step)?,
                weight_decay: wd_s.value(step)?,
                ema: ema_s.value(step)?,
                teacher_temp: cfg.teacher_temp_at(epoch),
                freeze_last_layer: epoch < cfg.freeze_last_layer_epochs,
            };
            let m = train_step(&mut state, cfg, &items, sched)?;
            sum_dino += m.l_dino;
            sum_mim += m.l_mim;
            let line = serde_json::to_string(&m)?;
            writeln!(log, "{line}").at(&metrics_path)?;
        }
        state.epoch += 1;
        info!(
            "epoch {}/{}: l_dino {:.4} l_mim {:.4}",
            state.epoch,
            cfg.epochs,
            sum_dino / steps_per_epoch as f64,
            sum_mim / steps_per_epoch as f64
        );
        if state.epoch % cfg.checkpoint_interval == 0 || state.epoch == cfg.epochs {
            let path = out_dir.join(checkpoint_name(state.epoch));
            state.to_checkpoint(&hash, seed)?.save(&path)?;
            checkpoints.push(path.clone());
            final_checkpoint = Some(path);
        }
    }
    log.flush().at(&metrics_path)?;
    let final_checkpoint = match final_checkpoint {
        Some(p) => p,
        None => {
            let path = out_dir.join(checkpoint_name(state.epoch));
            state.to_checkpoint(&hash, seed)?.save(&path)?;
            path
        }
    };
    Ok(PretrainSummary { checkpoints, final_checkpoint, metrics_path, steps: state.step })
}
