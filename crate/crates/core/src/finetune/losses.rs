//! Re-identification objectives: batch-hard triplet, label-smoothed ID
//! cross-entropy and the BNNeck normalization.

use std::collections::BTreeMap;

use personvit_tensor::{Bound, Graph, ParamId, Scalar, Tensor, Var};

use crate::error::{Error, Result};

/// Hardest positive / negative per anchor, by Euclidean distance.
#[derive(Clone, Debug, PartialEq)]
pub struct HardTriplets {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Euclidean distance between rows `i` and `j` of a `[B, d]` buffer.
fn row_distance<T: Scalar>(x: &[T], d: usize, i: usize, j: usize) -> f64 {
    x[i * d..(i + 1) * d]
        .iter()
        .zip(&x[j * d..(j + 1) * d])
        .map(|(&a, &b)| {
            let t = (a - b).f64();
            t * t
        })
        .sum::<f64>()
        .sqrt()
}

/// Batch-hard mining; ties go to the lowest index.
pub fn mine_hard<T: Scalar>(features: &[T], dim: usize, labels: &[u64]) -> Result<HardTriplets> {
    let b = labels.len();
    if features.len() != b * dim || dim == 0 {
        return Err(Error::Contract(format!("{} feature values for {b} labels of dim {dim}", features.len())));
    }
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Contract(format!("label {l} has a single instance in the batch")));
    }
    if counts.len() < 2 {
        return Err(Error::Contract("batch-hard mining needs at least two labels".into()));
    }
    let mut positives = Vec::with_capacity(b);
    let mut negatives = Vec::with_capacity(b);
    for a in 0..b {
        let (mut bp, mut dp) = (usize::MAX, f64::NEG_INFINITY);
        let (mut bn, mut dn) = (usize::MAX, f64::INFINITY);
        for j in 0..b {
            if j == a {
                continue;
            }
            let d = row_distance(features, dim, a, j);
            if labels[j] == labels[a] {
                if d > dp {
                    (bp, dp) = (j, d);
                }
            } else if d < dn {
                (bn, dn) = (j, d);
            }
        }
        positives.push(bp);
        negatives.push(bn);
    }
    Ok(HardTriplets { positives, negatives })
}

pub const TRIPLET_MARGIN: f64 = 0.3;

/// Batch-hard triplet loss on the tape: mean over anchors of
/// `max(0, d_ap - d_an + margin)`.
pub fn triplet_batch_hard_graph<T: Scalar>(g: &mut Graph<T>, features: Var, labels: &[u64], margin: f64) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Contract(format!("features {shape:?} do not match {} labels", labels.len())));
    }
    if margin < 0.0 {
        return Err(Error::Config(format!("triplet margin must be non-negative, got {margin}")));
    }
    let hard = mine_hard(g.value(features).data(), shape[1], labels)?;
    let dist = |g: &mut Graph<T>, idx: &[usize]| {
        let other = g.index_select(features, idx);
        let diff = g.sub(features, other);
        let sq = g.square(diff);
        let s = g.sum_axis(sq, 1);
        g.sqrt_clamped(s, 1e-12)
    };
    let dap = dist(g, &hard.positives);
    let dan = dist(g, &hard.negatives);
    let gap = g.sub(dap, dan);
    let gap = g.add_scalar(gap, T::c(margin));
    let hinge = g.relu(gap);
    Ok(g.mean(hinge))
}

/// Batch-hard triplet loss on plain features `[B, d]`.
pub fn triplet_batch_hard<T: Scalar>(features: &Tensor<T>, labels: &[u64], margin: f64) -> Result<T> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let loss = triplet_batch_hard_graph(&mut g, f, labels, margin)?;
    Ok(g.item(loss))
}

/// Smoothed target distribution: `1 - eps` on the label, `eps / (C - 1)`
/// elsewhere (all mass on the label when `C == 1`).
pub fn smoothed_targets(label: usize, classes: usize, eps: f64) -> Vec<f64> {
    if classes == 1 {
        return vec![1.0];
    }
    let off = eps / (classes - 1) as f64;
    (0..classes).map(|c| if c == label { 1.0 - eps } else { off }).collect()
}

/// Label-smoothed cross-entropy on the tape, averaged over the batch.
pub fn id_cross_entropy_graph<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Contract(format!("logits {shape:?} do not match {} labels", labels.len())));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing must lie in [0, 1), got {eps}")));
    }
    let (b, c) = (shape[0], shape[1]);
    let mut w = Vec::with_capacity(b * c);
    for &l in labels {
        if l >= c {
            return Err(Error::Contract(format!("label {l} out of range for {c} classes")));
        }
        w.extend(smoothed_targets(l, c, eps).into_iter().map(|t| T::c(t / b as f64)));
    }
    let ls = g.log_softmax(logits);
    let w = g.constant(Tensor::from_vec(&shape, w));
    let prod = g.mul(ls, w);
    let s = g.sum(prod);
    Ok(g.neg(s))
}

pub fn id_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize], eps: f64) -> Result<T> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = id_cross_entropy_graph(&mut g, l, labels, eps)?;
    Ok(g.item(loss))
}

/// Running statistics of the BNNeck (its scale is a trainable parameter,
/// its bias is fixed at zero).
#[derive(Clone, Debug, PartialEq)]
pub struct NeckState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> NeckState<T> {
    pub fn new(dim: usize, momentum: f64, eps: f64) -> Self {
        Self { running_mean: vec![T::zero(); dim], running_var: vec![T::one(); dim], momentum, eps }
    }

    /// Blends batch statistics into the running estimates (unbiased variance).
    pub fn update(&mut self, features: &[T], rows: usize) {
        let d = self.running_mean.len();
        let (mean, var) = moments(features, rows, d);
        let m = self.momentum;
        let unbias = rows as f64 / (rows - 1) as f64;
        for j in 0..d {
            self.running_mean[j] = T::c((1.0 - m) * self.running_mean[j].f64() + m * mean[j]);
            self.running_var[j] = T::c((1.0 - m) * self.running_var[j].f64() + m * var[j] * unbias);
        }
    }

    /// Inference-mode neck on `[B, d]` features.
    pub fn infer(&self, features: &Tensor<T>, scale: &[T]) -> Result<Tensor<T>> {
        let d = self.running_mean.len();
        if features.last_dim() != d || scale.len() != d {
            return Err(Error::Contract(format!("neck of dim {d} applied to {:?}", features.shape())));
        }
        let mut out = features.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for j in 0..d {
                let denom = (self.running_var[j].f64() + self.eps).sqrt();
                row[j] = T::c((row[j] - self.running_mean[j]).f64() / denom) * scale[j];
            }
        }
        Ok(out)
    }
}

/// Per-column mean and biased variance of a `[rows, d]` buffer.
fn moments<T: Scalar>(x: &[T], rows: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v.f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for j in 0..d {
            let t = row[j].f64() - mean[j];
            var[j] += t * t;
        }
    }
    var.iter_mut().for_each(|v| *v /= rows as f64);
    (mean, var)
}

/// Training-mode neck on the tape: batch-normalize `[B, d]` features and
/// multiply by the learned scale.
pub fn bnneck_train_graph<T: Scalar>(g: &mut Graph<T>, p: &Bound, scale: ParamId, features: Var, eps: f64) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::Contract(format!("training-mode neck needs a batch of at least 2, got {shape:?}")));
    }
    let mean = g.mean_axis(features, 0);
    let centered = g.sub(features, mean);
    let sq = g.square(centered);
    let var = g.mean_axis(sq, 0);
    let var = g.add_scalar(var, T::c(eps));
    let std = g.sqrt_clamped(var, 0.0);
    let normed = g.div(centered, std);
    Ok(g.mul(normed, p[scale]))
}

/// Stand-alone neck: training mode normalizes with batch statistics and
/// updates the running estimates; inference mode uses the running estimates.
pub fn bnneck_forward<T: Scalar>(features: &Tensor<T>, state: &mut NeckState<T>, scale: &[T], training: bool) -> Result<Tensor<T>> {
    if !training {
        return state.infer(features, scale);
    }
    let d = state.running_mean.len();
    if features.ndim() != 2 || features.last_dim() != d || scale.len() != d {
        return Err(Error::Contract(format!("neck of dim {d} applied to {:?}", features.shape())));
    }
    let rows = features.shape()[0];
    if rows < 2 {
        return Err(Error::Contract("training-mode neck needs a batch of at least 2".into()));
    }
    let mut g = Graph::new();
    let s = g.constant(Tensor::from_vec(&[d], scale.to_vec()));
    let p = Bound::from_vars(vec![s]);
    let f = g.constant(features.clone());
    let out = bnneck_train_graph(&mut g, &p, ParamId::from_index(0), f, state.eps)?;
    state.update(features.data(), rows);
    Ok(g.value(out).clone())
}
