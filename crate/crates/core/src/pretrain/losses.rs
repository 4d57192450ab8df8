//! Self-distillation objectives, centering and the EMA teacher update.

use personvit_tensor::{ops, Graph, ParamSet, Scalar, Tensor, Var};

use crate::data::MaskPattern;
use crate::error::{Error, Result};

fn check_temperature(name: &str, tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} temperature must be positive, got {tau}")))
    }
}

/// `softmax((logits - center) / tau_t)` over the last axis.
pub fn teacher_distribution<T: Scalar>(logits: &Tensor<T>, center: &[T], tau_t: f64) -> Result<Tensor<T>> {
    check_temperature("teacher", tau_t)?;
    if center.len() != logits.last_dim() {
        return Err(Error::Contract(format!("center has {} entries, logits have {}", center.len(), logits.last_dim())));
    }
    let mut shifted = logits.clone();
    for row in shifted.data_mut().chunks_exact_mut(center.len()) {
        for (v, &c) in row.iter_mut().zip(center) {
            *v -= c;
        }
    }
    Ok(ops::softmax(&shifted, tau_t)?)
}

/// `center <- m * center + (1 - m) * mean(rows of logits)`.
pub fn update_center<T: Scalar>(center: &mut [T], logits: &Tensor<T>, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("center momentum {momentum} must lie in [0, 1]")));
    }
    let k = center.len();
    if logits.last_dim() != k {
        return Err(Error::Contract(format!("center has {k} entries, logits have {}", logits.last_dim())));
    }
    let rows = logits.numel() / k;
    if rows == 0 {
        return Err(Error::Contract("cannot update the center from an empty batch".into()));
    }
    let mut mean = vec![0.0f64; k];
    for row in logits.data().chunks_exact(k) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v.f64();
        }
    }
    let (m, inv) = (T::c(momentum), 1.0 / rows as f64);
    for (c, s) in center.iter_mut().zip(mean) {
        *c = m * *c + (T::one() - m) * T::c(s * inv);
    }
    Ok(())
}

/// Ordered (teacher view, student view) pairs that enter the DINO loss:
/// every student view against both teacher globals, except the student
/// global that shares the teacher view's geometry.
pub fn dino_pairs(student_views: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for s in 0..student_views {
        for t in 0..2 {
            if s != t {
                pairs.push((t, s));
            }
        }
    }
    pairs
}

/// DINO cross-entropy on the tape.
///
/// `teacher_probs`: the two teacher global distributions, each `[B, K]`.
/// `student_logits`: student views (two globals first), each `[B, K]`.
/// Returns the mean over included pairs and batch items.
pub fn dino_loss_graph<T: Scalar>(g: &mut Graph<T>, teacher_probs: &[Tensor<T>], student_logits: &[Var], tau_s: f64) -> Result<Var> {
    check_temperature("student", tau_s)?;
    if teacher_probs.len() != 2 || student_logits.len() < 2 {
        return Err(Error::Contract(format!(
            "dino loss needs 2 teacher and at least 2 student views, got {} and {}",
            teacher_probs.len(),
            student_logits.len()
        )));
    }
    let shape = teacher_probs[0].shape().to_vec();
    if shape.len() != 2 || teacher_probs[1].shape() != shape.as_slice() {
        return Err(Error::Contract("teacher views must share one [B, K] shape".into()));
    }
    for &s in student_logits {
        if g.shape(s) != shape.as_slice() {
            return Err(Error::Contract(format!("student view shape {:?} differs from teacher {shape:?}", g.shape(s))));
        }
    }
    let pairs = dino_pairs(student_logits.len());
    let norm = T::c(1.0 / (pairs.len() * shape[0]) as f64);
    let mut terms = Vec::with_capacity(student_logits.len());
    for (s, &logits) in student_logits.iter().enumerate() {
        let mut w = vec![T::zero(); shape[0] * shape[1]];
        for &(t, _) in pairs.iter().filter(|&&(_, ps)| ps == s) {
            for (a, &p) in w.iter_mut().zip(teacher_probs[t].data()) {
                *a += p * norm;
            }
        }
        let scaled = g.scale(logits, T::c(1.0 / tau_s));
        let ls = g.log_softmax(scaled);
        let w = g.constant(Tensor::from_vec(&shape, w));
        let prod = g.mul(ls, w);
        terms.push(g.sum(prod));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    Ok(g.neg(total))
}

/// DINO loss on plain tensors (teacher logits are centered and sharpened here).
pub fn dino_loss<T: Scalar>(teacher_logits: &[Tensor<T>], student_logits: &[Tensor<T>], tau_s: f64, tau_t: f64, center: &[T]) -> Result<T> {
    let probs = teacher_logits.iter().map(|l| teacher_distribution(l, center, tau_t)).collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let vars: Vec<Var> = student_logits.iter().map(|l| g.constant(l.clone())).collect();
    let loss = dino_loss_graph(&mut g, &probs, &vars, tau_s)?;
    Ok(g.item(loss))
}

/// Output of [`mim_loss_graph`].
#[derive(Clone, Copy, Debug)]
pub struct MimLoss {
    pub loss: Var,
    /// Masked positions across all views and images.
    pub masked: usize,
    /// Set when nothing was masked; the loss is then exactly zero.
    pub empty: bool,
}

/// Masked-patch cross-entropy on the tape.
///
/// `teacher_probs[v]` and `student_logits[v]` are `[B, n, K]` for global
/// view `v`; `masks[v]` holds `B * n` flags. Each image's loss is divided by
/// its masked count over both views, then images with at least one masked
/// position are averaged.
pub fn mim_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    teacher_probs: &[Tensor<T>],
    student_logits: &[Var],
    masks: &[&[bool]],
    tau_s: f64,
) -> Result<MimLoss> {
    check_temperature("student", tau_s)?;
    if teacher_probs.len() != student_logits.len() || masks.len() != student_logits.len() || masks.is_empty() {
        return Err(Error::Contract("mim loss needs matching teacher, student and mask views".into()));
    }
    let shape = teacher_probs[0].shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Contract(format!("mim loss expects [B, n, K] views, got {shape:?}")));
    }
    let (b, n, k) = (shape[0], shape[1], shape[2]);
    for v in 0..masks.len() {
        if teacher_probs[v].shape() != shape.as_slice() || g.shape(student_logits[v]) != shape.as_slice() {
            return Err(Error::Contract("teacher and student patch outputs must be geometry paired".into()));
        }
        if masks[v].len() != b * n {
            return Err(Error::Contract(format!("mask has {} entries, expected {}", masks[v].len(), b * n)));
        }
    }
    let bits: Vec<bool> = masks.iter().flat_map(|m| m.iter().copied()).collect();
    let sel = masked_rows(&bits, masks.len(), b, n);
    if sel.rows.is_empty() {
        let s = g.sum(student_logits[0]);
        let loss = g.scale(s, T::zero());
        return Ok(MimLoss { loss, masked: 0, empty: true });
    }
    let all = if student_logits.len() == 1 { student_logits[0] } else { g.concat(student_logits, 0) };
    let flat = g.reshape(all, &[masks.len() * b * n, k]);
    let logits = g.index_select(flat, &sel.rows);
    let mut probs = Vec::with_capacity(sel.rows.len() * k);
    for &r in &sel.rows {
        let (v, i) = (r / (b * n), r % (b * n));
        probs.extend_from_slice(&teacher_probs[v].data()[i * k..(i + 1) * k]);
    }
    let loss = masked_cross_entropy(g, probs, logits, &sel.weights, tau_s);
    Ok(MimLoss { loss, masked: sel.rows.len(), empty: false })
}

/// Masked positions of a `[views, B, n]` flag array with their loss weights.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct MaskedRows {
    pub rows: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Each image's positions weigh `1 / (its masked count * images with any
/// masked position)`, so the result is a mean over images of per-image means.
pub(crate) fn masked_rows(bits: &[bool], views: usize, b: usize, n: usize) -> MaskedRows {
    debug_assert_eq!(bits.len(), views * b * n);
    let mut per_image = vec![0usize; b];
    for (i, &bit) in bits.iter().enumerate() {
        per_image[(i / n) % b] += usize::from(bit);
    }
    let images = per_image.iter().filter(|&&c| c > 0).count();
    let rows: Vec<usize> = (0..bits.len()).filter(|&i| bits[i]).collect();
    let weights = rows.iter().map(|&r| 1.0 / (per_image[(r / n) % b] * images) as f64).collect();
    MaskedRows { rows, weights }
}

/// `-sum_r w_r sum_k p[r, k] log softmax(logits[r] / tau_s)[k]`.
pub(crate) fn masked_cross_entropy<T: Scalar>(g: &mut Graph<T>, probs: Vec<T>, logits: Var, weights: &[f64], tau_s: f64) -> Var {
    let shape = g.shape(logits).to_vec();
    let k = shape[1];
    let mut w = probs;
    for (row, &wr) in w.chunks_exact_mut(k).zip(weights) {
        let wr = T::c(wr);
        row.iter_mut().for_each(|p| *p *= wr);
    }
    let scaled = g.scale(logits, T::c(1.0 / tau_s));
    let ls = g.log_softmax(scaled);
    let w = g.constant(Tensor::from_vec(&shape, w));
    let prod = g.mul(ls, w);
    let s = g.sum(prod);
    g.neg(s)
}

/// Value of the MIM loss on plain tensors plus the empty-mask warning flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MimValue<T> {
    pub value: T,
    pub empty: bool,
}

/// MIM loss for one image: per global view `[n, K]` logits and its mask.
pub fn mim_loss<T: Scalar>(
    teacher_logits: &[Tensor<T>],
    student_logits: &[Tensor<T>],
    masks: &[MaskPattern],
    tau_s: f64,
    tau_t: f64,
    center: &[T],
) -> Result<MimValue<T>> {
    let lift = |t: &Tensor<T>| -> Result<Tensor<T>> {
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::Contract(format!("per-view patch outputs must be [n, K], got {s:?}")));
        }
        Ok(t.clone().reshape(&[1, s[0], s[1]])?)
    };
    let probs = teacher_logits
        .iter()
        .map(|l| teacher_distribution(&lift(l)?, center, tau_t))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let vars = student_logits.iter().map(|l| Ok(g.constant(lift(l)?))).collect::<Result<Vec<_>>>()?;
    let bits: Vec<&[bool]> = masks.iter().map(MaskPattern::bits).collect();
    let out = mim_loss_graph(&mut g, &probs, &vars, &bits, tau_s)?;
    Ok(MimValue { value: g.item(out.loss), empty: out.empty })
}

/// `lambda_dino * l_dino + lambda_mim * l_mim`.
pub fn total_loss(l_dino: f64, l_mim: f64, lambda_dino: f64, lambda_mim: f64) -> Result<f64> {
    check_weights(lambda_dino, lambda_mim)?;
    Ok(lambda_dino * l_dino + lambda_mim * l_mim)
}

pub(crate) fn check_weights(lambda_dino: f64, lambda_mim: f64) -> Result<()> {
    if lambda_dino >= 0.0 && lambda_mim >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("loss weights must be non-negative, got {lambda_dino} and {lambda_mim}")))
    }
}

/// `teacher <- lambda * teacher + (1 - lambda) * student`, element-wise over
/// every tensor.
pub fn ema_update<T: Scalar>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("EMA momentum {lambda} must lie in [0, 1]")));
    }
    teacher.check_isomorphic(student).map_err(|e| Error::Contract(e.to_string()))?;
    let (a, b) = (T::c(lambda), T::c(1.0 - lambda));
    for (t, s) in teacher.iter_mut().zip(student.iter()) {
        for (x, &y) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *x = a * *x + b * y;
        }
    }
    Ok(())
}

/// Pre-training base learning rate: `0.0005 * batch / 256`, capped at 0.002.
pub fn pretrain_base_lr(batch_size: usize) -> f64 {
    pretrain_base_lr_with(0.0005, 0.002, batch_size)
}

pub fn pretrain_base_lr_with(coefficient: f64, cap: f64, batch_size: usize) -> f64 {
    (coefficient * batch_size as f64 / 256.0).min(cap)
}
