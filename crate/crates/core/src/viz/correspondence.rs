//! Sparse cross-image patch correspondence by mutual nearest neighbors.

use personvit_tensor::Tensor;

use crate::data::Image;
use crate::error::{Error, Result};

use super::VizModel;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub a: usize,
    pub b: usize,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correspondence {
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub similarity: f64,
}

pub const CORRESPONDENCE_CSV_HEADER: &str = "a_row,a_col,b_row,b_col,similarity";

fn unit_rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    (0..t.shape()[0])
        .map(|i| {
            let r: Vec<f64> = t.row(i).iter().map(|&v| f64::from(v)).collect();
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.into_iter().map(|v| v / n).collect()
        })
        .collect()
}

fn argmax(row: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Mutual nearest neighbors under cosine similarity between the rows of `a`
/// and `b`, best first (ties by `a` index), truncated to `top_n`.
pub fn mutual_nearest_pairs(a: &Tensor<f32>, b: &Tensor<f32>, top_n: usize) -> Result<Vec<PatchPair>> {
    if top_n == 0 {
        return Err(Error::Config("top_n must be at least 1".into()));
    }
    if a.ndim() != 2 || b.ndim() != 2 || a.last_dim() != b.last_dim() {
        return Err(Error::Contract(format!("feature shapes {:?} and {:?} do not match", a.shape(), b.shape())));
    }
    let (ua, ub) = (unit_rows(a), unit_rows(b));
    let sim: Vec<Vec<f64>> = ua.iter().map(|x| ub.iter().map(|y| x.iter().zip(y).map(|(p, q)| p * q).sum()).collect()).collect();
    let best_b: Vec<usize> = sim.iter().map(|r| argmax(r.iter().copied())).collect();
    let best_a: Vec<usize> = (0..ub.len()).map(|j| argmax(sim.iter().map(|r| r[j]))).collect();
    let mut pairs: Vec<PatchPair> = best_b
        .iter()
        .enumerate()
        .filter(|&(i, &j)| best_a[j] == i)
        .map(|(i, &j)| PatchPair { a: i, b: j, similarity: sim[i][j] })
        .collect();
    pairs.sort_by(|x, y| y.similarity.total_cmp(&x.similarity).then(x.a.cmp(&y.a)));
    pairs.truncate(top_n);
    Ok(pairs)
}

pub fn render_correspondence_csv(pairs: &[Correspondence]) -> String {
    let mut out = format!("{CORRESPONDENCE_CSV_HEADER}\n");
    for p in pairs {
        out.push_str(&format!("{},{},{},{},{:.6}\n", p.a.0, p.a.1, p.b.0, p.b.1, p.similarity));
    }
    out
}

impl VizModel {
    /// Mutual-nearest patch pairs between two images in `y_patches` space.
    pub fn correspondence_pairs(&self, img_a: &Image, img_b: &Image, top_n: usize) -> Result<Vec<Correspondence>> {
        let (grid_a, fa) = self.patch_projections(img_a)?;
        let (grid_b, fb) = self.patch_projections(img_b)?;
        let pairs = mutual_nearest_pairs(&fa, &fb, top_n)?;
        Ok(pairs
            .into_iter()
            .map(|p| Correspondence {
                a: (p.a / grid_a.1, p.a % grid_a.1),
                b: (p.b / grid_b.1, p.b % grid_b.1),
                similarity: p.similarity,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_correspondence_is_identity() {
        let a = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.3]);
        let pairs = mutual_nearest_pairs(&a, &a, 10).unwrap();
        assert_eq!(pairs.len(), 3);
        for p in &pairs {
            assert_eq!(p.a, p.b);
            assert!((p.similarity - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn truncates_without_padding() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.9, 0.1]);
        let b = Tensor::from_vec(&[2, 2], vec![1.0, 0.05, 0.0, 1.0]);
        let pairs = mutual_nearest_pairs(&a, &b, 5).unwrap();
        assert!(pairs.len() <= 2);
        assert_eq!(mutual_nearest_pairs(&a, &b, 1).unwrap().len(), 1);
    }
}
