//! Ranking, average precision and CMC under the cross-camera protocol.

use personvit_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Labeled feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub person_ids: Vec<u64>,
    pub camera_ids: Vec<u64>,
    /// `[rows, d]`
    pub features: Tensor<f32>,
}

impl EmbeddingSet {
    pub fn new(person_ids: Vec<u64>, camera_ids: Vec<u64>, features: Tensor<f32>) -> Result<Self> {
        let rows = person_ids.len();
        if camera_ids.len() != rows || features.ndim() != 2 || features.shape()[0] != rows {
            return Err(Error::Contract(format!(
                "{rows} person ids, {} camera ids and features {:?} disagree",
                camera_ids.len(),
                features.shape()
            )));
        }
        Ok(Self { person_ids, camera_ids, features })
    }

    pub fn len(&self) -> usize {
        self.person_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.person_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.features.row(i)
    }
}

/// `(1 / number_relevant) * sum over relevant ranks k of precision@k`.
pub fn average_precision(relevant: &[bool], number_relevant: usize) -> Result<f64> {
    if number_relevant == 0 {
        return Err(Error::Contract("average precision needs at least one relevant item".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / number_relevant as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    /// Gallery indices after exclusion, nearest first.
    pub ranking: Vec<usize>,
    /// `None` when the query has no valid match.
    pub ap: Option<f64>,
    /// 0-based rank of the first correct match.
    pub first_hit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedResult {
    pub queries: Vec<QueryResult>,
    pub map: f64,
    /// `cmc[r]` is the fraction of valid queries matched within rank `r + 1`.
    pub cmc: Vec<f64>,
    pub excluded_queries: usize,
}

impl RankedResult {
    pub fn cmc_at(&self, rank: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            n => self.cmc[rank.clamp(1, n) - 1],
        }
    }

    pub fn report(&self) -> EvalReport {
        EvalReport {
            map: self.map,
            rank1: self.cmc_at(1),
            rank5: self.cmc_at(5),
            rank10: self.cmc_at(10),
            excluded_queries: self.excluded_queries,
        }
    }
}

/// Summary written as the evaluation JSON report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub excluded_queries: usize,
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Ranks the gallery for every query by Euclidean distance (ties by gallery
/// index), dropping same-identity same-camera items, then scores AP and CMC.
pub fn evaluate_reid(query: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<RankedResult> {
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Contract("query and gallery must be non-empty".into()));
    }
    if query.dim() != gallery.dim() {
        return Err(Error::Contract(format!("query dim {} != gallery dim {}", query.dim(), gallery.dim())));
    }
    let mut queries = Vec::with_capacity(query.len());
    let mut hits = vec![0usize; gallery.len()];
    let (mut ap_sum, mut valid) = (0.0, 0usize);
    for q in 0..query.len() {
        let (pid, cam) = (query.person_ids[q], query.camera_ids[q]);
        let mut scored: Vec<(f64, usize)> = (0..gallery.len())
            .filter(|&j| !(gallery.person_ids[j] == pid && gallery.camera_ids[j] == cam))
            .map(|j| (euclidean(query.row(q), gallery.row(j)), j))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let ranking: Vec<usize> = scored.into_iter().map(|(_, j)| j).collect();
        let relevant: Vec<bool> = ranking.iter().map(|&j| gallery.person_ids[j] == pid).collect();
        let n_rel = relevant.iter().filter(|&&r| r).count();
        let first_hit = relevant.iter().position(|&r| r);
        let ap = if n_rel > 0 { Some(average_precision(&relevant, n_rel)?) } else { None };
        if let (Some(ap), Some(h)) = (ap, first_hit) {
            ap_sum += ap;
            valid += 1;
            hits[h] += 1;
        }
        queries.push(QueryResult { ranking, ap, first_hit });
    }
    let mut cmc = Vec::with_capacity(gallery.len());
    let mut acc = 0usize;
    for h in hits {
        acc += h;
        cmc.push(if valid > 0 { acc as f64 / valid as f64 } else { 0.0 });
    }
    Ok(RankedResult {
        queries,
        map: if valid > 0 { ap_sum / valid as f64 } else { 0.0 },
        cmc,
        excluded_queries: query.len() - valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pids: &[u64], cams: &[u64], rows: &[[f32; 2]]) -> EmbeddingSet {
        let data = rows.iter().flatten().copied().collect();
        EmbeddingSet::new(pids.to_vec(), cams.to_vec(), Tensor::from_vec(&[rows.len(), 2], data)).unwrap()
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, false, false], 1).unwrap(), 1.0);
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!(average_precision(&[false], 0).is_err());
    }

    #[test]
    fn perfect_separation() {
        let q = set(&[1, 2], &[0, 0], &[[1.0, 0.0], [0.0, 1.0]]);
        let g = set(&[1, 2, 1, 2], &[1, 1, 2, 2], &[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]);
        let r = evaluate_reid(&q, &g).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.cmc_at(1), 1.0);
        assert_eq!(r.excluded_queries, 0);
    }

    #[test]
    fn same_camera_only_match_is_excluded() {
        let q = set(&[1], &[0], &[[0.0, 0.0]]);
        let g = set(&[1, 2], &[0, 1], &[[0.0, 0.0], [1.0, 1.0]]);
        let r = evaluate_reid(&q, &g).unwrap();
        assert_eq!(r.excluded_queries, 1);
        assert_eq!(r.queries[0].ranking, vec![1]);
        assert_eq!(r.queries[0].ap, None);
        assert_eq!(r.report().map, 0.0);
    }

    #[test]
    fn ties_keep_gallery_order() {
        let q = set(&[1], &[0], &[[0.0, 0.0]]);
        let g = set(&[2, 1, 3], &[1, 1, 1], &[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]);
        let r = evaluate_reid(&q, &g).unwrap();
        assert_eq!(r.queries[0].ranking, vec![0, 1, 2]);
        assert!((r.map - 0.5).abs() < 1e-15);
        assert_eq!(r.cmc, vec![0.0, 1.0, 1.0]);
    }
}
