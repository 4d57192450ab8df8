//! Cosine k-nearest-neighbor identity classification.

use crate::error::{Error, Result};

use super::retrieval::EmbeddingSet;

#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    pub accuracy: f64,
    pub predictions: Vec<u64>,
    /// Set when the probe ran against its own memory (diagnostic mode, the
    /// nearest neighbor of each point is itself).
    pub self_match: bool,
}

fn normalized(set: &EmbeddingSet) -> Vec<Vec<f64>> {
    (0..set.len())
        .map(|i| {
            let row: Vec<f64> = set.row(i).iter().map(|&v| f64::from(v)).collect();
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.into_iter().map(|v| v / n).collect()
        })
        .collect()
}

/// Ranks memory rows by cosine similarity to `q` (ties by memory index).
pub fn knn_neighbors(memory: &[Vec<f64>], q: &[f64], k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = memory
        .iter()
        .enumerate()
        .map(|(j, m)| (m.iter().zip(q).map(|(a, b)| a * b).sum::<f64>(), j))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Majority vote among the `k` most similar memory rows; a tied vote goes to
/// the label whose best neighbor ranks highest.
pub fn knn_probe(memory: &EmbeddingSet, test: &EmbeddingSet, k: usize) -> Result<KnnResult> {
    if k == 0 || k > memory.len() {
        return Err(Error::Config(format!("k = {k} must lie in [1, {}] (memory size)", memory.len())));
    }
    if test.is_empty() || memory.dim() != test.dim() {
        return Err(Error::Contract("kNN probe needs a non-empty test set of matching dim".into()));
    }
    let self_match = memory == test;
    let mem = normalized(memory);
    let tst = normalized(test);
    let mut predictions = Vec::with_capacity(test.len());
    let mut correct = 0usize;
    for (i, q) in tst.iter().enumerate() {
        let nn = knn_neighbors(&mem, q, k);
        let mut votes: Vec<(u64, usize, usize)> = Vec::new(); // (label, count, best rank)
        for (rank, &j) in nn.iter().enumerate() {
            let label = memory.person_ids[j];
            match votes.iter_mut().find(|v| v.0 == label) {
                Some(v) => v.1 += 1,
                None => votes.push((label, 1, rank)),
            }
        }
        let best = votes.iter().max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2))).expect("k >= 1").0;
        correct += usize::from(best == test.person_ids[i]);
        predictions.push(best);
    }
    Ok(KnnResult { accuracy: correct as f64 / test.len() as f64, predictions, self_match })
}

#[cfg(test)]
mod tests {
    use super::*;
    use personvit_tensor::Tensor;

    #[test]
    fn self_probe_is_perfect() {
        let s = EmbeddingSet::new(vec![1, 2, 3], vec![0, 0, 0], Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.2])).unwrap();
        let r = knn_probe(&s, &s, 1).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.self_match);
        assert!(matches!(knn_probe(&s, &s, 4), Err(Error::Config(_))));
    }
}
