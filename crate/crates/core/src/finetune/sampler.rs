//! P×K identity-balanced batch sampling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Indices grouped by identity (ordered by person id).
#[derive(Clone, Debug)]
pub struct IdentityIndex {
    groups: Vec<(u64, Vec<usize>)>,
}

impl IdentityIndex {
    pub fn new(person_ids: &[u64]) -> Self {
        let mut map: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, &pid) in person_ids.iter().enumerate() {
            map.entry(pid).or_default().push(i);
        }
        Self { groups: map.into_iter().collect() }
    }

    pub fn identities(&self) -> usize {
        self.groups.len()
    }

    /// Dense class label of every person id, in id order.
    pub fn labels(&self) -> BTreeMap<u64, usize> {
        self.groups.iter().enumerate().map(|(c, (pid, _))| (*pid, c)).collect()
    }
}

/// Picks `p` distinct identities and `k` images of each; identities with
/// fewer than `k` images are drawn with replacement. The batch is grouped by
/// identity.
pub fn pk_sample<R: Rng + ?Sized>(index: &IdentityIndex, p: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if p == 0 || k == 0 {
        return Err(Error::Config("P and K must be at least 1".into()));
    }
    if index.identities() < p {
        return Err(Error::Config(format!("need {p} identities per batch but the split has {}", index.identities())));
    }
    let chosen: Vec<&(u64, Vec<usize>)> = index.groups.choose_multiple(rng, p).collect();
    let mut out = Vec::with_capacity(p * k);
    for (_, members) in chosen {
        if members.len() >= k {
            out.extend(members.choose_multiple(rng, k).copied());
        } else {
            out.extend((0..k).map(|_| members[rng.gen_range(0..members.len())]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use std::collections::BTreeSet;

    #[test]
    fn batches_have_p_identities_of_k_images() {
        let pids: Vec<u64> = (0..40).map(|i| i / 5).collect();
        let idx = IdentityIndex::new(&pids);
        let mut rng = stream(1, &[]);
        for _ in 0..20 {
            let b = pk_sample(&idx, 4, 3, &mut rng).unwrap();
            assert_eq!(b.len(), 12);
            let ids: BTreeSet<u64> = b.iter().map(|&i| pids[i]).collect();
            assert_eq!(ids.len(), 4);
            for chunk in b.chunks(3) {
                assert!(chunk.iter().all(|&i| pids[i] == pids[chunk[0]]));
                let uniq: BTreeSet<usize> = chunk.iter().copied().collect();
                assert_eq!(uniq.len(), 3);
            }
        }
    }

    #[test]
    fn small_identities_repeat() {
        let pids = vec![0, 0, 1, 1, 1, 1];
        let idx = IdentityIndex::new(&pids);
        let b = pk_sample(&idx, 2, 4, &mut stream(0, &[])).unwrap();
        assert_eq!(b.len(), 8);
        let zero = b.iter().filter(|&&i| pids[i] == 0).count();
        assert_eq!(zero, 4);
        assert!(matches!(pk_sample(&idx, 3, 4, &mut stream(0, &[])), Err(Error::Config(_))));
    }

    #[test]
    fn sixteen_by_four_is_sixty_four() {
        let pids: Vec<u64> = (0..200).map(|i| i / 4).collect();
        let b = pk_sample(&IdentityIndex::new(&pids), 16, 4, &mut stream(2, &[])).unwrap();
        assert_eq!(b.len(), 64);
    }
}
