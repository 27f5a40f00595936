use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, IteratorRandom};
use rand::Rng;

use super::TrainError;

/// Groups sample indices by identity label.
pub fn identity_index(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        index.entry(l).or_default().push(i);
    }
    index
}

/// Draws `p` distinct identities and `k` samples of each, grouped by
/// identity. Identities with fewer than `k` samples are drawn with
/// replacement.
pub fn pk_sample<R: Rng + ?Sized>(
    index: &BTreeMap<usize, Vec<usize>>,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>, TrainError> {
    if p == 0 || k == 0 {
        return Err(TrainError::Config(format!(
            "P and K must be positive, got P={p}, K={k}"
        )));
    }
    let eligible = index.iter().filter(|(_, s)| !s.is_empty());
    let ids: Vec<&Vec<usize>> = eligible.map(|(_, s)| s).choose_multiple(rng, p);
    if ids.len() < p {
        return Err(TrainError::NotEnoughIdentities {
            needed: p,
            available: ids.len(),
        });
    }
    let mut batch = Vec::with_capacity(p * k);
    for samples in ids {
        if samples.len() >= k {
            batch.extend(samples.choose_multiple(rng, k).copied());
        } else {
            batch.extend((0..k).map(|_| *samples.choose(rng).expect("non-empty")));
        }
    }
    Ok(batch)
}
