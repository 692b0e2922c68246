use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::DatasetIndex;
use crate::error::{AgmError, Result};
use crate::imaging::Modality;
use crate::seed;

/// Identity-balanced batches of `P` identities × `K` samples. Each identity
/// contributes `K/2` samples from its RGB-like modality and the rest from
/// infrared when both exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PkSampler {
    pub p: usize,
    pub k: usize,
    pub seed: u64,
}

/// Enough batches to visit every identity and, on average, every record.
pub fn batches_per_epoch(num_identities: usize, num_records: usize, p: usize, k: usize) -> usize {
    num_identities.div_ceil(p).max(num_records.div_ceil(p * k))
}

impl PkSampler {
    pub fn new(p: usize, k: usize, seed: u64) -> Result<Self> {
        if p < 2 || k < 2 {
            return Err(AgmError::Config(format!("PK sampling needs P ≥ 2 and K ≥ 2, got P={p} K={k}")));
        }
        Ok(PkSampler { p, k, seed })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    /// Record indices for every batch of `epoch`. Identities are visited in
    /// shuffled order, so the first `ceil(C/P)` batches cover all of them.
    pub fn epoch(&self, index: &DatasetIndex, epoch: u64) -> Result<Vec<Vec<usize>>> {
        let classes = index.num_classes();
        if classes < self.p {
            return Err(AgmError::Config(format!(
                "P={} exceeds the {classes} identities in the dataset",
                self.p
            )));
        }
        // pools[class] = (rgb-like records, infrared records)
        let mut pools: BTreeMap<u32, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, r) in index.records.iter().enumerate() {
            let entry = pools.entry(r.identity).or_default();
            if r.modality == Modality::Infrared {
                entry.1.push(i);
            } else {
                entry.0.push(i);
            }
        }
        let mut rng = seed::rng(self.seed, &[seed::tag("pk"), epoch]);
        let n_batches = batches_per_epoch(classes, index.len(), self.p, self.k);
        let mut queue: Vec<u32> = Vec::new();
        let mut deferred: Vec<u32> = Vec::new();
        let mut batches = Vec::with_capacity(n_batches);
        for _ in 0..n_batches {
            let mut ids: Vec<u32> = Vec::with_capacity(self.p);
            let mut pending = std::mem::take(&mut deferred);
            while ids.len() < self.p {
                let next = if !pending.is_empty() {
                    pending.remove(0)
                } else {
                    if queue.is_empty() {
                        queue = (0..classes as u32).collect();
                        queue.shuffle(&mut rng);
                        queue.reverse();
                    }
                    queue.pop().expect("queue refilled")
                };
                if ids.contains(&next) {
                    deferred.push(next);
                } else {
                    ids.push(next);
                }
            }
            deferred.extend(pending);
            let mut batch = Vec::with_capacity(self.batch_size());
            for id in ids {
                let (rgb, ir) = &pools[&id];
                let (n_rgb, n_ir) = match (rgb.is_empty(), ir.is_empty()) {
                    (false, false) => (self.k.div_ceil(2), self.k / 2),
                    (true, _) => (0, self.k),
                    (_, true) => (self.k, 0),
                };
                batch.extend(draw(rgb, n_rgb, id, &mut rng));
                batch.extend(draw(ir, n_ir, id, &mut rng));
            }
            batches.push(batch);
        }
        Ok(batches)
    }
}

/// `n` distinct records when the pool is large enough, otherwise with
/// replacement.
fn draw(pool: &[usize], n: usize, id: u32, rng: &mut impl rand::Rng) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    if pool.len() >= n {
        pool.choose_multiple(rng, n).copied().collect()
    } else {
        log::debug!("identity {id} has {} samples for {n} slots; sampling with replacement", pool.len());
        (0..n).map(|_| *pool.choose(rng).expect("pool is non-empty")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use std::path::PathBuf;

    fn index(ids: u32, per_modality: usize) -> DatasetIndex {
        let mut entries = Vec::new();
        for id in 0..ids {
            for m in [Modality::Visible, Modality::Infrared] {
                for k in 0..per_modality {
                    entries.push((PathBuf::from(format!("{m}/{id}/{k}.png")), id * 3 + 1, m, None));
                }
            }
        }
        DatasetIndex::from_entries(PathBuf::new(), entries)
    }

    #[test]
    fn batches_have_pk_structure_and_cover_identities() {
        let idx = index(20, 10);
        let s = PkSampler::new(16, 4, 9).unwrap();
        let batches = s.epoch(&idx, 0).unwrap();
        assert_eq!(batches.len(), batches_per_epoch(20, 400, 16, 4));
        let mut seen = BTreeSet::new();
        for b in &batches {
            assert_eq!(b.len(), 64);
            let mut per_id: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
            for &i in b {
                let r = &idx.records[i];
                let e = per_id.entry(r.identity).or_default();
                if r.modality == Modality::Infrared {
                    e.1 += 1
                } else {
                    e.0 += 1
                }
            }
            assert_eq!(per_id.len(), 16);
            assert!(per_id.values().all(|&c| c == (2, 2)));
            seen.extend(per_id.keys().copied());
        }
        assert_eq!(seen.len(), 20);
        assert_eq!(batches, s.epoch(&idx, 0).unwrap());
        assert_ne!(batches, s.epoch(&idx, 1).unwrap());
    }

    #[test]
    fn small_identities_are_sampled_with_replacement() {
        let idx = index(3, 1);
        let s = PkSampler::new(2, 4, 0).unwrap();
        for b in s.epoch(&idx, 0).unwrap() {
            assert_eq!(b.len(), 8);
        }
    }

    #[test]
    fn oversized_p_is_rejected() {
        assert!(PkSampler::new(4, 4, 0).unwrap().epoch(&index(3, 2), 0).is_err());
        assert!(PkSampler::new(4, 1, 0).is_err());
    }
}
