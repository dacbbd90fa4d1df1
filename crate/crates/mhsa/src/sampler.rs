//! Identity-balanced PK batch sampling: P identities per batch, K instances
//! each, so every batch supports in-batch triplet mining.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub p_ids: usize,
    pub k_inst: usize,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p_ids < 2 {
            return Err(Error::Config(format!(
                "sampler needs >= 2 identities per batch, got {}",
                self.p_ids
            )));
        }
        if self.k_inst < 2 {
            return Err(Error::Config(format!(
                "sampler needs >= 2 instances per identity, got {}",
                self.k_inst
            )));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.p_ids * self.k_inst
    }
}

/// Sample indices grouped by identity, in first-seen order of ids.
pub fn group_by_id(ids: &[u32]) -> BTreeMap<u32, Vec<usize>> {
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        by_id.entry(id).or_default().push(i);
    }
    by_id
}

/// Draw one PK batch of dataset indices. Identities are chosen without
/// replacement; instances per identity without replacement when the identity
/// has enough samples, with replacement otherwise.
pub fn sample_batch(
    by_id: &BTreeMap<u32, Vec<usize>>,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    if by_id.len() < cfg.p_ids {
        return Err(Error::Data(format!(
            "dataset has {} identities, sampler needs {}",
            by_id.len(),
            cfg.p_ids
        )));
    }
    let mut id_list: Vec<u32> = by_id.keys().copied().collect();
    rng.shuffle(&mut id_list);
    let mut batch = Vec::with_capacity(cfg.batch_size());
    for &id in id_list.iter().take(cfg.p_ids) {
        let pool = &by_id[&id];
        if pool.len() >= cfg.k_inst {
            let mut indices: Vec<usize> = (0..pool.len()).collect();
            rng.shuffle(&mut indices);
            for &i in indices.iter().take(cfg.k_inst) {
                batch.push(pool[i]);
            }
        } else {
            for _ in 0..cfg.k_inst {
                batch.push(pool[rng.below(pool.len())]);
            }
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(spec: &[(u32, usize)]) -> Vec<u32> {
        spec.iter().flat_map(|&(id, n)| std::iter::repeat_n(id, n)).collect()
    }

    #[test]
    fn two_by_two_covers_both_ids() {
        let labels = ids(&[(0, 3), (1, 3)]);
        let by_id = group_by_id(&labels);
        let cfg = SamplerConfig { p_ids: 2, k_inst: 2 };
        let mut rng = Rng::new(1);
        let batch = sample_batch(&by_id, &cfg, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
        let mut counts = BTreeMap::new();
        for &i in &batch {
            *counts.entry(labels[i]).or_insert(0usize) += 1;
        }
        assert_eq!(counts[&0], 2);
        assert_eq!(counts[&1], 2);
    }

    #[test]
    fn paper_batch_is_128() {
        let cfg = SamplerConfig { p_ids: 32, k_inst: 4 };
        assert_eq!(cfg.batch_size(), 128);
        let labels: Vec<u32> = ids(&(0..40).map(|i| (i, 5)).collect::<Vec<_>>());
        let by_id = group_by_id(&labels);
        let mut rng = Rng::new(2);
        let batch = sample_batch(&by_id, &cfg, &mut rng).unwrap();
        assert_eq!(batch.len(), 128);
    }

    #[test]
    fn fixed_seed_reproduces_batches() {
        let labels = ids(&(0..10).map(|i| (i, 6)).collect::<Vec<_>>());
        let by_id = group_by_id(&labels);
        let cfg = SamplerConfig { p_ids: 4, k_inst: 3 };
        let draw = || {
            let mut rng = Rng::new(7);
            (0..5)
                .map(|_| sample_batch(&by_id, &cfg, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn every_batch_satisfies_triplet_contract() {
        let labels = ids(&(0..8).map(|i| (i, if i % 2 == 0 { 2 } else { 7 })).collect::<Vec<_>>());
        let by_id = group_by_id(&labels);
        let cfg = SamplerConfig { p_ids: 3, k_inst: 4 };
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let batch = sample_batch(&by_id, &cfg, &mut rng).unwrap();
            let mut counts = BTreeMap::new();
            for &i in &batch {
                *counts.entry(labels[i]).or_insert(0usize) += 1;
            }
            assert_eq!(counts.len(), 3);
            for (_, n) in counts {
                assert_eq!(n, 4);
            }
        }
    }

    #[test]
    fn too_few_identities_is_data_error() {
        let labels = ids(&[(0, 5), (1, 5)]);
        let by_id = group_by_id(&labels);
        let cfg = SamplerConfig { p_ids: 3, k_inst: 2 };
        let mut rng = Rng::new(4);
        assert!(matches!(
            sample_batch(&by_id, &cfg, &mut rng),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn degenerate_config_rejected() {
        assert!(SamplerConfig { p_ids: 1, k_inst: 4 }.validate().is_err());
        assert!(SamplerConfig { p_ids: 4, k_inst: 1 }.validate().is_err());
        assert!(SamplerConfig { p_ids: 2, k_inst: 2 }.validate().is_ok());
    }
}
