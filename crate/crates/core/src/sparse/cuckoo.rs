//! Two-table Cuckoo hash map from packed coordinate keys to site
//! indices. Immutable after build; queries are lock-free and safe to run
//! concurrently.

use thiserror::Error;

use super::CoordKey;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CuckooError {
    #[error("duplicate key {0:#x}")]
    DuplicateKey(CoordKey),
    #[error("keys and values length mismatch ({keys} vs {values})")]
    LengthMismatch { keys: usize, values: usize },
    #[error("construction failed after growth cap")]
    CapacityExhausted,
}

const RESEEDS_PER_CAPACITY: u32 = 16;
const MAX_GROWTHS: u32 = 6;

/// Base seeds for the two multiply-xorshift mixers; distinct odd
/// constants, perturbed on reseed.
const SEED_A: u64 = 0x9e37_79b9_7f4a_7c15;
const SEED_B: u64 = 0xc2b2_ae3d_27d4_eb4f;

#[derive(Debug, Clone)]
pub struct CuckooTable {
    tables: [Vec<Option<(CoordKey, usize)>>; 2],
    seeds: [u64; 2],
    mask: u64,
    len: usize,
}

fn mix(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^= x >> 33;
    x
}

impl CuckooTable {
    /// Build a table answering `query(keys[i]) == Some(values[i])`.
    /// Capacity is 2x the key count rounded up to a power of two
    /// (load factor <= 0.5). On a displacement cycle both hash seeds are
    /// reseeded (up to 16 times), then capacity doubles.
    pub fn build(keys: &[CoordKey], values: &[usize]) -> Result<Self, CuckooError> {
        if keys.len() != values.len() {
            return Err(CuckooError::LengthMismatch {
                keys: keys.len(),
                values: values.len(),
            });
        }
        let n = keys.len();
        let mut cap_per_table = n.next_power_of_two().max(1);
        let mut reseed = 0u32;
        let mut growths = 0u32;
        loop {
            let seeds = [
                SEED_A ^ mix(reseed as u64),
                SEED_B ^ mix(0x5bd1_e995 ^ reseed as u64),
            ];
            match Self::try_build(keys, values, cap_per_table, seeds) {
                Ok(table) => return Ok(table),
                Err(BuildFailure::Duplicate(k)) => return Err(CuckooError::DuplicateKey(k)),
                Err(BuildFailure::Cycle) => {
                    reseed += 1;
                    if reseed % RESEEDS_PER_CAPACITY == 0 {
                        growths += 1;
                        if growths > MAX_GROWTHS {
                            return Err(CuckooError::CapacityExhausted);
                        }
                        cap_per_table *= 2;
                    }
                }
            }
        }
    }

    fn try_build(
        keys: &[CoordKey],
        values: &[usize],
        cap_per_table: usize,
        seeds: [u64; 2],
    ) -> Result<Self, BuildFailure> {
        let mask = cap_per_table as u64 - 1;
        let mut table = Self {
            tables: [vec![None; cap_per_table], vec![None; cap_per_table]],
            seeds,
            mask,
            len: 0,
        };
        let n = keys.len().max(2);
        let max_iter = 32 * (usize::BITS - n.leading_zeros()) as usize + 8;
        for (&k, &v) in keys.iter().zip(values) {
            if table.query(k).is_some() {
                return Err(BuildFailure::Duplicate(k));
            }
            table.insert(k, v, max_iter)?;
        }
        Ok(table)
    }

    fn insert(&mut self, key: CoordKey, value: usize, max_iter: usize) -> Result<(), BuildFailure> {
        let mut entry = (key, value);
        let mut side = 0usize;
        for _ in 0..max_iter {
            let slot = self.slot(side, entry.0);
            match self.tables[side][slot].replace(entry) {
                None => {
                    self.len += 1;
                    return Ok(());
                }
                Some(evicted) => {
                    entry = evicted;
                    side ^= 1;
                }
            }
        }
        Err(BuildFailure::Cycle)
    }

    fn slot(&self, side: usize, key: CoordKey) -> usize {
        (mix(key ^ self.seeds[side]) & self.mask) as usize
    }

    pub fn query(&self, key: CoordKey) -> Option<usize> {
        for side in 0..2 {
            if let Some((k, v)) = self.tables[side][self.slot(side, key)] {
                if k == key {
                    return Some(v);
                }
            }
        }
        None
    }

    /// Element i of the result corresponds to key i; identical to
    /// sequential `query` calls.
    pub fn query_batch(&self, keys: &[CoordKey]) -> Vec<Option<usize>> {
        keys.iter().map(|&k| self.query(k)).collect()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Occupied fraction across both bucket arrays.
    pub fn load_factor(&self) -> f64 {
        self.len as f64 / (2 * self.tables[0].len()) as f64
    }
}

#[derive(Debug)]
enum BuildFailure {
    Duplicate(CoordKey),
    Cycle,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn single_key() {
        let t = CuckooTable::build(&[42], &[7]).unwrap();
        assert_eq!(t.query(42), Some(7));
        assert_eq!(t.query(43), None);
    }

    #[test]
    fn empty_table() {
        let t = CuckooTable::build(&[], &[]).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.query(0), None);
        assert_eq!(t.query(123), None);
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert!(matches!(
            CuckooTable::build(&[5, 5], &[0, 1]),
            Err(CuckooError::DuplicateKey(5))
        ));
    }

    #[test]
    fn forty_thousand_random_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen = HashSet::new();
        let mut keys = Vec::new();
        while keys.len() < 40_000 {
            let k: u64 = rng.random();
            if seen.insert(k) {
                keys.push(k);
            }
        }
        let values: Vec<usize> = (0..keys.len()).collect();
        let t = CuckooTable::build(&keys, &values).unwrap();
        assert!(t.load_factor() <= 0.5);
        for (i, &k) in keys.iter().enumerate() {
            assert_eq!(t.query(k), Some(i));
        }
        let mut absent = Vec::new();
        while absent.len() < 40_000 {
            let k: u64 = rng.random();
            if !seen.contains(&k) {
                absent.push(k);
            }
        }
        assert!(t.query_batch(&absent).iter().all(|r| r.is_none()));
    }

    #[test]
    fn batch_matches_sequential_under_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let keys: Vec<u64> = (0..1000).map(|i| i * 2654435761).collect();
        let values: Vec<usize> = (0..keys.len()).collect();
        let t = CuckooTable::build(&keys, &values).unwrap();
        let mut probe = keys.clone();
        probe.extend((0..1000).map(|_| rng.random::<u64>()));
        probe.shuffle(&mut rng);
        let batch = t.query_batch(&probe);
        for (k, r) in probe.iter().zip(&batch) {
            assert_eq!(*r, t.query(*k));
        }
    }
}
