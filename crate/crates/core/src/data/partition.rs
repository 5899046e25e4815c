//! Federated partitioning of the train split into client shards.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::generate::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Iid,
    FullNoniid,
    Dirichlet,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Iid => "iid",
            Scheme::FullNoniid => "full_noniid",
            Scheme::Dirichlet => "dirichlet",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedSplit {
    pub scheme: Scheme,
    /// Client index -> sample ids owned by that client.
    pub clients: Vec<Vec<u64>>,
    /// Client index -> (domain-0 count, domain-1 count).
    pub domain_counts: Vec<[usize; 2]>,
}

impl FederatedSplit {
    pub fn k(&self) -> usize {
        self.clients.len()
    }

    pub fn total(&self) -> usize {
        self.clients.iter().map(|c| c.len()).sum()
    }
}

pub const DIRICHLET_ALPHA: f64 = 0.25;

/// Integer counts proportional to `props` summing exactly to `total`:
/// floor allocation plus largest-remainder correction (ties by lower index).
fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = props.iter().map(|p| (p * total as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = props[a] * total as f64 - (props[a] * total as f64).floor();
        let fb = props[b] * total as f64 - (props[b] * total as f64).floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..total.saturating_sub(assigned) {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

/// Ids per domain in stored order.
fn ids_by_domain(train: &[Sample]) -> [Vec<u64>; 2] {
    let mut by = [Vec::new(), Vec::new()];
    for s in train {
        by[s.domain as usize].push(s.id);
    }
    by
}

fn build(clients: Vec<Vec<u64>>, scheme: Scheme, train: &[Sample]) -> FederatedSplit {
    let domain_of: std::collections::HashMap<u64, u8> = train.iter().map(|s| (s.id, s.domain)).collect();
    let domain_counts = clients
        .iter()
        .map(|ids| {
            let mut c = [0usize; 2];
            for id in ids {
                c[domain_of[id] as usize] += 1;
            }
            c
        })
        .collect();
    FederatedSplit { scheme, clients, domain_counts }
}

/// Splits the train set into `k` client shards under the given scheme.
pub fn partition(train: &[Sample], scheme: Scheme, k: usize, rng: &mut ChaCha8Rng) -> Result<FederatedSplit> {
    if k == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if k > train.len() / 2 {
        return Err(Error::Config(format!("{k} clients for {} train samples", train.len())));
    }
    let [mut d0, mut d1] = ids_by_domain(train);
    d0.shuffle(rng);
    d1.shuffle(rng);

    let clients: Vec<Vec<u64>> = match scheme {
        Scheme::Iid => {
            // every client gets an equal cut of each domain (last clients
            // absorb the remainder, at most one extra sample per domain)
            let cut = |ids: &[u64], i: usize| {
                let n = ids.len();
                let (lo, hi) = (i * n / k, (i + 1) * n / k);
                ids[lo..hi].to_vec()
            };
            (0..k)
                .map(|i| {
                    let mut c = cut(&d0, i);
                    c.extend(cut(&d1, i));
                    c
                })
                .collect()
        }
        Scheme::FullNoniid => {
            if k % 2 != 0 {
                return Err(Error::Config(format!("full_noniid needs an even client count, got {k}")));
            }
            let half = k / 2;
            let mut clients = Vec::with_capacity(k);
            for i in 0..half {
                let (lo, hi) = (i * d0.len() / half, (i + 1) * d0.len() / half);
                clients.push(d0[lo..hi].to_vec());
            }
            for i in 0..half {
                let (lo, hi) = (i * d1.len() / half, (i + 1) * d1.len() / half);
                clients.push(d1[lo..hi].to_vec());
            }
            clients
        }
        Scheme::Dirichlet => {
            let dir = Dirichlet::new_with_size(DIRICHLET_ALPHA, k)
                .map_err(|e| Error::Config(format!("dirichlet setup: {e}")))?;
            let mut clients = vec![Vec::new(); k];
            for ids in [&d0, &d1] {
                let props = dir.sample(rng);
                let counts = largest_remainder(&props, ids.len());
                let mut cursor = 0;
                for (c, &n) in counts.iter().enumerate() {
                    clients[c].extend_from_slice(&ids[cursor..cursor + n]);
                    cursor += n;
                }
            }
            clients
        }
    };
    Ok(build(clients, scheme, train))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate::{generate_dataset, DataConfig};
    use crate::rng::{stream, SeedSplitter};
    use std::collections::HashSet;

    fn dataset() -> Vec<Sample> {
        let cfg = DataConfig { train_size: 80, val_size: 10, test_size: 10, ..DataConfig::default() };
        generate_dataset(&cfg).unwrap().train
    }

    fn rng() -> ChaCha8Rng {
        SeedSplitter::new(5).stream(stream::SPLIT)
    }

    fn assert_exact_cover(split: &FederatedSplit, train: &[Sample]) {
        let mut seen = HashSet::new();
        for c in &split.clients {
            for &id in c {
                assert!(seen.insert(id), "sample {id} assigned twice");
            }
        }
        assert_eq!(seen.len(), train.len());
    }

    #[test]
    fn iid_gives_equal_halved_shards() {
        let train = dataset();
        let split = partition(&train, Scheme::Iid, 10, &mut rng()).unwrap();
        assert_exact_cover(&split, &train);
        for (ids, counts) in split.clients.iter().zip(&split.domain_counts) {
            assert_eq!(ids.len(), 8);
            assert_eq!(counts, &[4, 4]);
        }
    }

    #[test]
    fn full_noniid_shards_are_single_domain() {
        let train = dataset();
        let split = partition(&train, Scheme::FullNoniid, 10, &mut rng()).unwrap();
        assert_exact_cover(&split, &train);
        for counts in &split.domain_counts {
            assert!(counts[0] == 0 || counts[1] == 0, "mixed shard: {counts:?}");
            assert_eq!(counts[0] + counts[1], 8);
        }
        assert!(partition(&train, Scheme::FullNoniid, 9, &mut rng()).is_err());
    }

    #[test]
    fn dirichlet_covers_and_reproduces() {
        let train = dataset();
        let a = partition(&train, Scheme::Dirichlet, 10, &mut rng()).unwrap();
        assert_exact_cover(&a, &train);
        let b = partition(&train, Scheme::Dirichlet, 10, &mut rng()).unwrap();
        assert_eq!(a, b);
        // heterogeneous by construction: client sizes spread out
        let sizes: Vec<usize> = a.clients.iter().map(|c| c.len()).collect();
        assert!(sizes.iter().max() != sizes.iter().min(), "dirichlet split came out uniform: {sizes:?}");
    }

    #[test]
    fn largest_remainder_hits_totals() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 5), vec![3, 2]);
        assert_eq!(largest_remainder(&[0.2, 0.3, 0.5], 10), vec![2, 3, 5]);
        let props = [0.119, 0.301, 0.58];
        let c = largest_remainder(&props, 7);
        assert_eq!(c.iter().sum::<usize>(), 7);
    }
}
