//! Planted cluster-transition interaction data.

use rand::Rng as _;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, IdMap, InteractionSequence};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_items: usize,
    pub n_clusters: usize,
    pub n_users: usize,
    pub seq_len: usize,
    /// Probability of moving to the successor cluster.
    pub p_next: f64,
    /// Probability of staying in the current cluster.
    pub p_stay: f64,
    /// Zipf exponent of item popularity inside a cluster.
    pub zipf: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_items: 200,
            n_clusters: 10,
            n_users: 2000,
            seq_len: 10,
            p_next: 0.7,
            p_stay: 0.2,
            zipf: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 || self.n_items < self.n_clusters || self.n_users == 0 || self.seq_len < 2 {
            return Err(Error::Config("invalid synthetic data shape".into()));
        }
        if !(self.p_next >= 0.0 && self.p_stay >= 0.0 && self.p_next + self.p_stay <= 1.0) {
            return Err(Error::Config("transition probabilities must sum to at most 1".into()));
        }
        Ok(())
    }

    /// Cluster of item `i` (1-based); clusters are contiguous ID blocks.
    pub fn cluster_of(&self, item: usize) -> usize {
        (item - 1) * self.n_clusters / self.n_items
    }

    pub fn cluster_items(&self, c: usize) -> Vec<usize> {
        (1..=self.n_items).filter(|&i| self.cluster_of(i) == c).collect()
    }
}

/// Sequences whose clusters follow a Markov chain: successor with `p_next`,
/// stay with `p_stay`, otherwise a uniform cluster. Items are drawn by a
/// Zipf law within the cluster.
pub fn planted_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let members: Vec<Vec<usize>> = (0..spec.n_clusters).map(|c| spec.cluster_items(c)).collect();
    let pickers: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| {
            let w: Vec<f64> = (0..m.len()).map(|r| 1.0 / ((r + 1) as f64).powf(spec.zipf)).collect();
            WeightedIndex::new(w).expect("positive weights")
        })
        .collect();
    let mut r = rng::stream(spec.seed, &[rng::tag::INIT, 77]);
    let mut sequences = Vec::with_capacity(spec.n_users);
    for u in 0..spec.n_users {
        let mut c = r.random_range(0..spec.n_clusters);
        let mut items = Vec::with_capacity(spec.seq_len);
        for t in 0..spec.seq_len {
            if t > 0 {
                let x: f64 = r.random();
                c = if x < spec.p_next {
                    (c + 1) % spec.n_clusters
                } else if x < spec.p_next + spec.p_stay {
                    c
                } else {
                    r.random_range(0..spec.n_clusters)
                };
            }
            items.push(members[c][pickers[c].sample(&mut r)]);
        }
        sequences.push(InteractionSequence::new(u + 1, items));
    }
    Ok(Dataset {
        sequences,
        n_items: spec.n_items,
        item_ids: IdMap::identity(spec.n_items),
        user_ids: IdMap::identity(spec.n_users),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_transitions() {
        let spec = SyntheticSpec {
            n_users: 400,
            ..Default::default()
        };
        let d = planted_dataset(&spec).unwrap();
        assert_eq!(d.sequences.len(), 400);
        assert!(d.sequences.iter().all(|s| s.items.len() == 10));
        let (mut next, mut total) = (0usize, 0usize);
        for s in &d.sequences {
            s.validate(d.n_items).unwrap();
            for w in s.items.windows(2) {
                total += 1;
                if spec.cluster_of(w[1]) == (spec.cluster_of(w[0]) + 1) % 10 {
                    next += 1;
                }
            }
        }
        let frac = next as f64 / total as f64;
        assert!((frac - 0.71).abs() < 0.03, "{frac}");
        assert_eq!(spec.cluster_items(3).len(), 20);
        assert_eq!(planted_dataset(&spec).unwrap().sequences, d.sequences);
    }
}
