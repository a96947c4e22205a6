//! Desk-scale stand-in for a pair of real domains.
//!
//! Both domains draw their item encodings around one shared set of latent
//! content clusters, and user sequences follow one shared cluster-to-cluster
//! transition map. Users, items and ids never overlap between domains.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DomainDataset, DomainId, InteractionSequence, TextEncodingMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub domains: [String; 2],
    pub users: [usize; 2],
    pub items: [usize; 2],
    pub min_len: usize,
    pub max_len: usize,
    pub clusters: usize,
    pub dim: usize,
    /// Standard deviation of item encodings around their cluster center.
    pub spread: f64,
    /// Probability that the next item follows the shared transition map
    /// rather than jumping to a random cluster.
    pub follow_prob: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            domains: ["source".into(), "target".into()],
            users: [400, 60],
            items: [120, 120],
            min_len: 6,
            max_len: 12,
            clusters: 12,
            dim: 32,
            spread: 0.3,
            follow_prob: 0.85,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDomain {
    pub dataset: DomainDataset,
    pub encodings: TextEncodingMatrix,
}

pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<[SyntheticDomain; 2]> {
    if cfg.clusters == 0 || cfg.items.iter().any(|&n| cfg.clusters > n) {
        return Err(Error::config(format!(
            "cluster count {} exceeds items per domain {:?}",
            cfg.clusters, cfg.items
        )));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::config("synthetic length range is empty"));
    }
    if cfg.dim == 0 || cfg.users.contains(&0) {
        return Err(Error::config("synthetic dim and user counts must be positive"));
    }
    if cfg.domains[0] == cfg.domains[1] {
        return Err(Error::config("synthetic domains need distinct names"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = Array2::from_shape_simple_fn((cfg.clusters, cfg.dim), || {
        rng.sample::<f64, _>(StandardNormal)
    });
    let mut next_cluster: Vec<usize> = (0..cfg.clusters).collect();
    next_cluster.shuffle(&mut rng);

    let mut out = Vec::with_capacity(2);
    for d in 0..2 {
        let name = &cfg.domains[d];
        let n_items = cfg.items[d];
        let cluster_of = |i: usize| i % cfg.clusters;

        let mut enc = Array2::zeros((n_items, cfg.dim));
        for i in 0..n_items {
            let c = cluster_of(i);
            for k in 0..cfg.dim {
                let noise: f64 = rng.sample(StandardNormal);
                enc[[i, k]] = centers[[c, k]] + cfg.spread * noise;
            }
        }

        // Zipf-like popularity within each cluster.
        let members: Vec<Vec<usize>> = (0..cfg.clusters)
            .map(|c| (c..n_items).step_by(cfg.clusters).collect())
            .collect();
        let pickers: Vec<WeightedIndex<f64>> = members
            .iter()
            .map(|m| WeightedIndex::new((0..m.len()).map(|r| 1.0 / (r as f64 + 1.0))).unwrap())
            .collect();

        let mut sequences = Vec::with_capacity(cfg.users[d]);
        for u in 0..cfg.users[d] {
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let mut c = rng.random_range(0..cfg.clusters);
            let mut items = Vec::with_capacity(len);
            for _ in 0..len {
                items.push(members[c][pickers[c].sample(&mut rng)]);
                c = if rng.random::<f64>() < cfg.follow_prob {
                    next_cluster[c]
                } else {
                    rng.random_range(0..cfg.clusters)
                };
            }
            sequences.push(InteractionSequence {
                user: format!("{name}_u{u}"),
                items,
            });
        }

        let dataset = DomainDataset {
            domain: DomainId::new(name.clone())?,
            sequences,
            item_count: n_items,
            item_ids: (0..n_items).map(|i| format!("{name}_i{i}")).collect(),
            item_rows: (0..n_items).collect(),
        };
        dataset.validate()?;
        out.push(SyntheticDomain {
            dataset,
            encodings: TextEncodingMatrix::new(enc)?,
        });
    }
    let b = out.pop().unwrap();
    let a = out.pop().unwrap();
    Ok([a, b])
}
