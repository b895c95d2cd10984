//! Weisfeiler-Lehman subtree kernel over feature-derived initial labels.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use treevocab_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WlConfig {
    /// Refinement rounds `h`.
    pub iterations: usize,
    /// Number of hash buckets for discretized node features.
    pub buckets: u64,
    pub seed: u64,
    /// Values above 1 resample uniform features per draw and average.
    pub redraws: usize,
}

impl Default for WlConfig {
    fn default() -> Self {
        Self {
            iterations: 2,
            buckets: 2,
            seed: 0,
            redraws: 100,
        }
    }
}

impl WlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buckets == 0 {
            return Err(Error::Precondition("wl buckets must be >= 1".into()));
        }
        Ok(())
    }
}

/// Initial WL label of a feature row: the row rounded to three decimals,
/// hashed into `buckets` buckets.
pub fn feature_bucket(row: &[f64], buckets: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &x in row {
        let q = (x * 1000.0).round() as i64;
        for b in q.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h % buckets
}

pub fn initial_labels(g: &Graph, buckets: u64) -> Vec<u64> {
    (0..g.num_nodes())
        .map(|v| feature_bucket(g.node_features().row(v), buckets))
        .collect()
}

/// Raw kernel values `(k(g1,g2), k(g1,g1), k(g2,g2))` summed over
/// iterations `0..=h`, refining both graphs with one shared relabeling
/// dictionary per round.
pub fn wl_kernel_raw(g1: &Graph, l1: &[u64], g2: &Graph, l2: &[u64], h: usize) -> (f64, f64, f64) {
    let mut labels = [l1.to_vec(), l2.to_vec()];
    let graphs = [g1, g2];
    let mut totals = (0.0, 0.0, 0.0);
    for round in 0..=h {
        let hist: Vec<BTreeMap<u64, u64>> = labels
            .iter()
            .map(|ls| {
                let mut m = BTreeMap::new();
                for &l in ls {
                    *m.entry(l).or_insert(0) += 1;
                }
                m
            })
            .collect();
        let dot = |a: &BTreeMap<u64, u64>, b: &BTreeMap<u64, u64>| -> f64 {
            a.iter().filter_map(|(k, &c)| b.get(k).map(|&d| (c * d) as f64)).sum()
        };
        totals.0 += dot(&hist[0], &hist[1]);
        totals.1 += dot(&hist[0], &hist[0]);
        totals.2 += dot(&hist[1], &hist[1]);
        if round == h {
            break;
        }
        let mut dictionary: BTreeMap<(u64, Vec<u64>), u64> = BTreeMap::new();
        let mut next = [Vec::new(), Vec::new()];
        for (gi, g) in graphs.iter().enumerate() {
            next[gi] = (0..g.num_nodes())
                .map(|v| {
                    let mut neigh: Vec<u64> = g.neighbors(v).iter().map(|&(u, _)| labels[gi][u]).collect();
                    neigh.sort_unstable();
                    let key = (labels[gi][v], neigh);
                    let fresh = dictionary.len() as u64;
                    *dictionary.entry(key).or_insert(fresh)
                })
                .collect();
        }
        labels = next;
    }
    totals
}

fn structure_fingerprint(g: &Graph) -> u64 {
    let mut edges: Vec<(usize, usize)> = g.edges().iter().map(|&(u, v)| (u.min(v), u.max(v))).collect();
    edges.sort_unstable();
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    eat(g.num_nodes() as u64);
    eat(g.feature_dim() as u64);
    for (u, v) in edges {
        eat(u as u64);
        eat(v as u64);
    }
    h
}

fn normalized(k12: f64, k11: f64, k22: f64) -> f64 {
    k12 / (k11 * k22).sqrt()
}

/// Normalized WL subtree similarity in `[0, 1]`.
pub fn wl_subtree_similarity(g1: &Graph, g2: &Graph, cfg: &WlConfig) -> Result<f64> {
    cfg.validate()?;
    if g1.num_nodes() == 0 || g2.num_nodes() == 0 {
        return Err(Error::Precondition("wl kernel needs non-empty graphs".into()));
    }
    if cfg.redraws <= 1 {
        let l1 = initial_labels(g1, cfg.buckets);
        let l2 = initial_labels(g2, cfg.buckets);
        let (k12, k11, k22) = wl_kernel_raw(g1, &l1, g2, &l2, cfg.iterations);
        return Ok(normalized(k12, k11, k22));
    }
    let mut total = 0.0;
    for r in 0..cfg.redraws {
        let draw_seed = rng::derive_seed(cfg.seed, "wl-redraw", r as u64);
        // Each graph's draw depends only on its own structure, so a graph
        // compared with itself sees identical features.
        let draw = |g: &Graph| -> Vec<u64> {
            let mut rng = rng::stream(draw_seed, "graph", structure_fingerprint(g));
            let d = g.feature_dim().max(1);
            let feats = Tensor::from_fn(g.num_nodes(), d, |_, _| rng.gen::<f64>());
            (0..g.num_nodes())
                .map(|v| feature_bucket(feats.row(v), cfg.buckets))
                .collect()
        };
        let l1 = draw(g1);
        let l2 = draw(g2);
        let (k12, k11, k22) = wl_kernel_raw(g1, &l1, g2, &l2, cfg.iterations);
        total += normalized(k12, k11, k22);
    }
    Ok(total / cfg.redraws as f64)
}
