//! Graphlet kernel: frequencies of connected induced subgraph types.
//!
//! Types are identified through a lookup table over every labeled
//! adjacency bitmask on `k` nodes, built once by brute-force
//! canonicalization (minimum mask over all `k!` relabelings).

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphletConfig {
    /// Graphlet size `k` in {3, 4, 5}.
    pub size: usize,
    pub samples: usize,
    pub seed: u64,
    /// Enumerate every connected `k`-subset instead of sampling.
    pub exact: bool,
}

impl Default for GraphletConfig {
    fn default() -> Self {
        Self {
            size: 5,
            samples: 10_000,
            seed: 0,
            exact: false,
        }
    }
}

impl GraphletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(3..=5).contains(&self.size) {
            return Err(Error::Precondition(format!("graphlet size {} not in 3..=5", self.size)));
        }
        if self.samples == 0 {
            return Err(Error::Precondition("graphlet samples must be >= 1".into()));
        }
        Ok(())
    }
}

const DISCONNECTED: u16 = u16::MAX;

/// Connected graphlet types on `k` nodes.
pub struct GraphletCatalog {
    size: usize,
    /// Canonical mask of each type, sorted ascending.
    types: Vec<u32>,
    /// Type index per labeled mask, `DISCONNECTED` for disconnected masks.
    lookup: Vec<u16>,
}

fn pair_bit(k: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i < j { (i, j) } else { (j, i) };
    // Row-major index into the strict upper triangle.
    i * k - i * (i + 1) / 2 + (j - i - 1)
}

fn mask_connected(k: usize, mask: u32) -> bool {
    let mut seen = 1u32;
    let mut frontier = vec![0];
    while let Some(u) = frontier.pop() {
        for w in 0..k {
            if w != u && seen & (1 << w) == 0 && mask & (1 << pair_bit(k, u, w)) != 0 {
                seen |= 1 << w;
                frontier.push(w);
            }
        }
    }
    seen.count_ones() as usize == k
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

fn permute_mask(k: usize, mask: u32, perm: &[usize]) -> u32 {
    let mut out = 0;
    for i in 0..k {
        for j in i + 1..k {
            if mask & (1 << pair_bit(k, i, j)) != 0 {
                out |= 1 << pair_bit(k, perm[i], perm[j]);
            }
        }
    }
    out
}

impl GraphletCatalog {
    fn build(k: usize) -> Self {
        let bits = k * (k - 1) / 2;
        let perms = permutations(k);
        let mut canon = vec![u32::MAX; 1 << bits];
        for mask in 0..(1u32 << bits) {
            if mask_connected(k, mask) {
                canon[mask as usize] = perms.iter().map(|p| permute_mask(k, mask, p)).min().unwrap();
            }
        }
        let mut types: Vec<u32> = canon.iter().copied().filter(|&c| c != u32::MAX).collect();
        types.sort_unstable();
        types.dedup();
        let lookup = canon
            .iter()
            .map(|&c| {
                if c == u32::MAX {
                    DISCONNECTED
                } else {
                    types.binary_search(&c).unwrap() as u16
                }
            })
            .collect();
        Self { size: k, types, lookup }
    }

    pub fn get(k: usize) -> &'static GraphletCatalog {
        static CATALOGS: [OnceLock<GraphletCatalog>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
        assert!((3..=5).contains(&k), "graphlet size {k} not in 3..=5");
        CATALOGS[k - 3].get_or_init(|| Self::build(k))
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    /// Edge count of each type, in type order.
    pub fn edge_counts(&self) -> Vec<u32> {
        self.types.iter().map(|m| m.count_ones()).collect()
    }

    /// Type index of the subgraph induced by `nodes`, `None` if disconnected.
    pub fn classify(&self, g: &Graph, nodes: &[usize]) -> Option<usize> {
        let k = self.size;
        let mut mask = 0u32;
        for i in 0..k {
            for j in i + 1..k {
                if g.has_edge(nodes[i], nodes[j]) {
                    mask |= 1 << pair_bit(k, i, j);
                }
            }
        }
        match self.lookup[mask as usize] {
            DISCONNECTED => None,
            t => Some(t as usize),
        }
    }
}

/// Calls `visit` once per connected induced `k`-node subgraph
/// (ESU enumeration).
pub fn for_each_connected_subset(g: &Graph, k: usize, mut visit: impl FnMut(&[usize])) {
    fn extend(
        g: &Graph,
        k: usize,
        root: usize,
        sub: &mut Vec<usize>,
        ext: Vec<usize>,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if sub.len() == k {
            visit(sub);
            return;
        }
        let mut ext = ext;
        while let Some(w) = ext.pop() {
            let mut next = ext.clone();
            for &(u, _) in g.neighbors(w) {
                if u <= root || sub.contains(&u) || u == w || next.contains(&u) {
                    continue;
                }
                let touches_sub = sub.iter().any(|&s| g.has_edge(s, u));
                if !touches_sub {
                    next.push(u);
                }
            }
            sub.push(w);
            extend(g, k, root, sub, next, visit);
            sub.pop();
        }
    }
    for v in 0..g.num_nodes() {
        let ext: Vec<usize> = g.neighbors(v).iter().map(|&(u, _)| u).filter(|&u| u > v).collect();
        let mut sub = vec![v];
        extend(g, k, v, &mut sub, ext, &mut visit);
    }
}

/// Normalized type-frequency vector of connected `k`-graphlets.
pub fn graphlet_frequencies(g: &Graph, cfg: &GraphletConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let k = cfg.size;
    if g.num_nodes() < k {
        return Err(Error::Precondition(format!(
            "graph with {} nodes is smaller than graphlet size {}",
            g.num_nodes(),
            k
        )));
    }
    let catalog = GraphletCatalog::get(k);
    let mut counts = vec![0u64; catalog.num_types()];
    if cfg.exact {
        for_each_connected_subset(g, k, |nodes| {
            let t = catalog.classify(g, nodes).expect("enumerated subsets are connected");
            counts[t] += 1;
        });
    } else {
        let mut rng = rng::stream(cfg.seed, "graphlet", 0);
        let max_attempts = (cfg.samples as u64) * 10_000 + 1_000_000;
        let mut accepted = 0;
        let mut attempts = 0u64;
        let mut nodes = vec![0; k];
        while accepted < cfg.samples {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::Domain(format!(
                    "only {accepted} connected {k}-graphlets after {max_attempts} draws"
                )));
            }
            for (slot, v) in nodes
                .iter_mut()
                .zip(rand::seq::index::sample(&mut rng, g.num_nodes(), k).iter())
            {
                *slot = v;
            }
            if let Some(t) = catalog.classify(g, &nodes) {
                counts[t] += 1;
                accepted += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Domain(format!("graph has no connected {k}-graphlets")));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Cosine of the two graphs' graphlet frequency vectors.
pub fn graphlet_similarity(g1: &Graph, g2: &Graph, cfg: &GraphletConfig) -> Result<f64> {
    let a = graphlet_frequencies(g1, cfg)?;
    let b = graphlet_frequencies(g2, cfg)?;
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok((dot / (na * nb)).min(1.0))
}
