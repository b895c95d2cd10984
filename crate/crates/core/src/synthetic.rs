//! Synthetic block graphs for transferability experiments, plus a labeled
//! community graph generator for fine-tuning experiments.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use treevocab_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::Rng;

/// Six-node building blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    /// Hub `0` with leaves `3`, `4`, `5` and a tail `0-1-2`.
    Spider,
    /// 6-cycle `0-4-2-3-1-5-0`.
    Hexagon,
    /// Clique on `0..=3` with pendant `5` on `0` and pendant `4` on `1`.
    PendantClique,
}

impl Block {
    pub const SIZE: usize = 6;

    pub fn edges(self) -> &'static [(usize, usize)] {
        match self {
            Block::Spider => &[(0, 1), (0, 3), (0, 4), (0, 5), (1, 2)],
            Block::Hexagon => &[(0, 4), (0, 5), (1, 3), (1, 5), (2, 3), (2, 4)],
            Block::PendantClique => &[(0, 1), (0, 2), (0, 3), (0, 5), (1, 2), (1, 3), (1, 4), (2, 3)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    G1,
    G2,
    G3,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::G1, Family::G2, Family::G3];
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::G1 => "g1",
            Family::G2 => "g2",
            Family::G3 => "g3",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "g1" => Ok(Family::G1),
            "g2" => Ok(Family::G2),
            "g3" => Ok(Family::G3),
            other => Err(Error::Precondition(format!(
                "unknown family `{other}` (expected g1, g2 or g3)"
            ))),
        }
    }
}

/// How one family lays out its blocks: copies of one block chained by a
/// bridge from `out_port` of each copy to `in_port` of the next.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    pub block: Block,
    pub in_port: usize,
    pub out_port: usize,
}

impl BlockLayout {
    pub fn edges(&self, num_blocks: usize) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for i in 0..num_blocks {
            let base = i * Block::SIZE;
            edges.extend(self.block.edges().iter().map(|&(u, v)| (base + u, base + v)));
            if i > 0 {
                edges.push((base - Block::SIZE + self.out_port, base + self.in_port));
            }
        }
        edges
    }
}

/// A synthetic family with a block count.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFamily {
    pub family: Family,
    pub num_blocks: usize,
}

impl SyntheticFamily {
    pub fn new(family: Family, num_blocks: usize) -> Result<Self> {
        if num_blocks == 0 {
            return Err(Error::Precondition("num_blocks must be >= 1".into()));
        }
        Ok(Self { family, num_blocks })
    }

    pub fn layout(&self) -> BlockLayout {
        layout_of(self.family)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_blocks * Block::SIZE
    }
}

/// G1 and G2 share small motifs (both are triangle-free) while their
/// degree profiles differ; G3 contains triangles but its hub-and-leaf
/// degree profile resembles G1's.
pub fn layout_of(family: Family) -> BlockLayout {
    let (block, in_port, out_port) = match family {
        Family::G1 => (Block::Spider, 1, 1),
        Family::G2 => (Block::Hexagon, 0, 0),
        Family::G3 => (Block::PendantClique, 3, 2),
    };
    BlockLayout {
        block,
        in_port,
        out_port,
    }
}

/// Topology from the family layout, node features uniform on `[0, 1)`.
pub fn build_synthetic(spec: &SyntheticFamily, feature_dim: usize, rng: &mut Rng) -> Result<Graph> {
    build_from_layout(&spec.layout(), spec.num_blocks, feature_dim, rng)
}

pub fn build_from_layout(layout: &BlockLayout, num_blocks: usize, feature_dim: usize, rng: &mut Rng) -> Result<Graph> {
    if num_blocks == 0 {
        return Err(Error::Precondition("num_blocks must be >= 1".into()));
    }
    let n = num_blocks * Block::SIZE;
    let feats = Tensor::from_fn(n, feature_dim, |_, _| rng.gen::<f64>());
    Graph::new(n, layout.edges(num_blocks), feats)
}

/// Stochastic block model with class-conditional Gaussian features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledConfig {
    pub num_classes: usize,
    pub nodes_per_class: usize,
    /// Edge probability inside a class.
    pub p_in: f64,
    /// Edge probability across classes.
    pub p_out: f64,
    pub feature_dim: usize,
    /// Norm of each class mean.
    pub signal: f64,
    /// Standard deviation of the per-entry feature noise.
    pub noise: f64,
}

impl Default for LabeledConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            nodes_per_class: 60,
            p_in: 0.08,
            p_out: 0.01,
            feature_dim: 8,
            signal: 1.0,
            noise: 1.0,
        }
    }
}

impl LabeledConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.nodes_per_class == 0 || self.feature_dim == 0 {
            return Err(Error::Precondition(
                "labeled graph needs >= 2 classes, >= 1 node per class and feature_dim >= 1".into(),
            ));
        }
        for (name, p) in [("p_in", self.p_in), ("p_out", self.p_out)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Precondition(format!("{name} must be a probability, got {p}")));
            }
        }
        if self.signal < 0.0 || self.noise < 0.0 {
            return Err(Error::Precondition("signal and noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Node `v` has label `v % num_classes`. Each class mean is a random
/// direction scaled to `signal`; features add isotropic Gaussian noise.
pub fn build_labeled(cfg: &LabeledConfig, rng: &mut Rng) -> Result<Graph> {
    cfg.validate()?;
    let n = cfg.num_classes * cfg.nodes_per_class;
    let d = cfg.feature_dim;
    let labels: Vec<usize> = (0..n).map(|v| v % cfg.num_classes).collect();
    let means: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| {
            let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            dir.iter().map(|x| cfg.signal * x / norm).collect()
        })
        .collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { cfg.p_in } else { cfg.p_out };
            if rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let feats = Tensor::from_fn(n, d, |v, j| {
        means[labels[v]][j] + cfg.noise * rng.sample::<f64, _>(StandardNormal)
    });
    Graph::new(n, edges, feats)?.with_labels(labels, cfg.num_classes)
}
