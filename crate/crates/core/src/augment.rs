//! Stochastic graph augmentation: independent edge dropping and per-entry
//! feature masking.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{self, Rng};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub edge_drop_rate: f64,
    pub feature_drop_rate: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            edge_drop_rate: 0.2,
            feature_drop_rate: 0.2,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("edge_drop_rate", self.edge_drop_rate),
            ("feature_drop_rate", self.feature_drop_rate),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Precondition(format!("{name} must be in [0, 1), got {r}")));
            }
        }
        Ok(())
    }
}

/// Augments with the stream derived from `cfg.seed`.
pub fn augment(graph: &Graph, cfg: &AugmentConfig) -> Result<Graph> {
    augment_with(graph, cfg, &mut rng::stream(cfg.seed, "augment", 0))
}

/// Drops each undirected edge with `edge_drop_rate` and zeroes each feature
/// entry with `feature_drop_rate`. Labels and splits are kept.
pub fn augment_with(graph: &Graph, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Graph> {
    cfg.validate()?;
    let mut kept = Vec::with_capacity(graph.num_edges());
    for e in 0..graph.num_edges() {
        if rng.gen::<f64>() >= cfg.edge_drop_rate {
            kept.push(e);
        }
    }
    let edges = kept.iter().map(|&e| graph.edges()[e]).collect();
    let edge_features = graph.edge_features().map(|ef| ef.gather_rows(&kept)).transpose()?;
    let mut feats = graph.node_features().clone();
    for v in feats.data_mut() {
        if rng.gen::<f64>() < cfg.feature_drop_rate {
            *v = 0.0;
        }
    }
    Graph::from_parts(
        graph.num_nodes(),
        edges,
        feats,
        edge_features,
        graph.labels().map(<[usize]>::to_vec),
        graph.num_classes(),
        graph.splits().clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use treevocab_autodiff::Tensor;

    fn ring(n: usize) -> Graph {
        let edges = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Graph::new(n, edges, Tensor::ones(&[n, 3])).unwrap()
    }

    #[test]
    fn zero_rates_leave_graph_unchanged() {
        let g = ring(6);
        let cfg = AugmentConfig {
            edge_drop_rate: 0.0,
            feature_drop_rate: 0.0,
            seed: 4,
        };
        assert_eq!(augment(&g, &cfg).unwrap(), g);
    }

    #[test]
    fn rate_one_is_rejected() {
        let cfg = AugmentConfig {
            edge_drop_rate: 1.0,
            ..Default::default()
        };
        assert!(augment(&ring(4), &cfg).is_err());
    }
}
