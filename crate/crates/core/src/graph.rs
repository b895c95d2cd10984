//! Undirected attributed graphs and their JSON file format.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use treevocab_autodiff::Tensor;

use crate::error::{Error, Result};

/// Undirected graph with dense node features.
///
/// Each edge is stored once as `(u, v)`; [`Graph::neighbors`] exposes both
/// directions for message passing. Instances are validated on construction
/// and immutable afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    node_features: Tensor,
    edge_features: Option<Tensor>,
    labels: Option<Vec<usize>>,
    num_classes: Option<usize>,
    splits: BTreeMap<String, Vec<usize>>,
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl Graph {
    pub fn new(num_nodes: usize, edges: Vec<(usize, usize)>, node_features: Tensor) -> Result<Self> {
        Self::from_parts(num_nodes, edges, node_features, None, None, None, BTreeMap::new())
    }

    /// Builds and validates a graph from all of its parts.
    pub fn from_parts(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        node_features: Tensor,
        edge_features: Option<Tensor>,
        labels: Option<Vec<usize>>,
        num_classes: Option<usize>,
        splits: BTreeMap<String, Vec<usize>>,
    ) -> Result<Self> {
        if node_features.rank() != 2 || node_features.rows() != num_nodes {
            return Err(Error::invalid(
                "node_features",
                format!("expected {} rows, got shape {:?}", num_nodes, node_features.shape()),
            ));
        }
        let mut seen = BTreeSet::new();
        for (i, &(u, v)) in edges.iter().enumerate() {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::invalid(
                    "edges",
                    format!("edge {i} ({u}, {v}) references a node >= num_nodes {num_nodes}"),
                ));
            }
            if u == v {
                return Err(Error::invalid("edges", format!("edge {i} is a self-loop on node {u}")));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(Error::invalid("edges", format!("edge {i} ({u}, {v}) is duplicated")));
            }
        }
        if let Some(ef) = &edge_features {
            if ef.rank() != 2 || ef.rows() != edges.len() {
                return Err(Error::invalid(
                    "edge_features",
                    format!("expected {} rows, got shape {:?}", edges.len(), ef.shape()),
                ));
            }
        }
        if let Some(ls) = &labels {
            if ls.len() != num_nodes {
                return Err(Error::invalid(
                    "labels",
                    format!("expected {} labels, got {}", num_nodes, ls.len()),
                ));
            }
            let classes =
                num_classes.ok_or_else(|| Error::invalid("num_classes", "required when labels are present"))?;
            if let Some(bad) = ls.iter().find(|&&l| l >= classes) {
                return Err(Error::invalid(
                    "labels",
                    format!("label {bad} >= num_classes {classes}"),
                ));
            }
        }
        for (name, idx) in &splits {
            if let Some(bad) = idx.iter().find(|&&i| i >= num_nodes.max(edges.len())) {
                return Err(Error::invalid(
                    "splits",
                    format!("split `{name}` index {bad} out of range"),
                ));
            }
        }
        let mut adjacency = vec![Vec::new(); num_nodes];
        for (e, &(u, v)) in edges.iter().enumerate() {
            adjacency[u].push((v, e));
            adjacency[v].push((u, e));
        }
        Ok(Self {
            num_nodes,
            edges,
            node_features,
            edge_features,
            labels,
            num_classes,
            splits,
            adjacency,
        })
    }

    pub fn with_labels(self, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        Self::from_parts(
            self.num_nodes,
            self.edges,
            self.node_features,
            self.edge_features,
            Some(labels),
            Some(num_classes),
            self.splits,
        )
    }

    pub fn with_edge_features(self, edge_features: Tensor) -> Result<Self> {
        Self::from_parts(
            self.num_nodes,
            self.edges,
            self.node_features,
            Some(edge_features),
            self.labels,
            self.num_classes,
            self.splits,
        )
    }

    pub fn with_split(mut self, name: &str, indices: Vec<usize>) -> Result<Self> {
        self.splits.insert(name.to_string(), indices);
        Self::from_parts(
            self.num_nodes,
            self.edges,
            self.node_features,
            self.edge_features,
            self.labels,
            self.num_classes,
            self.splits,
        )
    }

    /// Same topology and metadata with replaced node features.
    pub fn with_node_features(&self, node_features: Tensor) -> Result<Self> {
        Self::from_parts(
            self.num_nodes,
            self.edges.clone(),
            node_features,
            self.edge_features.clone(),
            self.labels.clone(),
            self.num_classes,
            self.splits.clone(),
        )
    }

    /// Side-by-side copy of `graphs` with node ids shifted; returns the
    /// union and each part's node offset. Labels and splits are dropped.
    pub fn disjoint_union(graphs: &[&Graph]) -> Result<(Graph, Vec<usize>)> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::invalid("graphs", "union of no graphs"))?;
        let d = first.feature_dim();
        let de = first.edge_features().map(Tensor::cols);
        let mut offsets = Vec::with_capacity(graphs.len());
        let (mut edges, mut x, mut ef) = (Vec::new(), Vec::new(), Vec::new());
        let mut n = 0;
        for g in graphs {
            if g.feature_dim() != d || g.edge_features().map(Tensor::cols) != de {
                return Err(Error::invalid(
                    "node_features",
                    "graphs in a union must share feature widths",
                ));
            }
            offsets.push(n);
            edges.extend(g.edges.iter().map(|&(u, v)| (u + n, v + n)));
            x.extend_from_slice(g.node_features.data());
            if let Some(t) = &g.edge_features {
                ef.extend_from_slice(t.data());
            }
            n += g.num_nodes;
        }
        let num_edges = edges.len();
        let mut union = Graph::new(n, edges, Tensor::new(vec![n, d], x)?)?;
        if let Some(c) = de {
            union = union.with_edge_features(Tensor::new(vec![num_edges, c], ef)?)?;
        }
        Ok((union, offsets))
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_features(&self) -> &Tensor {
        &self.node_features
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    pub fn edge_features(&self) -> Option<&Tensor> {
        self.edge_features.as_ref()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    pub fn splits(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.splits
    }

    /// `(neighbor, edge index)` pairs of `v`.
    pub fn neighbors(&self, v: usize) -> &[(usize, usize)] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency[u].iter().any(|&(w, _)| w == v)
    }

    /// Directed message list: for every undirected edge `(u, v)` both
    /// `u -> v` and `v -> u`, as `(source, target, edge index)`.
    pub fn messages(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.edges.len() * 2);
        for (e, &(u, v)) in self.edges.iter().enumerate() {
            out.push((u, v, e));
            out.push((v, u, e));
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        if self.num_nodes == 0 {
            return true;
        }
        let mut seen = vec![false; self.num_nodes];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &(w, _) in &self.adjacency[u] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        count == self.num_nodes
    }

    /// Relabels nodes so that old node `v` becomes `perm[v]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_nodes {
            return Err(Error::Precondition("permutation length must equal num_nodes".into()));
        }
        let d = self.feature_dim();
        let mut feats = Tensor::zeros(&[self.num_nodes, d]);
        for (v, &p) in perm.iter().enumerate() {
            feats.row_mut(p).copy_from_slice(self.node_features.row(v));
        }
        let edges = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let labels = self.labels.as_ref().map(|ls| {
            let mut out = vec![0; ls.len()];
            for (&p, &l) in perm.iter().zip(ls) {
                out[p] = l;
            }
            out
        });
        Self::from_parts(
            self.num_nodes,
            edges,
            feats,
            self.edge_features.clone(),
            labels,
            self.num_classes,
            BTreeMap::new(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse {
                line, column, message, ..
            } => Error::Parse {
                path: path.to_path_buf(),
                line,
                column,
                message,
            },
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: Default::default(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        file.into_graph()
    }

    pub fn to_json(&self) -> String {
        let file = GraphFile {
            num_nodes: self.num_nodes,
            edges: self.edges.iter().map(|&(u, v)| [u, v]).collect(),
            node_features: self.node_features.to_rows(),
            edge_features: self.edge_features.as_ref().map(Tensor::to_rows),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            splits: self.splits.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("graph serializes");
        s.push('\n');
        s
    }
}

/// On-disk layout. Field order here is the key order the writer emits.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    node_features: Vec<Vec<f64>>,
    #[serde(default)]
    edge_features: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    labels: Option<Vec<usize>>,
    #[serde(default)]
    num_classes: Option<usize>,
    #[serde(default)]
    splits: BTreeMap<String, Vec<usize>>,
}

impl GraphFile {
    fn into_graph(self) -> Result<Graph> {
        let node_features = if self.node_features.is_empty() {
            Tensor::zeros(&[0, 0])
        } else {
            Tensor::from_rows(&self.node_features).map_err(|e| Error::invalid("node_features", e.to_string()))?
        };
        let edge_features = match self.edge_features {
            Some(rows) if rows.is_empty() => Some(Tensor::zeros(&[0, 0])),
            Some(rows) => Some(Tensor::from_rows(&rows).map_err(|e| Error::invalid("edge_features", e.to_string()))?),
            None => None,
        };
        Graph::from_parts(
            self.num_nodes,
            self.edges.into_iter().map(|[u, v]| (u, v)).collect(),
            node_features,
            edge_features,
            self.labels,
            self.num_classes,
            self.splits,
        )
    }
}
