//! Layered neighbor sampling, negative edge sampling and k-shot splits.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::Rng;

/// Fanout value that keeps every neighbor.
pub const UNBOUNDED: usize = usize::MAX;

/// Subgraph produced by [`sample_subgraph`]. Node `i` of `graph` is node
/// `mapping[i]` of the source graph; seeds occupy the first positions in
/// the order given.
#[derive(Debug, Clone)]
pub struct Sampled {
    pub graph: Graph,
    pub mapping: Vec<usize>,
}

/// Layered neighbor sampling: at layer `l` every node first reached at
/// layer `l - 1` draws up to `fanouts[l]` neighbors without replacement.
/// The result is the subgraph induced on all reached nodes.
pub fn sample_subgraph(graph: &Graph, seeds: &[usize], fanouts: &[usize], rng: &mut Rng) -> Result<Sampled> {
    if seeds.is_empty() {
        return Err(Error::Precondition("sample_subgraph needs at least one seed".into()));
    }
    if let Some(&bad) = seeds.iter().find(|&&s| s >= graph.num_nodes()) {
        return Err(Error::Precondition(format!("seed {bad} out of range")));
    }
    let mut mapping: Vec<usize> = Vec::new();
    let mut local: BTreeMap<usize, usize> = BTreeMap::new();
    let mut frontier = Vec::new();
    for &s in seeds {
        if let std::collections::btree_map::Entry::Vacant(e) = local.entry(s) {
            e.insert(mapping.len());
            mapping.push(s);
            frontier.push(s);
        }
    }
    for &fanout in fanouts {
        let mut next = Vec::new();
        for &v in &frontier {
            let neigh = graph.neighbors(v);
            let picked: Vec<usize> = if fanout >= neigh.len() {
                neigh.iter().map(|&(u, _)| u).collect()
            } else {
                index::sample(rng, neigh.len(), fanout)
                    .iter()
                    .map(|i| neigh[i].0)
                    .collect()
            };
            for u in picked {
                if let std::collections::btree_map::Entry::Vacant(e) = local.entry(u) {
                    e.insert(mapping.len());
                    mapping.push(u);
                    next.push(u);
                }
            }
        }
        frontier = next;
    }
    let mut edges = Vec::new();
    let mut edge_ids = Vec::new();
    for (e, &(u, v)) in graph.edges().iter().enumerate() {
        if let (Some(&a), Some(&b)) = (local.get(&u), local.get(&v)) {
            edges.push((a, b));
            edge_ids.push(e);
        }
    }
    let feats = graph.node_features().gather_rows(&mapping)?;
    let edge_features = graph.edge_features().map(|ef| ef.gather_rows(&edge_ids)).transpose()?;
    let labels = graph.labels().map(|ls| mapping.iter().map(|&v| ls[v]).collect());
    let sub = Graph::from_parts(
        mapping.len(),
        edges,
        feats,
        edge_features,
        labels,
        graph.num_classes(),
        BTreeMap::new(),
    )?;
    Ok(Sampled { graph: sub, mapping })
}

/// `k` distinct node pairs `(u, v)` with `u < v` that are not edges.
pub fn negative_edge_sample(graph: &Graph, k: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    let n = graph.num_nodes();
    let universe = n * n.saturating_sub(1) / 2 - graph.num_edges();
    if k > universe {
        return Err(Error::Precondition(format!(
            "requested {k} negative edges but only {universe} non-edges exist"
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if 2 * k > universe {
        let mut all = Vec::with_capacity(universe);
        for u in 0..n {
            for v in u + 1..n {
                if !graph.has_edge(u, v) {
                    all.push((u, v));
                }
            }
        }
        return Ok(index::sample(rng, all.len(), k).iter().map(|i| all[i]).collect());
    }
    let mut seen = HashSet::with_capacity(k);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let u = rng.gen_range(0..n);
        let v = rng.gen_range(0..n);
        if u == v || graph.has_edge(u, v) {
            continue;
        }
        let pair = (u.min(v), u.max(v));
        if seen.insert(pair) {
            out.push(pair);
        }
    }
    Ok(out)
}

/// Picks exactly `k` indices per class for training; the rest go to
/// evaluation. Returns `(train, eval)` index lists into `labels`.
pub fn kshot_indices(labels: &[usize], k: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut train = Vec::new();
    for (class, members) in &by_class {
        if members.len() < k {
            return Err(Error::Precondition(format!(
                "class {class} has {} instances, fewer than k = {k}",
                members.len()
            )));
        }
        let mut shuffled = members.clone();
        shuffled.shuffle(rng);
        train.extend_from_slice(&shuffled[..k]);
    }
    let chosen: BTreeSet<usize> = train.iter().copied().collect();
    let eval = (0..labels.len()).filter(|i| !chosen.contains(i)).collect();
    Ok((train, eval))
}
