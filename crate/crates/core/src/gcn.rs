//! Graph autoencoder: two symmetric-normalized GCN layers and an
//! inner-product edge decoder.

use serde::{Deserialize, Serialize};
use treevocab_autodiff::{OptimizerState, ParamBinder, Parameters, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{glorot, ParamSource};
use crate::rng::Rng;

/// `D^-1/2 (A + I) D^-1/2` as a dense matrix.
pub fn normalized_adjacency(graph: &Graph) -> Tensor {
    let n = graph.num_nodes();
    let deg: Vec<f64> = (0..n).map(|v| graph.degree(v) as f64 + 1.0).collect();
    let mut a = Tensor::zeros(&[n, n]);
    for (v, &d) in deg.iter().enumerate() {
        a.set(v, v, 1.0 / d);
    }
    for &(u, v) in graph.edges() {
        let w = 1.0 / (deg[u] * deg[v]).sqrt();
        a.set(u, v, w);
        a.set(v, u, w);
    }
    a
}

/// One propagation `act(A_hat H W)`.
pub fn gcn_forward<'t>(a_hat: Var<'t>, h: Var<'t>, w: Var<'t>, relu: bool) -> Result<Var<'t>> {
    let out = a_hat.matmul(h.matmul(w)?)?;
    Ok(if relu { out.relu() } else { out })
}

/// Edge logits `Z Z^T`.
pub fn inner_product_decode<'t>(z: Var<'t>) -> Result<Var<'t>> {
    Ok(z.matmul(z.transpose()?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaeConfig {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 4,
            epochs: 200,
            lr: 1e-3,
            weight_decay: 0.0,
        }
    }
}

/// Two-layer GCN encoder: relu on the first layer, linear second layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gcn {
    pub w0: Tensor,
    pub w1: Tensor,
}

impl Gcn {
    pub fn new(input_dim: usize, hidden_dim: usize, rng: &mut Rng) -> Self {
        Self {
            w0: glorot(input_dim, hidden_dim, rng),
            w1: glorot(hidden_dim, hidden_dim, rng),
        }
    }

    pub fn forward<'t>(&self, src: &ParamSource<'_, 't>, graph: &Graph) -> Result<Var<'t>> {
        if graph.feature_dim() != self.w0.rows() {
            return Err(Error::Shape(format!(
                "gcn expects {} input features, graph has {}",
                self.w0.rows(),
                graph.feature_dim()
            )));
        }
        let tape = src.tape();
        let a = tape.constant(normalized_adjacency(graph));
        let x = tape.constant(graph.node_features().clone());
        let h = gcn_forward(a, x, src.var("gcn.w0", &self.w0), true)?;
        gcn_forward(a, h, src.var("gcn.w1", &self.w1), false)
    }

    pub fn embed(&self, graph: &Graph) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.forward(&ParamSource::Frozen(&tape), graph)?.value())
    }
}

impl Parameters for Gcn {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("gcn.w0", &self.w0);
        f("gcn.w1", &self.w1);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("gcn.w0", &mut self.w0);
        f("gcn.w1", &mut self.w1);
    }
}

/// Balanced reconstruction loss: mean BCE over all node pairs that are edges
/// (self-pairs included) plus mean BCE over all remaining pairs.
pub fn reconstruction_loss<'t>(logits: Var<'t>, graph: &Graph) -> Result<Var<'t>> {
    let n = graph.num_nodes();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u == v || graph.has_edge(u, v) {
                pos.push(u * n + v);
            } else {
                neg.push(u * n + v);
            }
        }
    }
    let flat = logits.reshape(&[n * n, 1])?;
    let mut loss = flat
        .gather_rows(&pos)?
        .bce_with_logits(&Tensor::ones(&[pos.len(), 1]))?;
    if !neg.is_empty() {
        loss = loss.add(
            flat.gather_rows(&neg)?
                .bce_with_logits(&Tensor::zeros(&[neg.len(), 1]))?,
        )?;
    }
    Ok(loss)
}

/// Trains a fresh GAE on `graph`; returns the model and per-epoch losses
/// measured before each update.
pub fn train_gae(graph: &Graph, cfg: &GaeConfig, rng: &mut Rng) -> Result<(Gcn, Vec<f64>)> {
    if graph.num_nodes() == 0 {
        return Err(Error::Precondition("gae needs a non-empty graph".into()));
    }
    let mut model = Gcn::new(graph.feature_dim(), cfg.hidden_dim, rng);
    let mut opt = OptimizerState::adamw(cfg.lr, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let tape = Tape::new();
        let binder = ParamBinder::new(&tape);
        let z = model.forward(&ParamSource::Train(&binder), graph)?;
        let loss = reconstruction_loss(inner_product_decode(z)?, graph)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite("gae reconstruction loss".into()));
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        opt.step(&mut model, &binder.collect(&grads))?;
    }
    Ok((model, losses))
}

/// Reconstruction loss of a model without training.
pub fn gae_loss(model: &Gcn, graph: &Graph) -> Result<f64> {
    let tape = Tape::new();
    let z = model.forward(&ParamSource::Frozen(&tape), graph)?;
    Ok(reconstruction_loss(inner_product_decode(z)?, graph)?.item())
}
