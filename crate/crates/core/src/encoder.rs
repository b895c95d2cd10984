//! Sum-aggregation message-passing encoder producing computation-tree
//! embeddings.
//!
//! Each layer computes `sigma(norm(W1 h_v + relu(sum_u W2 (h_u + e_uv))))`.
//! Edge features enter the first layer only, where their width must equal
//! the node feature width.

use serde::{Deserialize, Serialize};
use treevocab_autodiff::{Parameters, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{glorot, BatchNorm, Mode, NormStats, ParamSource, Stateful};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub batch_norm: bool,
    /// Apply relu after the last layer too.
    pub final_activation: bool,
}

impl EncoderConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: 32,
            num_layers: 2,
            batch_norm: true,
            final_activation: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Precondition("encoder needs at least one layer".into()));
        }
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Precondition("encoder dimensions must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SageLayer {
    pub prefix: String,
    /// Self transform, `[d_in, d_out]`.
    pub w1: Tensor,
    /// Neighbor transform, `[d_in, d_out]`.
    pub w2: Tensor,
    pub norm: Option<BatchNorm>,
    pub activation: bool,
}

impl SageLayer {
    pub fn new(prefix: &str, d_in: usize, d_out: usize, batch_norm: bool, activation: bool, rng: &mut Rng) -> Self {
        Self {
            prefix: prefix.to_string(),
            w1: glorot(d_in, d_out, rng),
            w2: glorot(d_in, d_out, rng),
            norm: batch_norm.then(|| BatchNorm::new(&format!("{prefix}.norm"), d_out)),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn forward<'t>(
        &self,
        src: &ParamSource<'_, 't>,
        graph: &Graph,
        h: Var<'t>,
        edge_features: Option<&Tensor>,
        mode: Mode,
    ) -> Result<(Var<'t>, Option<NormStats>)> {
        let n = graph.num_nodes();
        let shape = h.shape();
        if shape.len() != 2 || shape[0] != n || shape[1] != self.in_dim() {
            return Err(Error::Shape(format!(
                "layer `{}` expects [{}, {}] input, got {:?}",
                self.prefix,
                n,
                self.in_dim(),
                shape
            )));
        }
        let w1 = src.var(&format!("{}.w1", self.prefix), &self.w1);
        let w2 = src.var(&format!("{}.w2", self.prefix), &self.w2);
        let messages = graph.messages();
        let sources: Vec<usize> = messages.iter().map(|m| m.0).collect();
        let targets: Vec<usize> = messages.iter().map(|m| m.1).collect();
        let mut incoming = h.gather_rows(&sources)?;
        if let Some(ef) = edge_features {
            if ef.cols() != self.in_dim() {
                return Err(Error::Shape(format!(
                    "edge feature width {} differs from layer input width {}",
                    ef.cols(),
                    self.in_dim()
                )));
            }
            let ids: Vec<usize> = messages.iter().map(|m| m.2).collect();
            incoming = incoming.add(src.tape().constant(ef.gather_rows(&ids)?))?;
        }
        let neigh = incoming.matmul(w2)?.index_add(&targets, n)?.relu();
        let mut out = h.matmul(w1)?.add(neigh)?;
        let mut stats = None;
        if let Some(norm) = &self.norm {
            let (normed, s) = norm.forward(src, out, mode)?;
            out = normed;
            stats = s;
        }
        if self.activation {
            out = out.relu();
        }
        Ok((out, stats))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<SageLayer>,
}

impl Encoder {
    pub fn new(prefix: &str, config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let d_in = if l == 0 { config.input_dim } else { config.hidden_dim };
            let last = l + 1 == config.num_layers;
            layers.push(SageLayer::new(
                &format!("{prefix}.layer{l}"),
                d_in,
                config.hidden_dim,
                config.batch_norm,
                !last || config.final_activation,
                rng,
            ));
        }
        Ok(Self { config, layers })
    }

    pub fn output_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Runs every layer on `x`. In training mode also returns the batch
    /// statistics each normalization layer saw.
    pub fn forward<'t>(
        &self,
        src: &ParamSource<'_, 't>,
        graph: &Graph,
        x: Var<'t>,
        mode: Mode,
    ) -> Result<(Var<'t>, Vec<NormStats>)> {
        let mut h = x;
        let mut stats = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let ef = if l == 0 { graph.edge_features() } else { None };
            let (next, s) = layer.forward(src, graph, h, ef, mode)?;
            h = next;
            stats.extend(s);
        }
        Ok((h, stats))
    }

    /// Evaluation-mode embeddings of every node, `[n, d']`.
    pub fn encode(&self, graph: &Graph) -> Result<Tensor> {
        let tape = Tape::new();
        let src = ParamSource::Frozen(&tape);
        let x = tape.constant(graph.node_features().clone());
        Ok(self.forward(&src, graph, x, Mode::Eval)?.0.value())
    }

    /// Folds batch statistics from a training pass into the running
    /// statistics, in layer order.
    pub fn update_running(&mut self, stats: &[NormStats]) {
        let norms = self.layers.iter_mut().filter_map(|l| l.norm.as_mut());
        for (norm, s) in norms.zip(stats) {
            norm.update_running(s);
        }
    }
}

impl Parameters for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for l in &self.layers {
            f(&format!("{}.w1", l.prefix), &l.w1);
            f(&format!("{}.w2", l.prefix), &l.w2);
            if let Some(n) = &l.norm {
                n.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for l in &mut self.layers {
            f(&format!("{}.w1", l.prefix), &mut l.w1);
            f(&format!("{}.w2", l.prefix), &mut l.w2);
            if let Some(n) = &mut l.norm {
                n.visit_mut(f);
            }
        }
    }
}

impl Stateful for Encoder {
    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for n in self.layers.iter().filter_map(|l| l.norm.as_ref()) {
            n.visit_buffers(f);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for n in self.layers.iter_mut().filter_map(|l| l.norm.as_mut()) {
            n.visit_buffers_mut(f);
        }
    }
}
