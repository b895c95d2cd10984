//! Fine-tuning with node, link and graph tasks treated as tree classification.
//!
//! Every instance becomes one embedding: a node's own row, the mean of a
//! link's two endpoints, or the mean over all nodes of a graph. Two heads
//! read it: a prototype classifier over class means of quantized training
//! embeddings, and a linear classifier on the quantized embedding. The
//! codebook is never updated.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use treevocab_autodiff::{OptimizerState, ParamBinder, Parameters, Tape, Tensor, Var};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{glorot, Mode, ParamSource, Stateful};
use crate::pretrain::PretrainModel;
use crate::report;
use crate::rng::{self, Rng};
use crate::sampling::kshot_indices;
use crate::vocab::{quantize, quantize_var, Codebook};

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Node,
    Link,
    Graph,
}

/// One labeled computation-tree instance on `graphs[graph]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub graph: usize,
    pub nodes: Vec<usize>,
    pub label: usize,
}

impl TaskInstance {
    pub fn node(graph: usize, v: usize, label: usize) -> Self {
        Self {
            kind: TaskKind::Node,
            graph,
            nodes: vec![v],
            label,
        }
    }

    pub fn link(graph: usize, s: usize, t: usize, label: usize) -> Self {
        Self {
            kind: TaskKind::Link,
            graph,
            nodes: vec![s, t],
            label,
        }
    }

    pub fn whole_graph(graph: usize, num_nodes: usize, label: usize) -> Self {
        Self {
            kind: TaskKind::Graph,
            graph,
            nodes: (0..num_nodes).collect(),
            label,
        }
    }

    pub fn validate(&self, graphs: &[Graph], num_classes: usize) -> Result<()> {
        let g = graphs.get(self.graph).ok_or_else(|| {
            Error::Precondition(format!("instance refers to graph {} of {}", self.graph, graphs.len()))
        })?;
        if self.nodes.is_empty() {
            return Err(Error::Precondition("instance has an empty node list".into()));
        }
        let ok = match self.kind {
            TaskKind::Node => self.nodes.len() == 1,
            TaskKind::Link => self.nodes.len() == 2,
            TaskKind::Graph => self.nodes.len() == g.num_nodes(),
        };
        if !ok {
            return Err(Error::Precondition(format!(
                "{:?} instance has {} nodes",
                self.kind,
                self.nodes.len()
            )));
        }
        if let Some(&v) = self.nodes.iter().find(|&&v| v >= g.num_nodes()) {
            return Err(Error::Precondition(format!(
                "node {v} out of range for a {}-node graph",
                g.num_nodes()
            )));
        }
        if self.label >= num_classes {
            return Err(Error::Precondition(format!(
                "label {} >= num_classes {num_classes}",
                self.label
            )));
        }
        Ok(())
    }
}

/// Node instances for every labeled node of `graphs[graph]`.
pub fn node_instances(graphs: &[Graph], graph: usize) -> Result<Vec<TaskInstance>> {
    let g = graphs
        .get(graph)
        .ok_or_else(|| Error::Precondition(format!("no graph {graph}")))?;
    let labels = g
        .labels()
        .ok_or_else(|| Error::Precondition("graph has no node labels".into()))?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(v, &l)| TaskInstance::node(graph, v, l))
        .collect())
}

/// `[instances, n]` matrix whose rows average the instances' node rows.
fn averaging_matrix(instances: &[&TaskInstance], n: usize) -> Tensor {
    let mut a = Tensor::zeros(&[instances.len(), n]);
    for (i, inst) in instances.iter().enumerate() {
        let w = 1.0 / inst.nodes.len() as f64;
        for &v in &inst.nodes {
            let cur = a.get(i, v);
            a.set(i, v, cur + w);
        }
    }
    a
}

/// Plain-value task embeddings for instances that all live on one graph
/// whose node embeddings are `z`.
pub fn task_embeddings(z: &Tensor, instances: &[&TaskInstance]) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[instances.len(), z.cols()]);
    for (i, inst) in instances.iter().enumerate() {
        if inst.nodes.is_empty() {
            return Err(Error::Precondition("instance has an empty node list".into()));
        }
        let row = out.row_mut(i);
        for &v in &inst.nodes {
            if v >= z.rows() {
                return Err(Error::Precondition(format!(
                    "node {v} out of range for {} embeddings",
                    z.rows()
                )));
            }
            for (o, &x) in row.iter_mut().zip(z.row(v)) {
                *o += x;
            }
        }
        let k = inst.nodes.len() as f64;
        row.iter_mut().for_each(|o| *o /= k);
    }
    Ok(out)
}

/// Evaluation-mode embedding of a single instance.
pub fn task_embedding(encoder: &Encoder, graphs: &[Graph], instance: &TaskInstance) -> Result<Vec<f64>> {
    let g = graphs
        .get(instance.graph)
        .ok_or_else(|| Error::Precondition(format!("no graph {}", instance.graph)))?;
    let z = encoder.encode(g)?;
    Ok(task_embeddings(&z, &[instance])?.row(0).to_vec())
}

/// Instances grouped by graph, keeping their positions in the input slice.
fn by_graph(instances: &[TaskInstance]) -> BTreeMap<usize, Vec<(usize, &TaskInstance)>> {
    let mut out: BTreeMap<usize, Vec<(usize, &TaskInstance)>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        out.entry(inst.graph).or_default().push((i, inst));
    }
    out
}

/// Evaluation-mode embeddings for `instances`, in input order.
pub fn embed_instances(encoder: &Encoder, graphs: &[Graph], instances: &[TaskInstance]) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[instances.len(), encoder.output_dim()]);
    for (gi, group) in by_graph(instances) {
        let g = graphs
            .get(gi)
            .ok_or_else(|| Error::Precondition(format!("no graph {gi}")))?;
        let z = encoder.encode(g)?;
        let refs: Vec<&TaskInstance> = group.iter().map(|(_, inst)| *inst).collect();
        let e = task_embeddings(&z, &refs)?;
        for (r, (i, _)) in group.iter().enumerate() {
            out.row_mut(*i).copy_from_slice(e.row(r));
        }
    }
    Ok(out)
}

/// Quantized training embeddings grouped by class.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub classes: Vec<Vec<Vec<f64>>>,
    pub cap: Option<usize>,
}

impl MemoryBank {
    /// Quantizes `z` under `codebook` and files row `i` under `labels[i]`.
    /// Classes above `cap` keep a uniform sample of `cap` entries.
    pub fn from_embeddings(
        codebook: &Codebook,
        z: &Tensor,
        labels: &[usize],
        num_classes: usize,
        cap: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if z.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} embeddings for {} labels",
                z.rows(),
                labels.len()
            )));
        }
        if cap == Some(0) {
            return Err(Error::Precondition("memory bank cap must be >= 1".into()));
        }
        let q = quantize(codebook, z)?.quantized;
        let mut classes = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            let slot = classes
                .get_mut(l)
                .ok_or_else(|| Error::Precondition(format!("label {l} >= num_classes {num_classes}")))?;
            slot.push(q.row(i).to_vec());
        }
        for (k, members) in classes.iter_mut().enumerate() {
            if members.is_empty() {
                return Err(Error::Precondition(format!("class {k} has no training instances")));
            }
            if let Some(c) = cap {
                if members.len() > c {
                    let mut keep = sample(rng, members.len(), c).into_vec();
                    keep.sort_unstable();
                    *members = keep.into_iter().map(|i| members[i].clone()).collect();
                }
            }
        }
        Ok(Self { classes, cap })
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-class means.
    pub fn prototypes(&self, tau: f64) -> Result<Prototypes> {
        let d = self.classes.iter().flatten().next().map_or(0, Vec::len);
        let mut means = Tensor::zeros(&[self.classes.len(), d]);
        for (k, members) in self.classes.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Precondition(format!("class {k} has no prototype")));
            }
            let row = means.row_mut(k);
            for m in members {
                for (o, &x) in row.iter_mut().zip(m) {
                    *o += x;
                }
            }
            let n = members.len() as f64;
            row.iter_mut().for_each(|o| *o /= n);
        }
        Prototypes::new(means, tau)
    }
}

/// Encodes and quantizes `train` and builds the bank from it.
pub fn build_memory_bank(
    encoder: &Encoder,
    codebook: &Codebook,
    graphs: &[Graph],
    train: &[TaskInstance],
    num_classes: usize,
    cap: Option<usize>,
    rng: &mut Rng,
) -> Result<MemoryBank> {
    let z = embed_instances(encoder, graphs, train)?;
    let labels: Vec<usize> = train.iter().map(|t| t.label).collect();
    MemoryBank::from_embeddings(codebook, &z, &labels, num_classes, cap, rng)
}

/// How `sim(z, p_k)` in `exp(-sim / tau)` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtoSim {
    /// `1 - cos(z, p_k)`: the nearest prototype gets the largest probability.
    #[default]
    CosineDistance,
    /// `cos(z, p_k)` taken literally, which favours the farthest prototype.
    CosineSimilarity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    /// `[classes, d']`.
    pub means: Tensor,
    pub tau: f64,
    pub sim: ProtoSim,
}

fn row_norm(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl Prototypes {
    pub fn new(means: Tensor, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Precondition(format!("temperature must be > 0, got {tau}")));
        }
        Ok(Self {
            means,
            tau,
            sim: ProtoSim::CosineDistance,
        })
    }

    pub fn with_sim(self, sim: ProtoSim) -> Self {
        Self { sim, ..self }
    }

    pub fn num_classes(&self) -> usize {
        self.means.rows()
    }

    /// Logit for cosine `cos`.
    fn logit(&self, cos: f64) -> f64 {
        match self.sim {
            ProtoSim::CosineDistance => -(1.0 - cos) / self.tau,
            ProtoSim::CosineSimilarity => -cos / self.tau,
        }
    }

    /// Rows scaled to unit norm.
    fn unit_means(&self) -> Result<Tensor> {
        let mut out = self.means.clone();
        for k in 0..out.rows() {
            let n = row_norm(out.row(k));
            if n <= NORM_EPS {
                return Err(Error::Domain(format!("prototype {k} has zero norm")));
            }
            out.row_mut(k).iter_mut().for_each(|x| *x /= n);
        }
        Ok(out)
    }
}

/// `p(y = k | z) ∝ exp(-sim(z, p_k) / tau)`, by default with
/// `sim = 1 - cos`.
pub fn proto_predict(protos: &Prototypes, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != protos.means.cols() {
        return Err(Error::Shape(format!(
            "{}-d query for {}-d prototypes",
            z.len(),
            protos.means.cols()
        )));
    }
    let nz = row_norm(z);
    if nz <= NORM_EPS {
        return Err(Error::Domain("query embedding has zero norm".into()));
    }
    let unit = protos.unit_means()?;
    let logits: Vec<f64> = (0..unit.rows())
        .map(|k| {
            let cos = unit.row(k).iter().zip(z).map(|(p, x)| p * x).sum::<f64>() / nz;
            protos.logit(cos)
        })
        .collect();
    Ok(softmax(&logits))
}

/// Affine classifier on quantized embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub prefix: String,
    /// `[d', classes]`.
    pub w: Tensor,
    pub b: Tensor,
    pub tau: f64,
}

impl LinearHead {
    pub fn new(dim: usize, num_classes: usize, tau: f64, rng: &mut Rng) -> Result<Self> {
        let mut head = Self::zeros(dim, num_classes, tau)?;
        head.w = glorot(dim, num_classes, rng);
        Ok(head)
    }

    pub fn zeros(dim: usize, num_classes: usize, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Precondition(format!("temperature must be > 0, got {tau}")));
        }
        if num_classes == 0 {
            return Err(Error::Precondition("linear head needs at least one class".into()));
        }
        Ok(Self {
            prefix: "head".into(),
            w: Tensor::zeros(&[dim, num_classes]),
            b: Tensor::zeros(&[num_classes]),
            tau,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.b.numel()
    }

    fn logits<'t>(&self, src: &ParamSource<'_, 't>, q: Var<'t>) -> Result<Var<'t>> {
        let w = src.var(&format!("{}.w", self.prefix), &self.w);
        let b = src.var(&format!("{}.b", self.prefix), &self.b);
        Ok(q.matmul(w)?.add_row(b)?.scale(1.0 / self.tau))
    }
}

impl Parameters for LinearHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.w", self.prefix), &self.w);
        f(&format!("{}.b", self.prefix), &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let p = self.prefix.clone();
        f(&format!("{p}.w"), &mut self.w);
        f(&format!("{p}.b"), &mut self.b);
    }
}

impl Stateful for LinearHead {}

/// Quantizes `z` and returns `softmax((q W + b) / tau)`.
pub fn lin_predict(head: &LinearHead, codebook: &Codebook, z: &[f64]) -> Result<Vec<f64>> {
    let zt = Tensor::new(vec![1, z.len()], z.to_vec())?;
    let q = quantize(codebook, &zt)?.quantized;
    let tape = Tape::new();
    let logits = head.logits(&ParamSource::Frozen(&tape), tape.constant(q))?.value();
    Ok(softmax(logits.data()))
}

/// `(lp * p_proto + ll * p_lin) / (lp + ll)`; a head whose weight is zero
/// may be absent.
pub fn combine(p_proto: Option<&[f64]>, p_lin: Option<&[f64]>, lambda_proto: f64, lambda_lin: f64) -> Result<Vec<f64>> {
    let total = lambda_proto + lambda_lin;
    if !(total > 0.0) {
        return Err(Error::Precondition("lambda_proto + lambda_lin must be > 0".into()));
    }
    let parts = [(p_proto, lambda_proto, "prototype"), (p_lin, lambda_lin, "linear")];
    let mut out: Option<Vec<f64>> = None;
    for (p, w, name) in parts {
        if w == 0.0 {
            continue;
        }
        let p = p.ok_or_else(|| Error::Precondition(format!("{name} probabilities missing for a nonzero weight")))?;
        let acc = out.get_or_insert_with(|| vec![0.0; p.len()]);
        if acc.len() != p.len() {
            return Err(Error::Shape(format!("{} vs {} classes", acc.len(), p.len())));
        }
        for (a, &x) in acc.iter_mut().zip(p) {
            *a += w / total * x;
        }
    }
    Ok(out.expect("at least one positive weight"))
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda_proto: f64,
    pub lambda_lin: f64,
    pub tau_proto: f64,
    pub tau_lin: f64,
    pub proto_sim: ProtoSim,
    /// Per-class memory bank cap; `None` keeps every training instance.
    pub bank_cap: Option<usize>,
    /// Re-encode the bank with the current encoder every epoch instead of
    /// keeping the one built before training.
    pub reencode_bank: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            patience: 20,
            lr: 5e-4,
            weight_decay: 0.0,
            lambda_proto: 1.0,
            lambda_lin: 0.1,
            tau_proto: 1.0,
            tau_lin: 1.0,
            proto_sim: ProtoSim::CosineDistance,
            bank_cap: None,
            reencode_bank: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("lambda_proto", self.lambda_proto),
            ("lambda_lin", self.lambda_lin),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Precondition(format!(
                    "{name} must be a finite value >= 0, got {w}"
                )));
            }
        }
        if !(self.lambda_proto + self.lambda_lin > 0.0) {
            return Err(Error::Precondition("lambda_proto + lambda_lin must be > 0".into()));
        }
        for (name, t) in [("tau_proto", self.tau_proto), ("tau_lin", self.tau_lin)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Precondition(format!("{name} must be > 0, got {t}")));
            }
        }
        if self.epochs == 0 || self.patience == 0 {
            return Err(Error::Precondition("epochs and patience must be >= 1".into()));
        }
        if self.bank_cap == Some(0) {
            return Err(Error::Precondition("bank_cap must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything fine-tuning produces, restored to the best monitored epoch.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub encoder: Encoder,
    pub codebook: Codebook,
    pub head: LinearHead,
    pub prototypes: Prototypes,
    pub lambda_proto: f64,
    pub lambda_lin: f64,
}

impl Classifier {
    /// Combined class probabilities, one row per instance.
    pub fn predict_proba(&self, graphs: &[Graph], instances: &[TaskInstance]) -> Result<Vec<Vec<f64>>> {
        let z = embed_instances(&self.encoder, graphs, instances)?;
        (0..z.rows())
            .map(|i| {
                let zi = z.row(i);
                let pp = if self.lambda_proto > 0.0 {
                    Some(proto_predict(&self.prototypes, zi)?)
                } else {
                    None
                };
                let pl = if self.lambda_lin > 0.0 {
                    Some(lin_predict(&self.head, &self.codebook, zi)?)
                } else {
                    None
                };
                combine(pp.as_deref(), pl.as_deref(), self.lambda_proto, self.lambda_lin)
            })
            .collect()
    }

    pub fn predict(&self, graphs: &[Graph], instances: &[TaskInstance]) -> Result<Vec<usize>> {
        Ok(self
            .predict_proba(graphs, instances)?
            .iter()
            .map(|p| argmax(p))
            .collect())
    }

    pub fn accuracy(&self, graphs: &[Graph], instances: &[TaskInstance]) -> Result<f64> {
        if instances.is_empty() {
            return Err(Error::Precondition("accuracy over an empty instance set".into()));
        }
        let pred = self.predict(graphs, instances)?;
        let hits = pred.iter().zip(instances).filter(|(p, t)| **p == t.label).count();
        Ok(hits as f64 / instances.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub proto_loss: f64,
    pub lin_loss: f64,
    pub train_acc: f64,
    pub monitor_acc: f64,
}

pub const FINETUNE_CURVE_HEADER: [&str; 6] = ["epoch", "loss", "proto_loss", "lin_loss", "train_acc", "monitor_acc"];

impl FinetuneEpoch {
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            report::num(self.loss),
            report::num(self.proto_loss),
            report::num(self.lin_loss),
            report::num(self.train_acc),
            report::num(self.monitor_acc),
        ]
    }
}

pub fn write_finetune_curve(path: &Path, curve: &[FinetuneEpoch]) -> Result<()> {
    let rows: Vec<Vec<String>> = curve.iter().map(FinetuneEpoch::csv_row).collect();
    report::write_csv(path, &FINETUNE_CURVE_HEADER, &rows)
}

pub struct FinetuneRun {
    pub classifier: Classifier,
    pub curve: Vec<FinetuneEpoch>,
    pub best_epoch: usize,
    /// Accuracy on the evaluation instances with the restored best state.
    pub eval_acc: f64,
}

/// Train, monitor and evaluation instances. Early stopping watches
/// `monitor` when given and `eval` otherwise.
pub struct TaskSplit<'a> {
    pub train: &'a [TaskInstance],
    pub monitor: Option<&'a [TaskInstance]>,
    pub eval: &'a [TaskInstance],
}

struct Tuned<'a> {
    encoder: &'a mut Encoder,
    head: &'a mut LinearHead,
}

impl Parameters for Tuned<'_> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(f);
        self.head.visit_mut(f);
    }
}

struct StepLosses {
    total: f64,
    proto: f64,
    lin: f64,
}

/// The training graphs merged into one, so batch statistics span all of
/// them, with the training instances renumbered onto it.
struct TrainBatch {
    graph: Graph,
    instances: Vec<TaskInstance>,
}

impl TrainBatch {
    fn new(graphs: &[Graph], train: &[TaskInstance]) -> Result<Self> {
        let used: Vec<usize> = by_graph(train).keys().copied().collect();
        let parts: Vec<&Graph> = used.iter().map(|&i| &graphs[i]).collect();
        let (graph, offsets) = Graph::disjoint_union(&parts)?;
        let offset: BTreeMap<usize, usize> = used.iter().copied().zip(offsets).collect();
        let instances = train
            .iter()
            .map(|t| TaskInstance {
                graph: 0,
                nodes: t.nodes.iter().map(|v| v + offset[&t.graph]).collect(),
                ..t.clone()
            })
            .collect();
        Ok(Self { graph, instances })
    }
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    encoder: &mut Encoder,
    head: &mut LinearHead,
    codebook: &Codebook,
    protos: &Prototypes,
    batch: &TrainBatch,
    cfg: &FinetuneConfig,
    opt: &mut OptimizerState,
) -> Result<StepLosses> {
    let tape = Tape::new();
    let binder = ParamBinder::new(&tape);
    let src = ParamSource::Train(&binder);
    let frozen = ParamSource::Frozen(&tape);
    let g = &batch.graph;
    let x = tape.constant(g.node_features().clone());
    let (z, stats) = encoder.forward(&src, g, x, Mode::Train)?;
    let refs: Vec<&TaskInstance> = batch.instances.iter().collect();
    let labels: Vec<usize> = refs.iter().map(|t| t.label).collect();
    let zt = tape.constant(averaging_matrix(&refs, g.num_nodes())).matmul(z)?;
    let mut total: Option<Var<'_>> = None;
    let (mut proto, mut lin) = (0.0, 0.0);
    if cfg.lambda_proto > 0.0 {
        let unit = tape.constant(protos.unit_means()?.transpose()?);
        let cos = zt.row_normalize()?.matmul(unit)?;
        let logits = match protos.sim {
            ProtoSim::CosineDistance => cos.add_scalar(-1.0).scale(1.0 / protos.tau),
            ProtoSim::CosineSimilarity => cos.scale(-1.0 / protos.tau),
        };
        let ce = logits.softmax_cross_entropy(&labels)?;
        proto = ce.item();
        total = Some(ce.scale(cfg.lambda_proto));
    }
    if cfg.lambda_lin > 0.0 {
        let q = quantize_var(&frozen, codebook, zt)?;
        let ce = head.logits(&src, q.straight)?.softmax_cross_entropy(&labels)?;
        lin = ce.item();
        let t = ce.scale(cfg.lambda_lin);
        total = Some(match total {
            None => t,
            Some(acc) => acc.add(t)?,
        });
    }
    let total = total.expect("validated: some lambda is positive");
    let value = total.item();
    if !value.is_finite() {
        return Err(Error::NonFinite("fine-tuning loss".into()));
    }
    let grads = binder.collect(&tape.backward(total)?);
    opt.step(
        &mut Tuned {
            encoder: &mut *encoder,
            head: &mut *head,
        },
        &grads,
    )?;
    encoder.update_running(&stats);
    Ok(StepLosses {
        total: value,
        proto,
        lin,
    })
}

/// Fine-tunes the encoder of `model` plus a fresh linear head on `split`.
/// The codebook stays fixed; a changed codebook is reported as a contract
/// violation.
pub fn finetune(
    model: &PretrainModel,
    graphs: &[Graph],
    split: &TaskSplit<'_>,
    num_classes: usize,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneRun> {
    cfg.validate()?;
    if split.train.is_empty() || split.eval.is_empty() {
        return Err(Error::Precondition("fine-tuning needs train and eval instances".into()));
    }
    let monitor = split.monitor.unwrap_or(split.eval);
    for inst in split.train.iter().chain(monitor).chain(split.eval) {
        inst.validate(graphs, num_classes)?;
    }
    for g in graphs {
        if g.feature_dim() != model.feature_dim {
            return Err(Error::Shape(format!(
                "graph has {}-d features, model expects {}",
                g.feature_dim(),
                model.feature_dim
            )));
        }
    }
    let codebook = model.codebook.clone();
    let mut encoder = model.encoder.clone();
    let mut head = LinearHead::new(
        encoder.output_dim(),
        num_classes,
        cfg.tau_lin,
        &mut rng::stream(seed, "head-init", 0),
    )?;
    let mut opt = OptimizerState::adamw(cfg.lr, cfg.weight_decay);
    let bank_for = |enc: &Encoder, epoch: u64| -> Result<Prototypes> {
        let mut r = rng::stream(seed, "bank", epoch);
        build_memory_bank(enc, &codebook, graphs, split.train, num_classes, cfg.bank_cap, &mut r)?
            .prototypes(cfg.tau_proto)
            .map(|p| p.with_sim(cfg.proto_sim))
    };
    let mut protos = bank_for(&encoder, 0)?;
    let batch = TrainBatch::new(graphs, split.train)?;
    let snapshot = |encoder: &Encoder, head: &LinearHead, protos: &Prototypes| Classifier {
        encoder: encoder.clone(),
        codebook: codebook.clone(),
        head: head.clone(),
        prototypes: protos.clone(),
        lambda_proto: cfg.lambda_proto,
        lambda_lin: cfg.lambda_lin,
    };
    let mut best: Option<(f64, usize, Classifier)> = None;
    let mut curve = Vec::new();
    for epoch in 0..cfg.epochs {
        if cfg.reencode_bank && epoch > 0 {
            protos = bank_for(&encoder, epoch as u64)?;
        }
        let l = train_step(&mut encoder, &mut head, &codebook, &protos, &batch, cfg, &mut opt)?;
        let current = snapshot(&encoder, &head, &protos);
        let train_acc = current.accuracy(graphs, split.train)?;
        let monitor_acc = current.accuracy(graphs, monitor)?;
        curve.push(FinetuneEpoch {
            epoch,
            loss: l.total,
            proto_loss: l.proto,
            lin_loss: l.lin,
            train_acc,
            monitor_acc,
        });
        match &best {
            Some((acc, at, _)) if monitor_acc <= *acc => {
                if epoch - at >= cfg.patience {
                    break;
                }
            }
            _ => best = Some((monitor_acc, epoch, current)),
        }
    }
    let (_, best_epoch, classifier) = best.expect("at least one epoch");
    if classifier.codebook.tokens.data().iter().map(|x| x.to_bits()).ne(model
        .codebook
        .tokens
        .data()
        .iter()
        .map(|x| x.to_bits()))
    {
        return Err(Error::Contract("codebook changed during fine-tuning".into()));
    }
    let eval_acc = classifier.accuracy(graphs, split.eval)?;
    Ok(FinetuneRun {
        classifier,
        curve,
        best_epoch,
        eval_acc,
    })
}

/// Samples `k` labeled nodes per class of `graphs[graph]` for training and
/// evaluates on every other node.
pub fn fewshot(
    model: &PretrainModel,
    graphs: &[Graph],
    graph: usize,
    k: usize,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneRun> {
    let all = node_instances(graphs, graph)?;
    let num_classes = graphs[graph]
        .num_classes()
        .ok_or_else(|| Error::Precondition("graph has no class count".into()))?;
    let labels: Vec<usize> = all.iter().map(|t| t.label).collect();
    let (train_idx, eval_idx) = kshot_indices(&labels, k, &mut rng::stream(seed, "fewshot", 0))?;
    if eval_idx.is_empty() {
        return Err(Error::Precondition(format!("k = {k} leaves no evaluation nodes")));
    }
    let train: Vec<TaskInstance> = train_idx.iter().map(|&i| all[i].clone()).collect();
    let eval: Vec<TaskInstance> = eval_idx.iter().map(|&i| all[i].clone()).collect();
    let split = TaskSplit {
        train: &train,
        monitor: None,
        eval: &eval,
    };
    finetune(model, graphs, &split, num_classes, cfg, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NtGapRecord {
    pub seed: u64,
    pub acc_pre: f64,
    pub acc_scratch: f64,
    /// `acc_scratch - acc_pre`; negative when pre-training helped.
    pub gap: f64,
}

pub const NT_GAP_HEADER: [&str; 4] = ["seed", "acc_pre", "acc_scratch", "gap"];

impl NtGapRecord {
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.seed.to_string(),
            report::num(self.acc_pre),
            report::num(self.acc_scratch),
            report::num(self.gap),
        ]
    }
}

/// For each seed, few-shot fine-tunes `pretrained` and a model built from
/// the same configuration with fresh random weights, on the same split.
pub fn nt_gap_experiment(
    pretrained: &PretrainModel,
    scratch: Option<&PretrainModel>,
    graphs: &[Graph],
    graph: usize,
    k: usize,
    cfg: &FinetuneConfig,
    seeds: &[u64],
) -> Result<Vec<NtGapRecord>> {
    seeds
        .iter()
        .map(|&seed| {
            let fresh;
            let scratch_model = match scratch {
                Some(m) => m,
                None => {
                    fresh = PretrainModel::new(
                        pretrained.config.clone(),
                        pretrained.feature_dim,
                        pretrained.edge_dim,
                        &mut rng::stream(seed, "scratch-init", 0),
                    )?;
                    &fresh
                }
            };
            let acc_pre = fewshot(pretrained, graphs, graph, k, cfg, seed)?.eval_acc;
            let acc_scratch = fewshot(scratch_model, graphs, graph, k, cfg, seed)?.eval_acc;
            Ok(NtGapRecord {
                seed,
                acc_pre,
                acc_scratch,
                gap: acc_scratch - acc_pre,
            })
        })
        .collect()
}

pub fn write_nt_gap(path: &Path, records: &[NtGapRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = records.iter().map(NtGapRecord::csv_row).collect();
    report::write_csv(path, &NT_GAP_HEADER, &rows)
}
