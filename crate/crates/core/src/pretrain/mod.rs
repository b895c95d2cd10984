//! Computation-tree reconstruction pre-training.
//!
//! One step augments each graph, encodes it, quantizes the tree embeddings
//! against the vocabulary and reconstructs three facets of every tree from
//! the quantized vectors: root features, the target encoder's view of the
//! tree, and the links (plus edge features) around the root.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, manifest_path, save_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};

use std::path::Path;

use serde::{Deserialize, Serialize};
use treevocab_autodiff::{ema_update, OptimizerState, ParamBinder, Parameters, Tape, Tensor, Var};

use crate::augment::{augment_with, AugmentConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{Mlp, Mode, NormStats, ParamSource, Stateful};
use crate::report;
use crate::rng::{self, Rng};
use crate::sampling::negative_edge_sample;
use crate::vocab::{quantize_var, Codebook, VocabConfig, VocabDiagnostics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub batch_norm: bool,
    pub vocab: VocabConfig,
    /// Commitment weight.
    pub beta1: f64,
    /// Feature reconstruction weight.
    pub beta2: f64,
    /// Semantic reconstruction weight.
    pub beta3: f64,
    /// Topology reconstruction weight.
    pub beta4: f64,
    /// Orthogonal regularizer weight.
    pub lambda: f64,
    /// Exponent of the semantic loss.
    pub gamma: f64,
    /// Fraction of edges reconstructed per step.
    pub link_fraction: f64,
    pub edge_drop_rate: f64,
    pub feature_drop_rate: f64,
    pub epochs: usize,
    /// Graphs per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    /// Re-seed tokens that went unused for a whole epoch.
    pub reseed_dead_tokens: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            num_layers: 2,
            batch_norm: true,
            vocab: VocabConfig::default(),
            beta1: 10.0,
            beta2: 100.0,
            beta3: 1.0,
            beta4: 0.01,
            lambda: 1.0,
            gamma: 1.0,
            link_fraction: 0.1,
            edge_drop_rate: 0.2,
            feature_drop_rate: 0.2,
            epochs: 25,
            batch_size: 1,
            lr: 1e-4,
            weight_decay: 1e-5,
            ema_decay: 0.99,
            reseed_dead_tokens: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("beta3", self.beta3),
            ("beta4", self.beta4),
            ("lambda", self.lambda),
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Precondition(format!(
                    "{name} must be a finite value >= 0, got {w}"
                )));
            }
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Precondition(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.link_fraction > 0.0 && self.link_fraction <= 1.0) {
            return Err(Error::Precondition(format!(
                "link_fraction must be in (0, 1], got {}",
                self.link_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Precondition(format!(
                "ema_decay must be in [0, 1], got {}",
                self.ema_decay
            )));
        }
        if self.batch_size == 0 || self.vocab.num_tokens == 0 {
            return Err(Error::Precondition(
                "batch_size and vocab.num_tokens must be >= 1".into(),
            ));
        }
        self.augment(0).validate()?;
        self.encoder_config(1).validate()
    }

    pub fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            batch_norm: self.batch_norm,
            final_activation: false,
        }
    }

    pub fn augment(&self, seed: u64) -> AugmentConfig {
        AugmentConfig {
            edge_drop_rate: self.edge_drop_rate,
            feature_drop_rate: self.feature_drop_rate,
            seed,
        }
    }
}

/// The four reconstruction heads. `edge` exists only for graphs with edge
/// features.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoders {
    pub sem: Mlp,
    pub feat: Mlp,
    pub topo: Mlp,
    pub edge: Option<Mlp>,
}

impl Decoders {
    pub fn new(dim: usize, feature_dim: usize, edge_dim: Option<usize>, rng: &mut Rng) -> Self {
        Self {
            sem: Mlp::new("dec.sem", dim, dim, dim, rng),
            feat: Mlp::new("dec.feat", dim, dim, feature_dim, rng),
            topo: Mlp::new("dec.topo", dim, dim, dim, rng),
            edge: edge_dim.map(|de| Mlp::new("dec.edge", dim, dim, de.div_ceil(2), rng)),
        }
    }
}

impl Parameters for Decoders {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.sem.visit(f);
        self.feat.visit(f);
        self.topo.visit(f);
        if let Some(e) = &self.edge {
            e.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.sem.visit_mut(f);
        self.feat.visit_mut(f);
        self.topo.visit_mut(f);
        if let Some(e) = &mut self.edge {
            e.visit_mut(f);
        }
    }
}

impl Stateful for Decoders {}

/// Everything pre-training learns. `target` tracks `encoder` by moving
/// average and is never optimized.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainModel {
    pub config: PretrainConfig,
    pub feature_dim: usize,
    pub edge_dim: Option<usize>,
    pub encoder: Encoder,
    pub target: Encoder,
    pub codebook: Codebook,
    pub decoders: Decoders,
}

impl PretrainModel {
    pub fn new(config: PretrainConfig, feature_dim: usize, edge_dim: Option<usize>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if edge_dim == Some(0) {
            return Err(Error::Precondition("edge feature width must be >= 1".into()));
        }
        let encoder = Encoder::new("enc", config.encoder_config(feature_dim), rng)?;
        let target = encoder.clone();
        let codebook = Codebook::new(
            "vocab",
            config.vocab.num_tokens,
            config.hidden_dim,
            config.vocab.metric,
            rng,
        )?;
        let decoders = Decoders::new(config.hidden_dim, feature_dim, edge_dim, rng);
        Ok(Self {
            config,
            feature_dim,
            edge_dim,
            encoder,
            target,
            codebook,
            decoders,
        })
    }

    /// Every persisted tensor, target encoder names prefixed with `target/`.
    pub fn state(&self) -> std::collections::BTreeMap<String, Tensor> {
        let mut out = self.encoder.state();
        for (k, v) in self.target.state() {
            out.insert(format!("target/{k}"), v);
        }
        out.extend(self.codebook.state());
        out.extend(self.decoders.state());
        out
    }

    pub fn load_state(&mut self, state: &std::collections::BTreeMap<String, Tensor>) -> Result<()> {
        let target_state = state
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("target/").map(|s| (s.to_string(), v.clone())))
            .collect();
        self.encoder.load_state(state)?;
        self.target.load_state(&target_state)?;
        self.codebook.load_state(state)?;
        self.decoders.load_state(state)
    }

    fn check_graph(&self, g: &Graph) -> Result<()> {
        if g.feature_dim() != self.feature_dim {
            return Err(Error::Shape(format!(
                "graph has {}-d features, model expects {}",
                g.feature_dim(),
                self.feature_dim
            )));
        }
        let de = g.edge_features().map(Tensor::cols);
        if de != self.edge_dim {
            return Err(Error::Shape(format!(
                "graph edge width {:?}, model expects {:?}",
                de, self.edge_dim
            )));
        }
        Ok(())
    }
}

/// Trainable view: online encoder, codebook and decoders.
struct Trainable<'a>(&'a mut PretrainModel);

impl Parameters for Trainable<'_> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.0.encoder.visit(f);
        self.0.codebook.visit(f);
        self.0.decoders.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.0.encoder.visit_mut(f);
        self.0.codebook.visit_mut(f);
        self.0.decoders.visit_mut(f);
    }
}

fn mean_sq_row_dist<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let m = a.shape()[0].max(1);
    let d = a.sub(b)?;
    Ok(d.mul(d)?.sum().scale(1.0 / m as f64))
}

/// `(1/m) sum ||delta2(q_i) - x_i||^2`.
pub fn feat_recon_loss<'t>(src: &ParamSource<'_, 't>, decoders: &Decoders, q: Var<'t>, x: &Tensor) -> Result<Var<'t>> {
    let out = decoders.feat.forward(src, q)?;
    if out.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "feature reconstruction {:?} vs targets {:?}",
            out.shape(),
            x.shape()
        )));
    }
    mean_sq_row_dist(out, src.tape().constant(x.clone()))
}

/// `(1/m) sum (1 - cos(delta1(q_i), z_hat_i))^gamma` with `z_hat` fixed.
pub fn sem_recon_loss<'t>(
    src: &ParamSource<'_, 't>,
    decoders: &Decoders,
    q: Var<'t>,
    z_hat: &Tensor,
    gamma: f64,
) -> Result<Var<'t>> {
    if !(gamma > 0.0) {
        return Err(Error::Precondition(format!("gamma must be > 0, got {gamma}")));
    }
    let out = decoders.sem.forward(src, q)?;
    for (what, t) in [("decoded embedding", out.value()), ("target embedding", z_hat.clone())] {
        if let Some(r) = (0..t.rows()).find(|&r| t.row(r).iter().all(|&x| x == 0.0)) {
            return Err(Error::Domain(format!("{what} {r} has zero norm")));
        }
    }
    let target = src.tape().constant(z_hat.clone());
    let dist = out.row_cosine(target)?.neg().add_scalar(1.0);
    let dist = if gamma == 1.0 { dist } else { dist.relu().powf(gamma)? };
    Ok(dist.mean())
}

/// Link and edge-feature reconstruction from decoded embeddings.
///
/// `h3` scores links by inner product; `h4` rows of both endpoints are
/// concatenated and compared with `edge_targets` (one row per positive
/// pair, already padded to even width).
pub fn topo_terms<'t>(
    h3: Var<'t>,
    h4: Option<Var<'t>>,
    pos: &[(usize, usize)],
    neg: &[(usize, usize)],
    edge_targets: Option<&Tensor>,
) -> Result<Var<'t>> {
    if pos.is_empty() {
        return Err(Error::Precondition(
            "topology loss needs at least one positive edge".into(),
        ));
    }
    let tape = h3.tape();
    let score = |pairs: &[(usize, usize)]| -> Result<Var<'t>> {
        let us: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let vs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        Ok(h3.gather_rows(&us)?.mul(h3.gather_rows(&vs)?)?.sum_axis(1)?)
    };
    let mut loss = score(pos)?.bce_with_logits(&Tensor::ones(&[pos.len(), 1]))?;
    if !neg.is_empty() {
        loss = loss.add(score(neg)?.bce_with_logits(&Tensor::zeros(&[neg.len(), 1]))?)?;
    }
    match (h4, edge_targets) {
        (Some(h4), Some(t)) => {
            let us: Vec<usize> = pos.iter().map(|p| p.0).collect();
            let vs: Vec<usize> = pos.iter().map(|p| p.1).collect();
            let cat = h4.gather_rows(&us)?.concat_cols(h4.gather_rows(&vs)?)?;
            if cat.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "edge reconstruction {:?} vs targets {:?}",
                    cat.shape(),
                    t.shape()
                )));
            }
            loss = loss.add(mean_sq_row_dist(cat, tape.constant(t.clone()))?)?;
        }
        (None, None) => {}
        _ => {
            return Err(Error::Shape(
                "edge decoder and edge targets must both be present or absent".into(),
            ))
        }
    }
    Ok(loss)
}

/// Edge features of `pos` pairs from `graph`, padded with a zero column
/// when their width is odd.
pub fn edge_targets(graph: &Graph, pos: &[(usize, usize)]) -> Result<Option<Tensor>> {
    let Some(ef) = graph.edge_features() else {
        return Ok(None);
    };
    let de = ef.cols();
    let width = 2 * de.div_ceil(2);
    let mut rows = Vec::with_capacity(pos.len());
    for &(u, v) in pos {
        let id = graph
            .neighbors(u)
            .iter()
            .find(|&&(w, _)| w == v)
            .map(|&(_, e)| e)
            .ok_or_else(|| Error::Precondition(format!("({u}, {v}) is not an edge")))?;
        let mut r = ef.row(id).to_vec();
        r.resize(width, 0.0);
        rows.push(r);
    }
    Ok(Some(Tensor::from_rows(&rows)?))
}

pub fn topo_recon_loss<'t>(
    src: &ParamSource<'_, 't>,
    decoders: &Decoders,
    q: Var<'t>,
    pos: &[(usize, usize)],
    neg: &[(usize, usize)],
    edge_targets: Option<&Tensor>,
) -> Result<Var<'t>> {
    let h3 = decoders.topo.forward(src, q)?;
    let h4 = match (&decoders.edge, edge_targets) {
        (Some(d), Some(_)) => Some(d.forward(src, q)?),
        _ => None,
    };
    topo_terms(h3, h4, pos, neg, edge_targets.filter(|_| decoders.edge.is_some()))
}

/// Loss components of one step, averaged over the graphs in the batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub feat: f64,
    pub sem: f64,
    pub topo: f64,
    pub vocab: f64,
    pub commit: f64,
    pub ortho: f64,
}

impl LossBreakdown {
    /// `beta2 feat + beta3 sem + beta4 topo + vocab + beta1 commit + ortho`.
    pub fn weighted(&self, cfg: &PretrainConfig) -> f64 {
        cfg.beta2 * self.feat
            + cfg.beta3 * self.sem
            + cfg.beta4 * self.topo
            + self.vocab
            + cfg.beta1 * self.commit
            + self.ortho
    }
}

/// One original graph and the augmented view fed to the encoder.
pub struct View<'g> {
    pub original: &'g Graph,
    pub augmented: Graph,
}

pub struct StepOutput {
    pub losses: LossBreakdown,
    /// Token index per root, one list per graph.
    pub assignments: Vec<Vec<usize>>,
    /// Online encoder outputs of the last graph.
    pub last_embeddings: Tensor,
}

/// Target encoder view of `g`, with batch statistics and no gradient.
fn target_embeddings(target: &Encoder, g: &Graph) -> Result<Tensor> {
    let tape = Tape::new();
    let x = tape.constant(g.node_features().clone());
    Ok(target
        .forward(&ParamSource::Frozen(&tape), g, x, Mode::Train)?
        .0
        .value())
}

fn positive_links(g: &Graph, fraction: f64, rng: &mut Rng) -> Vec<(usize, usize)> {
    let e = g.num_edges();
    let k = ((fraction * e as f64).round() as usize).clamp(1, e);
    rand::seq::index::sample(rng, e, k)
        .into_iter()
        .map(|i| g.edges()[i])
        .collect()
}

/// One optimizer step over already-augmented views.
pub fn pretrain_step_views(
    model: &mut PretrainModel,
    opt: &mut OptimizerState,
    views: &[View<'_>],
    rng: &mut Rng,
) -> Result<StepOutput> {
    if views.is_empty() {
        return Err(Error::Precondition("pretrain step needs at least one graph".into()));
    }
    for v in views {
        model.check_graph(v.original)?;
        model.check_graph(&v.augmented)?;
        if v.original.num_nodes() != v.augmented.num_nodes() {
            return Err(Error::Shape("augmented view changed the node count".into()));
        }
    }
    let cfg = model.config.clone();
    let tape = Tape::new();
    let binder = ParamBinder::new(&tape);
    let src = ParamSource::Train(&binder);
    let scale = 1.0 / views.len() as f64;
    let mut parts: [Option<Var<'_>>; 5] = [None, None, None, None, None];
    let mut all_stats: Vec<Vec<NormStats>> = Vec::new();
    let mut assignments = Vec::new();
    let mut last = Tensor::zeros(&[0, 0]);
    for v in views {
        let g = v.original;
        let x = tape.constant(v.augmented.node_features().clone());
        let (z, stats) = model.encoder.forward(&src, &v.augmented, x, Mode::Train)?;
        all_stats.push(stats);
        last = z.value();
        let q = quantize_var(&src, &model.codebook, z)?;
        let feat = feat_recon_loss(&src, &model.decoders, q.straight, g.node_features())?;
        let z_hat = target_embeddings(&model.target, g)?;
        let sem = sem_recon_loss(&src, &model.decoders, q.straight, &z_hat, cfg.gamma)?;
        let topo = if g.num_edges() == 0 {
            tape.scalar(0.0)
        } else {
            let pos = positive_links(g, cfg.link_fraction, rng);
            let neg = negative_edge_sample(g, pos.len(), rng).unwrap_or_default();
            let targets = edge_targets(g, &pos)?;
            topo_recon_loss(&src, &model.decoders, q.straight, &pos, &neg, targets.as_ref())?
        };
        for (slot, term) in parts.iter_mut().zip([feat, sem, topo, q.vocab_loss, q.commit_loss]) {
            let t = term.scale(scale);
            *slot = Some(match slot.take() {
                None => t,
                Some(acc) => acc.add(t)?,
            });
        }
        assignments.push(q.indices);
    }
    let [feat, sem, topo, vocab, commit] = parts.map(|p| p.expect("at least one view"));
    let ortho = crate::vocab::ortho_loss(&src, &model.codebook, cfg.lambda)?;
    let losses = LossBreakdown {
        feat: feat.item(),
        sem: sem.item(),
        topo: topo.item(),
        vocab: vocab.item(),
        commit: commit.item(),
        ortho: ortho.item(),
        total: 0.0,
    };
    for (name, value) in [
        ("feat", losses.feat),
        ("sem", losses.sem),
        ("topo", losses.topo),
        ("vocab", losses.vocab),
        ("commit", losses.commit),
        ("ortho", losses.ortho),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
    }
    let total = feat
        .scale(cfg.beta2)
        .add(sem.scale(cfg.beta3))?
        .add(topo.scale(cfg.beta4))?
        .add(vocab)?
        .add(commit.scale(cfg.beta1))?
        .add(ortho)?;
    let losses = LossBreakdown {
        total: total.item(),
        ..losses
    };
    let grads = binder.collect(&tape.backward(total)?);
    opt.step(&mut Trainable(model), &grads)?;
    for stats in &all_stats {
        model.encoder.update_running(stats);
    }
    ema_update(&mut model.target, &model.encoder, cfg.ema_decay)?;
    Ok(StepOutput {
        losses,
        assignments,
        last_embeddings: last,
    })
}

/// Augments `graphs` and takes one step.
pub fn pretrain_step(
    model: &mut PretrainModel,
    opt: &mut OptimizerState,
    graphs: &[&Graph],
    aug_rng: &mut Rng,
    sample_rng: &mut Rng,
) -> Result<StepOutput> {
    let aug = model.config.augment(0);
    let views = graphs
        .iter()
        .map(|g| {
            Ok(View {
                original: g,
                augmented: augment_with(g, &aug, aug_rng)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    pretrain_step_views(model, opt, &views, sample_rng)
}

/// Per-epoch means of every loss component plus vocabulary perplexity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub perplexity: f64,
    pub tokens_used: usize,
    pub reseeded: usize,
}

pub const CURVE_HEADER: [&str; 9] = [
    "epoch",
    "L_total",
    "L_feat",
    "L_sem",
    "L_topo",
    "vocab",
    "commit",
    "ortho",
    "perplexity",
];

impl EpochRecord {
    pub fn csv_row(&self) -> Vec<String> {
        let l = &self.losses;
        let mut row = vec![self.epoch.to_string()];
        row.extend(
            [
                l.total,
                l.feat,
                l.sem,
                l.topo,
                l.vocab,
                l.commit,
                l.ortho,
                self.perplexity,
            ]
            .map(report::num),
        );
        row
    }
}

pub struct PretrainRun {
    pub model: PretrainModel,
    pub optimizer: OptimizerState,
    pub curve: Vec<EpochRecord>,
}

/// Builds a model for `graphs` from `seed` and trains it for
/// `config.epochs` epochs.
pub fn pretrain(graphs: &[Graph], config: &PretrainConfig, seed: u64) -> Result<PretrainRun> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::Precondition("pre-training needs at least one graph".into()))?;
    let model = PretrainModel::new(
        config.clone(),
        first.feature_dim(),
        first.edge_features().map(Tensor::cols),
        &mut rng::stream(seed, "init", 0),
    )?;
    let optimizer = OptimizerState::adamw(config.lr, config.weight_decay);
    continue_pretraining(
        PretrainRun {
            model,
            optimizer,
            curve: Vec::new(),
        },
        graphs,
        seed,
    )
}

/// Runs the remaining epochs of `run`; epoch `e` always draws from the same
/// streams, so resuming from a checkpoint reproduces an uninterrupted run.
pub fn continue_pretraining(mut run: PretrainRun, graphs: &[Graph], seed: u64) -> Result<PretrainRun> {
    let cfg = run.model.config.clone();
    let start = run.curve.len();
    for epoch in start..cfg.epochs {
        let mut aug_rng = rng::stream(seed, "augment", epoch as u64);
        let mut sample_rng = rng::stream(seed, "sampling", epoch as u64);
        let mut sum = LossBreakdown::default();
        let mut steps = 0;
        let mut usage = vec![0u64; run.model.codebook.num_tokens()];
        let mut recent = Tensor::zeros(&[0, cfg.hidden_dim]);
        for chunk in graphs.chunks(cfg.batch_size) {
            let refs: Vec<&Graph> = chunk.iter().collect();
            let out = pretrain_step(&mut run.model, &mut run.optimizer, &refs, &mut aug_rng, &mut sample_rng)?;
            for a in out.assignments.iter().flatten() {
                usage[*a] += 1;
            }
            let l = out.losses;
            sum = LossBreakdown {
                total: sum.total + l.total,
                feat: sum.feat + l.feat,
                sem: sum.sem + l.sem,
                topo: sum.topo + l.topo,
                vocab: sum.vocab + l.vocab,
                commit: sum.commit + l.commit,
                ortho: sum.ortho + l.ortho,
            };
            recent = out.last_embeddings;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let mean = LossBreakdown {
            total: sum.total / n,
            feat: sum.feat / n,
            sem: sum.sem / n,
            topo: sum.topo / n,
            vocab: sum.vocab / n,
            commit: sum.commit / n,
            ortho: sum.ortho / n,
        };
        let diag = VocabDiagnostics::from_counts(usage.clone())?;
        let mut reseeded = 0;
        if cfg.reseed_dead_tokens {
            let mut r = rng::stream(seed, "reseed", epoch as u64);
            reseeded = run.model.codebook.reseed_dead(&usage, &recent, &mut r)?.len();
        }
        run.model
            .codebook
            .repair_zero_rows(&mut rng::stream(seed, "repair", epoch as u64));
        run.curve.push(EpochRecord {
            epoch,
            losses: mean,
            perplexity: diag.perplexity,
            tokens_used: diag.used,
            reseeded,
        });
    }
    Ok(run)
}

pub fn write_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = curve.iter().map(EpochRecord::csv_row).collect();
    report::write_csv(path, &CURVE_HEADER, &rows)
}

/// Token usage of the frozen model's eval-mode embeddings over `graphs`.
pub fn vocab_usage(model: &PretrainModel, graphs: &[Graph]) -> Result<VocabDiagnostics> {
    let mut batches = Vec::new();
    for g in graphs {
        model.check_graph(g)?;
        let z = model.encoder.encode(g)?;
        batches.push(crate::vocab::assign(&model.codebook, &z)?);
    }
    VocabDiagnostics::from_assignments(model.codebook.num_tokens(), batches.iter().map(Vec::as_slice))
}
