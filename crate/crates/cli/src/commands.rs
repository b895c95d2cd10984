use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::seq::SliceRandom;
use serde::Serialize;
use treevocab_core::finetune::{self, FinetuneRun, TaskInstance, TaskKind, TaskSplit};
use treevocab_core::graph::Graph;
use treevocab_core::pretrain::{self, load_checkpoint, manifest_path, save_checkpoint};
use treevocab_core::report::{num, write_csv, write_text};
use treevocab_core::rng::stream;
use treevocab_core::synthetic::{build_labeled, build_synthetic, Family, LabeledConfig, SyntheticFamily};
use treevocab_core::transfer::experiment::write_records;
use treevocab_core::transfer::{graphlet_similarity, run_synthetic_transfer, summarize, wl_subtree_similarity};
use treevocab_core::vocab::COLLAPSE_FRACTION;

use crate::config::{self, invalid, KernelKind, Loaded};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const PRETRAIN_CURVE_FILE: &str = "pretrain_curve.csv";
pub const FINETUNE_METRICS_FILE: &str = "finetune_metrics.json";
pub const FINETUNE_CURVE_FILE: &str = "finetune_curve.csv";
pub const FEWSHOT_METRICS_FILE: &str = "fewshot_metrics.json";
pub const FEWSHOT_CURVE_FILE: &str = "fewshot_curve.csv";
pub const KERNEL_FILE: &str = "kernel.csv";
pub const TRANSFER_FILE: &str = "transfer.csv";
pub const TRANSFER_SUMMARY_FILE: &str = "transfer_summary.csv";
pub const VOCAB_REPORT_FILE: &str = "vocab_report.json";

/// Fraction of labeled synthetic nodes in the train and val splits.
const SPLIT_FRACTIONS: (f64, f64) = (0.6, 0.2);

/// Rounds to the 12 significant digits used in every metric file.
fn sig12(x: f64) -> f64 {
    num(x).parse().expect("formatted float parses")
}

fn out_dir(flag: Option<PathBuf>, from_config: Option<&Path>, base: &Path) -> Result<PathBuf> {
    let dir = match (flag, from_config) {
        (Some(d), _) => d,
        (None, Some(d)) if d.is_absolute() => d.to_path_buf(),
        (None, Some(d)) => base.join(d),
        (None, None) => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)?;
    Ok(())
}

/// Resolves every graph path, failing on the first missing one, then loads.
fn load_graphs<T>(cfg: &Loaded<T>, paths: &[PathBuf]) -> Result<Vec<Graph>> {
    if paths.is_empty() {
        return Err(invalid("config lists no graphs"));
    }
    let full: Vec<PathBuf> = paths
        .iter()
        .map(|p| cfg.existing("graph file", p))
        .collect::<Result<_>>()?;
    full.iter().map(|p| Ok(Graph::load(p)?)).collect()
}

pub struct SynthArgs {
    pub family: String,
    pub blocks: Option<usize>,
    pub dim: Option<usize>,
    pub classes: Option<usize>,
    pub nodes_per_class: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut rng = stream(args.seed, "data", 0);
    let graph = if args.family.eq_ignore_ascii_case("labeled") {
        if args.blocks.is_some() {
            return Err(invalid("--blocks applies to g1, g2 and g3 only"));
        }
        let mut cfg = LabeledConfig::default();
        cfg.feature_dim = args.dim.unwrap_or(cfg.feature_dim);
        cfg.num_classes = args.classes.unwrap_or(cfg.num_classes);
        cfg.nodes_per_class = args.nodes_per_class.unwrap_or(cfg.nodes_per_class);
        cfg.validate()?;
        with_random_splits(build_labeled(&cfg, &mut rng)?, args.seed)?
    } else {
        if args.classes.is_some() || args.nodes_per_class.is_some() {
            return Err(invalid(
                "--classes and --nodes-per-class apply to the labeled family only",
            ));
        }
        let family: Family = args.family.parse()?;
        let blocks = args
            .blocks
            .ok_or_else(|| invalid("--blocks is required for g1, g2 and g3"))?;
        let spec = SyntheticFamily::new(family, blocks)?;
        build_synthetic(&spec, args.dim.unwrap_or(4), &mut rng)?
    };
    graph.save(&args.out)?;
    println!(
        "wrote {} ({} nodes, {} edges)",
        args.out.display(),
        graph.num_nodes(),
        graph.num_edges()
    );
    Ok(())
}

/// Shuffled train / val / test node splits.
fn with_random_splits(graph: Graph, seed: u64) -> Result<Graph> {
    let n = graph.num_nodes();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "split", 0));
    let n_train = (SPLIT_FRACTIONS.0 * n as f64).round() as usize;
    let n_val = (SPLIT_FRACTIONS.1 * n as f64).round() as usize;
    let part = |range: std::ops::Range<usize>| {
        let mut idx = order[range].to_vec();
        idx.sort_unstable();
        idx
    };
    let (train, val, test) = (
        part(0..n_train),
        part(n_train..n_train + n_val),
        part(n_train + n_val..n),
    );
    Ok(graph
        .with_split("train", train)?
        .with_split("val", val)?
        .with_split("test", test)?)
}

pub struct RunArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn pretrain(args: RunArgs, epochs: Option<usize>) -> Result<()> {
    let cfg: Loaded<config::PretrainRun> = config::load(&args.config)?;
    let run_cfg = &cfg.config;
    let mut model_cfg = run_cfg.model.clone();
    if let Some(e) = epochs {
        model_cfg.epochs = e;
    }
    model_cfg.validate()?;
    let graphs = load_graphs(&cfg, &run_cfg.graphs)?;
    let dim = graphs[0].feature_dim();
    if let Some(g) = graphs.iter().position(|g| g.feature_dim() != dim) {
        return Err(invalid(format!(
            "graph {g} has {}-d features, graph 0 has {dim}",
            graphs[g].feature_dim()
        )));
    }
    let seed = args.seed.unwrap_or(run_cfg.seed);
    let out = out_dir(args.out, run_cfg.out.as_deref(), &cfg.base)?;

    let run = pretrain::pretrain(&graphs, &model_cfg, seed)?;
    let ck = out.join(CHECKPOINT_FILE);
    save_checkpoint(&ck, &run, seed)?;
    pretrain::write_curve(&out.join(PRETRAIN_CURVE_FILE), &run.curve)?;
    let last = run.curve.last().map(|r| r.losses.total).unwrap_or(f64::NAN);
    println!(
        "pre-trained {} epochs on {} graphs, final loss {}",
        run.curve.len(),
        graphs.len(),
        num(last)
    );
    println!("checkpoint: {}", ck.display());
    println!("manifest: {}", manifest_path(&ck).display());
    Ok(())
}

#[derive(Serialize)]
struct Metrics {
    task: TaskKind,
    k_shot: Option<usize>,
    seed: u64,
    acc: f64,
    best_epoch: usize,
    epochs_run: usize,
    loss_curve_path: String,
}

fn write_finetune_outputs(
    out: &Path,
    metrics_file: &str,
    curve_file: &str,
    task: TaskKind,
    k_shot: Option<usize>,
    seed: u64,
    run: &FinetuneRun,
) -> Result<()> {
    finetune::write_finetune_curve(&out.join(curve_file), &run.curve)?;
    let metrics = Metrics {
        task,
        k_shot,
        seed,
        acc: sig12(run.eval_acc),
        best_epoch: run.best_epoch,
        epochs_run: run.curve.len(),
        loss_curve_path: curve_file.into(),
    };
    write_json(&out.join(metrics_file), &metrics)?;
    println!(
        "accuracy {} (best epoch {} of {})",
        num(run.eval_acc),
        run.best_epoch,
        run.curve.len()
    );
    Ok(())
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskFile {
    num_classes: usize,
    train: Vec<TaskInstance>,
    monitor: Option<Vec<TaskInstance>>,
    eval: Vec<TaskInstance>,
}

fn split_instances(graph: &Graph, gi: usize, name: &str) -> Result<Vec<TaskInstance>> {
    let labels = graph
        .labels()
        .ok_or_else(|| invalid(format!("graph {gi} has no node labels")))?;
    let idx = graph
        .splits()
        .get(name)
        .ok_or_else(|| invalid(format!("graph {gi} has no split named `{name}`")))?;
    Ok(idx.iter().map(|&v| TaskInstance::node(gi, v, labels[v])).collect())
}

pub fn finetune(args: RunArgs) -> Result<()> {
    let cfg: Loaded<config::FinetuneRun> = config::load(&args.config)?;
    let c = &cfg.config;
    c.finetune.validate()?;
    let ck_path = cfg.existing("checkpoint", &c.checkpoint)?;
    let task_path = c
        .instances
        .as_ref()
        .map(|p| cfg.existing("instance file", p))
        .transpose()?;
    let graphs = load_graphs(&cfg, &c.graphs)?;
    let (num_classes, train, monitor, eval) = match task_path {
        Some(p) => {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            let tf: TaskFile =
                serde_json::from_str(&text).map_err(|e| invalid(format!("instance file {}: {e}", p.display())))?;
            if let Some(t) = tf.train.iter().chain(&tf.eval).find(|t| t.kind != c.task) {
                return Err(invalid(format!(
                    "instance file holds a {:?} instance but the task is {:?}",
                    t.kind, c.task
                )));
            }
            (tf.num_classes, tf.train, tf.monitor, tf.eval)
        }
        None => {
            if c.task != TaskKind::Node {
                return Err(invalid("link and graph tasks need an `instances` file"));
            }
            let g = graphs
                .get(c.graph)
                .ok_or_else(|| invalid(format!("graph index {} out of range", c.graph)))?;
            let nc = g
                .num_classes()
                .ok_or_else(|| invalid(format!("graph {} has no class count", c.graph)))?;
            let monitor = c
                .monitor_split
                .as_deref()
                .map(|m| split_instances(g, c.graph, m))
                .transpose()?;
            (
                nc,
                split_instances(g, c.graph, &c.train_split)?,
                monitor,
                split_instances(g, c.graph, &c.eval_split)?,
            )
        }
    };
    let ck = load_checkpoint(&ck_path)?;
    let seed = args.seed.unwrap_or(c.seed);
    let out = out_dir(args.out, c.out.as_deref(), &cfg.base)?;
    let split = TaskSplit {
        train: &train,
        monitor: monitor.as_deref(),
        eval: &eval,
    };
    let run = finetune::finetune(&ck.run.model, &graphs, &split, num_classes, &c.finetune, seed)?;
    write_finetune_outputs(
        &out,
        FINETUNE_METRICS_FILE,
        FINETUNE_CURVE_FILE,
        c.task,
        None,
        seed,
        &run,
    )
}

pub fn fewshot(args: RunArgs, k: Option<usize>) -> Result<()> {
    let cfg: Loaded<config::FewshotRun> = config::load(&args.config)?;
    let c = &cfg.config;
    c.finetune.validate()?;
    let k = k.unwrap_or(c.k);
    if k == 0 {
        return Err(invalid("k must be >= 1"));
    }
    let ck_path = cfg.existing("checkpoint", &c.checkpoint)?;
    let graphs = load_graphs(&cfg, &c.graphs)?;
    if c.graph >= graphs.len() {
        return Err(invalid(format!("graph index {} out of range", c.graph)));
    }
    let ck = load_checkpoint(&ck_path)?;
    let seed = args.seed.unwrap_or(c.seed);
    let out = out_dir(args.out, c.out.as_deref(), &cfg.base)?;
    let run = finetune::fewshot(&ck.run.model, &graphs, c.graph, k, &c.finetune, seed)?;
    write_finetune_outputs(
        &out,
        FEWSHOT_METRICS_FILE,
        FEWSHOT_CURVE_FILE,
        TaskKind::Node,
        Some(k),
        seed,
        &run,
    )
}

pub fn kernel(args: RunArgs) -> Result<()> {
    let cfg: Loaded<config::KernelRun> = config::load(&args.config)?;
    let c = &cfg.config;
    let names: Vec<String> = match &c.names {
        Some(n) if n.len() != c.graphs.len() => {
            return Err(invalid(format!("{} names for {} graphs", n.len(), c.graphs.len())))
        }
        Some(n) => n.clone(),
        None => c
            .graphs
            .iter()
            .map(|p| {
                p.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            })
            .collect(),
    };
    let mut wl = c.wl.clone();
    let mut graphlet = c.graphlet.clone();
    if let Some(s) = args.seed.or(c.seed) {
        wl.seed = s;
        graphlet.seed = s;
    }
    wl.validate()?;
    graphlet.validate()?;
    let graphs = load_graphs(&cfg, &c.graphs)?;
    let out = out_dir(args.out, c.out.as_deref(), &cfg.base)?;
    let n = graphs.len();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let s = match c.kernel {
                KernelKind::Wl => wl_subtree_similarity(&graphs[i], &graphs[j], &wl)?,
                KernelKind::Graphlet => graphlet_similarity(&graphs[i], &graphs[j], &graphlet)?,
            };
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    let mut header = vec!["graph"];
    header.extend(names.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = names
        .iter()
        .zip(&sim)
        .map(|(name, row)| {
            std::iter::once(name.clone())
                .chain(row.iter().map(|&s| num(s)))
                .collect()
        })
        .collect();
    let path = out.join(KERNEL_FILE);
    write_csv(&path, &header, &rows)?;
    println!("wrote {n}x{n} similarity matrix to {}", path.display());
    Ok(())
}

pub fn transfer(args: RunArgs, seeds: Option<usize>) -> Result<()> {
    let cfg: Loaded<config::TransferRun> = config::load(&args.config)?;
    let c = &cfg.config;
    let seeds = seeds.unwrap_or(c.seeds);
    if seeds == 0 {
        return Err(invalid("seeds must be >= 1"));
    }
    if c.sources.is_empty() || c.blocks.is_empty() {
        return Err(invalid("sources and blocks must be non-empty"));
    }
    for &b in &c.blocks {
        SyntheticFamily::new(c.target, b)?;
    }
    let mut tcfg = c.transfer.clone();
    tcfg.seed = args.seed.unwrap_or(c.seed);
    tcfg.wl.validate()?;
    tcfg.graphlet.validate()?;
    let out = out_dir(args.out, c.out.as_deref(), &cfg.base)?;
    let mut records = Vec::new();
    for &source in &c.sources {
        for &blocks in &c.blocks {
            records.extend(run_synthetic_transfer(source, c.target, blocks, seeds, &tcfg)?);
        }
    }
    write_records(&out.join(TRANSFER_FILE), &records)?;
    let summary = summarize(&records);
    let rows: Vec<Vec<String>> = summary
        .iter()
        .map(|s| {
            vec![
                s.source.to_string(),
                s.target.to_string(),
                s.num_blocks.to_string(),
                s.seeds.to_string(),
                num(s.wl_sim),
                num(s.graphlet_sim),
                num(s.cmd),
                num(s.transferability),
            ]
        })
        .collect();
    write_csv(
        &out.join(TRANSFER_SUMMARY_FILE),
        &[
            "source",
            "target",
            "num_blocks",
            "seeds",
            "wl_sim",
            "graphlet_sim",
            "cmd",
            "transferability",
        ],
        &rows,
    )?;
    for s in &summary {
        println!(
            "{} -> {} blocks {:>2}: wl {} transferability {}",
            s.source,
            s.target,
            s.num_blocks,
            num(s.wl_sim),
            num(s.transferability)
        );
    }
    Ok(())
}

pub struct InspectArgs {
    pub config: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub graphs: Vec<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct VocabReport {
    num_tokens: usize,
    used: usize,
    perplexity: f64,
    collapse_threshold: f64,
    collapsed: bool,
    top_tokens: Vec<(usize, u64)>,
    max_offdiag_cosine: Option<f64>,
}

pub fn inspect_vocab(args: InspectArgs) -> Result<()> {
    let (ck_path, graph_paths, out) = match &args.config {
        Some(p) => {
            let cfg: Loaded<config::InspectRun> = config::load(p)?;
            let ck = match &args.checkpoint {
                Some(c) => c.clone(),
                None => cfg.existing("checkpoint", &cfg.config.checkpoint)?,
            };
            let graphs: Vec<PathBuf> = if args.graphs.is_empty() {
                cfg.config.graphs.iter().map(|g| cfg.resolve(g)).collect()
            } else {
                args.graphs.clone()
            };
            let out = args.out.clone().or(cfg.config.out.as_ref().map(|o| cfg.resolve(o)));
            (ck, graphs, out)
        }
        None => {
            let ck = args
                .checkpoint
                .clone()
                .ok_or_else(|| invalid("give --checkpoint or --config"))?;
            (ck, args.graphs.clone(), args.out.clone())
        }
    };
    if !ck_path.exists() {
        return Err(invalid(format!("checkpoint {} does not exist", ck_path.display())));
    }
    if graph_paths.is_empty() {
        return Err(invalid("give at least one --graph to embed"));
    }
    if let Some(p) = graph_paths.iter().find(|p| !p.exists()) {
        return Err(invalid(format!("graph file {} does not exist", p.display())));
    }
    let graphs: Vec<Graph> = graph_paths.iter().map(Graph::load).collect::<Result<_, _>>()?;
    let ck = load_checkpoint(&ck_path)?;
    let model = &ck.run.model;
    let diag = pretrain::vocab_usage(model, &graphs)?;
    let k = diag.num_tokens;
    let threshold = COLLAPSE_FRACTION * k as f64;
    let report = VocabReport {
        num_tokens: k,
        used: diag.used,
        perplexity: sig12(diag.perplexity),
        collapse_threshold: sig12(threshold),
        collapsed: diag.low_perplexity(),
        top_tokens: diag.top(10),
        max_offdiag_cosine: model.codebook.max_offdiag_cosine().map(sig12),
    };
    println!("tokens (K): {k}");
    println!("used tokens: {}", report.used);
    println!("perplexity: {}", num(diag.perplexity));
    println!("top tokens (index: count):");
    for (i, c) in &report.top_tokens {
        println!("  {i}: {c}");
    }
    match model.codebook.max_offdiag_cosine() {
        Some(c) => println!("max off-diagonal token cosine: {}", num(c)),
        None => println!("max off-diagonal token cosine: n/a (single token)"),
    }
    if report.collapsed {
        println!("COLLAPSE: perplexity below {} (5% of K)", num(threshold));
    }
    if let Some(dir) = out {
        fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        write_json(&dir.join(VOCAB_REPORT_FILE), &report)?;
    }
    Ok(())
}
