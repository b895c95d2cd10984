//! Synthetic transferability experiment: train a graph autoencoder on a
//! source graph, embed source and target with it, and score the pair by
//! inverse CMD alongside both kernel similarities.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use treevocab_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::gcn::{train_gae, GaeConfig, Gcn};
use crate::graph::Graph;
use crate::report::{num, write_csv};
use crate::rng::stream;
use crate::synthetic::{build_synthetic, Family, SyntheticFamily};
use crate::transfer::cmd::{cmd, CmdConfig};
use crate::transfer::graphlet::{graphlet_similarity, GraphletConfig};
use crate::transfer::wl::{wl_subtree_similarity, WlConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub seed: u64,
    pub feature_dim: usize,
    pub gae: GaeConfig,
    pub wl: WlConfig,
    pub graphlet: GraphletConfig,
    pub cmd: CmdConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            feature_dim: 4,
            gae: GaeConfig::default(),
            wl: WlConfig::default(),
            graphlet: GraphletConfig {
                exact: true,
                ..Default::default()
            },
            cmd: CmdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub source: Family,
    pub target: Family,
    pub num_blocks: usize,
    pub seed: usize,
    pub wl_sim: f64,
    pub graphlet_sim: f64,
    pub cmd: f64,
    pub transferability: f64,
}

pub const TRANSFER_HEADER: [&str; 8] = [
    "source",
    "target",
    "num_blocks",
    "seed",
    "wl_sim",
    "graphlet_sim",
    "cmd",
    "transferability",
];

impl TransferRecord {
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.source.to_string(),
            self.target.to_string(),
            self.num_blocks.to_string(),
            self.seed.to_string(),
            num(self.wl_sim),
            num(self.graphlet_sim),
            num(self.cmd),
            num(self.transferability),
        ]
    }
}

fn family_index(f: Family) -> u64 {
    match f {
        Family::G1 => 1,
        Family::G2 => 2,
        Family::G3 => 3,
    }
}

/// Stream index for per-(family, blocks, seed) draws. Graphs depend only on
/// their own family, so every source is compared with the same targets.
fn cell(family: u64, num_blocks: usize, seed: usize) -> u64 {
    (family << 48) ^ ((num_blocks as u64) << 32) ^ seed as u64
}

/// Re-initializations tried before a source run counts as failed.
pub const MAX_INIT_ATTEMPTS: u64 = 16;

/// Trains the autoencoder on `src`, drawing a fresh initialization while
/// every source embedding is zero (all units dead after relu).
fn train_source(src: &Graph, num_blocks: usize, seed: usize, cfg: &TransferConfig) -> Result<(Gcn, Tensor)> {
    for attempt in 0..MAX_INIT_ATTEMPTS {
        let mut rng = stream(cfg.seed, "transfer-init", cell(attempt, num_blocks, seed));
        let (model, _) = train_gae(src, &cfg.gae, &mut rng)?;
        let z = model.embed(src)?;
        if z.data().iter().any(|&x| x != 0.0) {
            return Ok((model, z));
        }
    }
    Err(Error::Contract(format!(
        "autoencoder collapsed to zero embeddings on all {MAX_INIT_ATTEMPTS} initializations"
    )))
}

/// One record per seed, in seed order.
pub fn run_synthetic_transfer(
    source: Family,
    target: Family,
    num_blocks: usize,
    seeds: usize,
    cfg: &TransferConfig,
) -> Result<Vec<TransferRecord>> {
    if seeds == 0 {
        return Err(Error::Precondition("transfer needs at least one seed".into()));
    }
    let src_spec = SyntheticFamily::new(source, num_blocks)?;
    let tgt_spec = SyntheticFamily::new(target, num_blocks)?;
    (0..seeds)
        .into_par_iter()
        .map(|s| {
            let src = build_synthetic(
                &src_spec,
                cfg.feature_dim,
                &mut stream(cfg.seed, "transfer-source", cell(family_index(source), num_blocks, s)),
            )?;
            let tgt = build_synthetic(
                &tgt_spec,
                cfg.feature_dim,
                &mut stream(cfg.seed, "transfer-target", cell(family_index(target), num_blocks, s)),
            )?;
            let (model, z_src) = train_source(&src, num_blocks, s, cfg)?;
            let d = cmd(&z_src, &model.embed(&tgt)?, &cfg.cmd)?;
            Ok(TransferRecord {
                source,
                target,
                num_blocks,
                seed: s,
                wl_sim: wl_subtree_similarity(&src, &tgt, &cfg.wl)?,
                graphlet_sim: graphlet_similarity(&src, &tgt, &cfg.graphlet)?,
                cmd: d,
                transferability: 1.0 / (d + cfg.cmd.eps),
            })
        })
        .collect()
}

/// Per-(source, target, blocks) means over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferSummary {
    pub source: Family,
    pub target: Family,
    pub num_blocks: usize,
    pub seeds: usize,
    pub wl_sim: f64,
    pub graphlet_sim: f64,
    pub cmd: f64,
    pub transferability: f64,
}

pub fn summarize(records: &[TransferRecord]) -> Vec<TransferSummary> {
    let mut out: Vec<TransferSummary> = Vec::new();
    for r in records {
        let slot = out
            .iter_mut()
            .find(|s| s.source == r.source && s.target == r.target && s.num_blocks == r.num_blocks);
        let s = match slot {
            Some(s) => s,
            None => {
                out.push(TransferSummary {
                    source: r.source,
                    target: r.target,
                    num_blocks: r.num_blocks,
                    seeds: 0,
                    wl_sim: 0.0,
                    graphlet_sim: 0.0,
                    cmd: 0.0,
                    transferability: 0.0,
                });
                out.last_mut().unwrap()
            }
        };
        s.seeds += 1;
        s.wl_sim += r.wl_sim;
        s.graphlet_sim += r.graphlet_sim;
        s.cmd += r.cmd;
        s.transferability += r.transferability;
    }
    for s in &mut out {
        let n = s.seeds as f64;
        s.wl_sim /= n;
        s.graphlet_sim /= n;
        s.cmd /= n;
        s.transferability /= n;
    }
    out
}

pub fn write_records(path: &Path, records: &[TransferRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = records.iter().map(TransferRecord::csv_row).collect();
    write_csv(path, &TRANSFER_HEADER, &rows)
}
