//! JSON run configurations. Every file carries `"version": 1`, unknown keys
//! are rejected, and relative paths resolve against the file's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;
use treevocab_core::finetune::{FinetuneConfig, TaskKind};
use treevocab_core::pretrain::PretrainConfig;
use treevocab_core::synthetic::Family;
use treevocab_core::transfer::{GraphletConfig, TransferConfig, WlConfig};

pub const CONFIG_VERSION: u32 = 1;

/// A problem with the user's input, detected before any compute.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

/// A parsed config plus the directory its relative paths refer to.
pub struct Loaded<T> {
    pub config: T,
    pub base: PathBuf,
}

impl<T> Loaded<T> {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Resolves `p` and fails if nothing is there.
    pub fn existing(&self, what: &str, p: &Path) -> anyhow::Result<PathBuf> {
        let full = self.resolve(p);
        if !full.exists() {
            return Err(invalid(format!("{what} {} does not exist", full.display())));
        }
        Ok(full)
    }
}

pub fn load<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Loaded<T>> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| invalid(format!("config {} is not valid JSON: {e}", path.display())))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CONFIG_VERSION as u64 => {}
        Some(v) => {
            return Err(invalid(format!(
                "config {} has version {v}, expected {CONFIG_VERSION}",
                path.display()
            )))
        }
        None => {
            return Err(invalid(format!(
                "config {} has no integer `version` field",
                path.display()
            )))
        }
    }
    let config = serde_json::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, base })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainRun {
    /// Checked against `CONFIG_VERSION` by `load`.
    #[serde(rename = "version")]
    pub _version: u32,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub graphs: Vec<PathBuf>,
    #[serde(default)]
    pub model: PretrainConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneRun {
    /// Checked against `CONFIG_VERSION` by `load`.
    #[serde(rename = "version")]
    pub _version: u32,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub graphs: Vec<PathBuf>,
    #[serde(default = "node_task")]
    pub task: TaskKind,
    /// Task file with explicit instances; node tasks may instead use the
    /// named splits of `graphs[graph]`.
    pub instances: Option<PathBuf>,
    #[serde(default)]
    pub graph: usize,
    #[serde(default = "train_split")]
    pub train_split: String,
    pub monitor_split: Option<String>,
    #[serde(default = "eval_split")]
    pub eval_split: String,
    #[serde(default)]
    pub finetune: FinetuneConfig,
}

fn node_task() -> TaskKind {
    TaskKind::Node
}

fn train_split() -> String {
    "train".into()
}

fn eval_split() -> String {
    "test".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewshotRun {
    /// Checked against `CONFIG_VERSION` by `load`.
    #[serde(rename = "version")]
    pub _version: u32,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub graphs: Vec<PathBuf>,
    #[serde(default)]
    pub graph: usize,
    pub k: usize,
    #[serde(default)]
    pub finetune: FinetuneConfig,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    #[default]
    Wl,
    Graphlet,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelRun {
    /// Checked against `CONFIG_VERSION` by `load`.
    #[serde(rename = "version")]
    pub _version: u32,
    /// Overrides the seeds inside `wl` and `graphlet` when set.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub graphs: Vec<PathBuf>,
    /// Row and column names; file stems by default.
    pub names: Option<Vec<String>>,
    #[serde(default)]
    pub kernel: KernelKind,
    #[serde(default)]
    pub wl: WlConfig,
    #[serde(default)]
    pub graphlet: GraphletConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferRun {
    /// Checked against `CONFIG_VERSION` by `load`.
    #[serde(rename = "version")]
    pub _version: u32,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    #[serde(default = "default_target")]
    pub target: Family,
    #[serde(default = "default_sources")]
    pub sources: Vec<Family>,
    #[serde(default = "default_blocks")]
    pub blocks: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub transfer: TransferConfig,
}

fn default_target() -> Family {
    Family::G1
}

fn default_sources() -> Vec<Family> {
    vec![Family::G2, Family::G3]
}

fn default_blocks() -> Vec<usize> {
    vec![2, 4, 6, 8, 10]
}

pub const DEFAULT_TRANSFER_SEEDS: usize = 100;

fn default_seeds() -> usize {
    DEFAULT_TRANSFER_SEEDS
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InspectRun {
    /// Checked against `CONFIG_VERSION` by `load`.
    #[serde(rename = "version")]
    pub _version: u32,
    pub out: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub graphs: Vec<PathBuf>,
}
