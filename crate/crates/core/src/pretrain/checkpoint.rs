//! Binary checkpoints of a pre-training run.
//!
//! Layout: magic, `u32` version, a length-prefixed JSON header, a `u64`
//! record count, named `f64` tensors, and a SHA-256 digest of everything
//! before it. All integers and floats are little-endian. A JSON manifest
//! describing the same file is written next to it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use treevocab_autodiff::{Moments, OptimizerState, Tensor};

use super::{EpochRecord, PretrainConfig, PretrainModel, PretrainRun};
use crate::error::{Error, Result};
use crate::rng;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TVOCAB\x00\x01";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: PretrainConfig,
    feature_dim: usize,
    edge_dim: Option<usize>,
    seed: u64,
    optimizer: OptimizerHeader,
    curve: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: u32,
    sha256: String,
    seed: u64,
    epochs_done: usize,
    feature_dim: usize,
    edge_dim: Option<usize>,
    config: &'a PretrainConfig,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

/// A checkpoint as read back from disk.
pub struct Checkpoint {
    pub run: PretrainRun,
    pub seed: u64,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u64(buf, name.len() as u64);
    buf.extend_from_slice(name.as_bytes());
    put_u64(buf, t.rank() as u64);
    for &d in t.shape() {
        put_u64(buf, d as u64);
    }
    for &x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn records(run: &PretrainRun) -> BTreeMap<String, Tensor> {
    let mut out: BTreeMap<String, Tensor> = run
        .model
        .state()
        .into_iter()
        .map(|(k, v)| (format!("model/{k}"), v))
        .collect();
    for (k, m) in &run.optimizer.moments {
        out.insert(format!("opt.m/{k}"), m.first.clone());
        out.insert(format!("opt.v/{k}"), m.second.clone());
    }
    out
}

/// Writes `run` (trained from `seed`) to `path` plus its manifest.
pub fn save_checkpoint(path: &Path, run: &PretrainRun, seed: u64) -> Result<()> {
    let m = &run.model;
    let o = &run.optimizer;
    let header = Header {
        config: m.config.clone(),
        feature_dim: m.feature_dim,
        edge_dim: m.edge_dim,
        seed,
        optimizer: OptimizerHeader {
            lr: o.lr,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            step: o.step,
        },
        curve: run.curve.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Contract(format!("checkpoint header: {e}")))?;
    let tensors = records(run);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u64(&mut buf, json.len() as u64);
    buf.extend_from_slice(&json);
    put_u64(&mut buf, tensors.len() as u64);
    for (name, t) in &tensors {
        put_tensor(&mut buf, name, t);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))?;

    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        seed,
        epochs_done: run.curve.len(),
        feature_dim: m.feature_dim,
        edge_dim: m.edge_dim,
        config: &m.config,
        tensors: tensors
            .iter()
            .map(|(name, t)| ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Contract(format!("manifest: {e}")))?;
    std::fs::write(&mpath, text).map_err(|e| Error::io(mpath, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("implausible length {v}")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.len()?;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not utf-8".into()))?;
        let rank = self.len()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.len()?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&k| k.saturating_mul(8) <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor `{name}` has an implausible shape {shape:?}")))?;
        let bytes = self.take(numel * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
}

fn read_file(path: &Path) -> Result<(Header, BTreeMap<String, Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptCheckpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 4].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::CorruptCheckpoint("truncated file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptCheckpoint(
            "checksum mismatch (truncated or modified file)".into(),
        ));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len() + 4,
    };
    let n = r.len()?;
    let header: Header =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    let count = r.len()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::CorruptCheckpoint(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes after the last tensor".into()));
    }
    Ok((header, tensors))
}

fn restore(header: Header, tensors: BTreeMap<String, Tensor>, config: PretrainConfig) -> Result<Checkpoint> {
    // Initial values are overwritten; the stream only has to produce the
    // right shapes.
    let mut model = PretrainModel::new(
        config,
        header.feature_dim,
        header.edge_dim,
        &mut rng::stream(0, "init", 0),
    )?;
    let mut model_state = BTreeMap::new();
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for (name, t) in tensors {
        if let Some(k) = name.strip_prefix("model/") {
            model_state.insert(k.to_string(), t);
        } else if let Some(k) = name.strip_prefix("opt.m/") {
            first.insert(k.to_string(), t);
        } else if let Some(k) = name.strip_prefix("opt.v/") {
            second.insert(k.to_string(), t);
        } else {
            return Err(Error::CorruptCheckpoint(format!("unexpected tensor `{name}`")));
        }
    }
    model.load_state(&model_state)?;
    let o = &header.optimizer;
    let mut optimizer = OptimizerState::adamw(o.lr, o.weight_decay);
    optimizer.beta1 = o.beta1;
    optimizer.beta2 = o.beta2;
    optimizer.eps = o.eps;
    optimizer.step = o.step;
    for (k, m) in first {
        let v = second
            .remove(&k)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("optimizer moment `{k}` lacks its second moment")))?;
        if m.shape() != v.shape() {
            return Err(Error::CorruptCheckpoint(format!(
                "optimizer moments of `{k}` disagree in shape"
            )));
        }
        optimizer.moments.insert(k, Moments { first: m, second: v });
    }
    if let Some(k) = second.keys().next() {
        return Err(Error::CorruptCheckpoint(format!(
            "optimizer moment `{k}` lacks its first moment"
        )));
    }
    Ok(Checkpoint {
        run: PretrainRun {
            model,
            optimizer,
            curve: header.curve,
        },
        seed: header.seed,
    })
}

/// Reads a checkpoint with the configuration stored inside it.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, tensors) = read_file(path)?;
    let config = header.config.clone();
    restore(header, tensors, config)
}

/// Reads a checkpoint into a model built from `config`; fails with a shape
/// error when the stored tensors do not fit it.
pub fn load_checkpoint_expecting(path: &Path, config: &PretrainConfig) -> Result<Checkpoint> {
    let (header, tensors) = read_file(path)?;
    restore(header, tensors, config.clone())
}
