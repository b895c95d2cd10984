//! Discrete tree vocabulary: a learnable codebook, nearest-token
//! quantization with stop-gradient losses, the orthogonality penalty and
//! usage diagnostics.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use treevocab_autodiff::{Parameters, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{ParamSource, Stateful};
use crate::rng::Rng;

/// Rows with a smaller norm count as zero.
pub const MIN_TOKEN_NORM: f64 = 1e-8;
/// Fewer than this fraction of tokens in use flags collapse.
pub const COLLAPSE_FRACTION: f64 = 0.05;

/// Distance used to pick the nearest token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    pub num_tokens: usize,
    #[serde(default)]
    pub metric: Metric,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            num_tokens: 128,
            metric: Metric::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub prefix: String,
    /// `[K, d']`, one token per row.
    pub tokens: Tensor,
    pub metric: Metric,
}

impl Codebook {
    /// Rows drawn from `N(0, 1/d')` and scaled to unit norm.
    pub fn new(prefix: &str, num_tokens: usize, dim: usize, metric: Metric, rng: &mut Rng) -> Result<Self> {
        if num_tokens == 0 || dim == 0 {
            return Err(Error::Precondition("codebook needs K >= 1 and d' >= 1".into()));
        }
        let mut tokens = Tensor::zeros(&[num_tokens, dim]);
        for k in 0..num_tokens {
            fill_unit_row(tokens.row_mut(k), rng);
        }
        Ok(Self {
            prefix: prefix.to_string(),
            tokens,
            metric,
        })
    }

    pub fn from_tokens(prefix: &str, tokens: Tensor, metric: Metric) -> Result<Self> {
        if tokens.rank() != 2 || tokens.rows() == 0 || tokens.cols() == 0 {
            return Err(Error::Shape(format!(
                "codebook tokens must be a non-empty matrix, got {:?}",
                tokens.shape()
            )));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            tokens,
            metric,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn param_name(&self) -> String {
        format!("{}.tokens", self.prefix)
    }

    /// Re-draws every row whose norm fell below [`MIN_TOKEN_NORM`]; returns
    /// how many were replaced.
    pub fn repair_zero_rows(&mut self, rng: &mut Rng) -> usize {
        let mut fixed = 0;
        for k in 0..self.num_tokens() {
            if row_norm(self.tokens.row(k)) < MIN_TOKEN_NORM {
                fill_unit_row(self.tokens.row_mut(k), rng);
                fixed += 1;
            }
        }
        fixed
    }

    /// Points tokens with zero usage at randomly chosen rows of `recent`
    /// encoder outputs, rescaled to unit norm like freshly drawn tokens.
    /// Returns the re-seeded token indices.
    pub fn reseed_dead(&mut self, usage: &[u64], recent: &Tensor, rng: &mut Rng) -> Result<Vec<usize>> {
        if usage.len() != self.num_tokens() {
            return Err(Error::Shape(format!(
                "usage has {} entries for {} tokens",
                usage.len(),
                self.num_tokens()
            )));
        }
        if recent.rank() != 2 || recent.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "recent outputs {:?} do not match token width {}",
                recent.shape(),
                self.dim()
            )));
        }
        let candidates: Vec<usize> = (0..recent.rows())
            .filter(|&r| row_norm(recent.row(r)) >= MIN_TOKEN_NORM)
            .collect();
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let mut reseeded = Vec::new();
        for (k, _) in usage.iter().enumerate().filter(|(_, &c)| c == 0) {
            let row = recent.row(candidates[rng.gen_range(0..candidates.len())]);
            let n = row_norm(row);
            for (t, x) in self.tokens.row_mut(k).iter_mut().zip(row) {
                *t = x / n;
            }
            reseeded.push(k);
        }
        Ok(reseeded)
    }

    /// Largest cosine similarity between two distinct tokens.
    pub fn max_offdiag_cosine(&self) -> Option<f64> {
        let k = self.num_tokens();
        let mut best: Option<f64> = None;
        for i in 0..k {
            for j in i + 1..k {
                let c = cosine(self.tokens.row(i), self.tokens.row(j));
                best = Some(best.map_or(c, |b| b.max(c)));
            }
        }
        best
    }
}

impl Parameters for Codebook {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&self.param_name(), &self.tokens);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let name = self.param_name();
        f(&name, &mut self.tokens);
    }
}

impl Stateful for Codebook {}

fn fill_unit_row(row: &mut [f64], rng: &mut Rng) {
    let scale = 1.0 / (row.len() as f64).sqrt();
    loop {
        for x in row.iter_mut() {
            *x = scale * rng.sample::<f64, _>(StandardNormal);
        }
        let n = row_norm(row);
        if n >= MIN_TOKEN_NORM {
            row.iter_mut().for_each(|x| *x /= n);
            return;
        }
    }
}

fn row_norm(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (row_norm(a) * row_norm(b))
}

/// Distance of `z` to token `c` under `metric`.
pub fn distance(metric: Metric, z: &[f64], c: &[f64]) -> f64 {
    match metric {
        Metric::Cosine => 1.0 - cosine(z, c),
        Metric::Euclidean => z.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum(),
    }
}

/// Nearest token for every row of `z`; ties go to the lowest index.
pub fn assign(codebook: &Codebook, z: &Tensor) -> Result<Vec<usize>> {
    if z.rank() != 2 || z.cols() != codebook.dim() {
        return Err(Error::Shape(format!(
            "embeddings {:?} do not match codebook width {}",
            z.shape(),
            codebook.dim()
        )));
    }
    (0..z.rows())
        .map(|i| {
            let zi = z.row(i);
            if row_norm(zi) < MIN_TOKEN_NORM {
                return Err(Error::Domain(format!("embedding row {i} has zero norm")));
            }
            let mut best = (0, f64::INFINITY);
            for k in 0..codebook.num_tokens() {
                let c = codebook.tokens.row(k);
                if codebook.metric == Metric::Cosine && row_norm(c) < MIN_TOKEN_NORM {
                    continue;
                }
                let d = distance(codebook.metric, zi, c);
                if d < best.1 {
                    best = (k, d);
                }
            }
            if best.1.is_infinite() {
                return Err(Error::Domain("codebook has no usable token".into()));
            }
            Ok(best.0)
        })
        .collect()
}

/// Quantization of a plain matrix, outside any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    pub indices: Vec<usize>,
    pub quantized: Tensor,
    pub vocab_loss: f64,
    pub commit_loss: f64,
}

pub fn quantize(codebook: &Codebook, z: &Tensor) -> Result<QuantizeResult> {
    let indices = assign(codebook, z)?;
    let quantized = codebook.tokens.gather_rows(&indices)?;
    let loss = z.zip_map(&quantized, |a, b| (a - b) * (a - b))?.sum() / z.rows() as f64;
    Ok(QuantizeResult {
        indices,
        quantized,
        vocab_loss: loss,
        commit_loss: loss,
    })
}

/// Quantization on a tape. `quantized` holds the selected token rows;
/// `straight` carries the same values but routes its gradient to `z`.
pub struct Quantized<'t> {
    pub indices: Vec<usize>,
    pub quantized: Var<'t>,
    pub straight: Var<'t>,
    /// `(1/m) sum ||sg[z_i] - c_j||^2`, moves only the tokens.
    pub vocab_loss: Var<'t>,
    /// `(1/m) sum ||z_i - sg[c_j]||^2`, moves only the encoder.
    pub commit_loss: Var<'t>,
}

pub fn quantize_var<'t>(src: &ParamSource<'_, 't>, codebook: &Codebook, z: Var<'t>) -> Result<Quantized<'t>> {
    let indices = assign(codebook, &z.value())?;
    let m = indices.len() as f64;
    let tokens = src.var(&codebook.param_name(), &codebook.tokens);
    let quantized = tokens.gather_rows(&indices)?;
    let sq_mean = |d: Var<'t>| -> Result<Var<'t>> { Ok(d.mul(d)?.sum().scale(1.0 / m)) };
    let vocab_loss = sq_mean(z.stop_gradient().sub(quantized)?)?;
    let commit_loss = sq_mean(z.sub(quantized.stop_gradient())?)?;
    let straight = quantized.straight_through(z)?;
    Ok(Quantized {
        indices,
        quantized,
        straight,
        vocab_loss,
        commit_loss,
    })
}

/// `lambda / K^2 * ||C C^T - I||_F^2` on the raw token matrix.
pub fn ortho_loss<'t>(src: &ParamSource<'_, 't>, codebook: &Codebook, lambda: f64) -> Result<Var<'t>> {
    let k = codebook.num_tokens();
    let c = src.var(&codebook.param_name(), &codebook.tokens);
    let gram = c.matmul(c.transpose()?)?;
    let diff = gram.sub(src.tape().constant(Tensor::eye(k)))?;
    Ok(diff.mul(diff)?.sum().scale(lambda / (k * k) as f64))
}

/// Plain-value counterpart of [`ortho_loss`].
pub fn ortho_loss_value(codebook: &Codebook, lambda: f64) -> Result<f64> {
    let k = codebook.num_tokens();
    let c = &codebook.tokens;
    let gram = c.matmul(&c.transpose()?)?;
    let total: f64 = (0..k)
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .map(|(i, j)| {
            let d = gram.get(i, j) - if i == j { 1.0 } else { 0.0 };
            d * d
        })
        .sum();
    Ok(lambda * total / (k * k) as f64)
}

/// Token usage over a set of assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabDiagnostics {
    pub num_tokens: usize,
    pub counts: Vec<u64>,
    pub used: usize,
    /// `exp` of the entropy of the usage distribution.
    pub perplexity: f64,
    /// Fewer than 5% of the tokens were used.
    pub collapsed: bool,
}

impl VocabDiagnostics {
    pub fn from_assignments<'a>(num_tokens: usize, batches: impl IntoIterator<Item = &'a [usize]>) -> Result<Self> {
        let mut counts = vec![0u64; num_tokens];
        for batch in batches {
            for &j in batch {
                if j >= num_tokens {
                    return Err(Error::Precondition(format!(
                        "token index {j} out of range for K={num_tokens}"
                    )));
                }
                counts[j] += 1;
            }
        }
        Self::from_counts(counts)
    }

    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Precondition(
                "vocabulary diagnostics need at least one assignment".into(),
            ));
        }
        let entropy: f64 = counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum();
        let used = counts.iter().filter(|&&c| c > 0).count();
        let num_tokens = counts.len();
        Ok(Self {
            num_tokens,
            used,
            perplexity: entropy.exp(),
            collapsed: (used as f64) < COLLAPSE_FRACTION * num_tokens as f64,
            counts,
        })
    }

    /// Perplexity below 5% of `K`.
    pub fn low_perplexity(&self) -> bool {
        self.perplexity < COLLAPSE_FRACTION * self.num_tokens as f64
    }

    /// The `n` most used tokens as `(index, count)`, most used first, ties
    /// by index.
    pub fn top(&self, n: usize) -> Vec<(usize, u64)> {
        let mut order: Vec<(usize, u64)> = self.counts.iter().copied().enumerate().collect();
        order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        order.truncate(n);
        order
    }
}
