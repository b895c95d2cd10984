//! Central moment discrepancy between two sample matrices.

use serde::{Deserialize, Serialize};
use treevocab_autodiff::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interval {
    /// Per-dimension min/max over the union of both samples.
    Empirical,
    /// One shared value range `[a, b]`.
    Fixed(f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmdConfig {
    /// Highest central moment order `K`.
    pub moments: usize,
    pub interval: Interval,
    /// Floor added before inverting.
    pub eps: f64,
}

impl Default for CmdConfig {
    fn default() -> Self {
        Self {
            moments: 5,
            interval: Interval::Empirical,
            eps: 1e-6,
        }
    }
}

fn column_moments(x: &Tensor, cols: &[(f64, f64)], k: usize) -> Vec<Vec<f64>> {
    let (m, d) = (x.rows(), x.cols());
    let scaled = |r: usize, c: usize| {
        let (a, b) = cols[c];
        (x.get(r, c) - a) / (b - a)
    };
    let mean: Vec<f64> = (0..d)
        .map(|c| (0..m).map(|r| scaled(r, c)).sum::<f64>() / m as f64)
        .collect();
    let mut out = vec![mean.clone()];
    for j in 2..=k {
        out.push(
            (0..d)
                .map(|c| (0..m).map(|r| (scaled(r, c) - mean[c]).powi(j as i32)).sum::<f64>() / m as f64)
                .collect(),
        );
    }
    out
}

/// `CMD_K(X, Y)`: normalized distance of means plus normalized distances of
/// central moments of order `2..=K`. Each dimension is rescaled by its value
/// range so the per-order normalizers `1/|b-a|^j` become 1.
pub fn cmd(x: &Tensor, y: &Tensor, cfg: &CmdConfig) -> Result<f64> {
    if x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols() {
        return Err(Error::Shape(format!(
            "cmd samples must share their column dimension: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::Precondition("cmd needs at least 2 samples per side".into()));
    }
    if cfg.moments == 0 {
        return Err(Error::Precondition("cmd moment order must be >= 1".into()));
    }
    let d = x.cols();
    let ranges: Vec<(f64, f64)> = match cfg.interval {
        Interval::Fixed(a, b) => {
            if !(b > a) {
                return Err(Error::Precondition(format!("cmd interval [{a}, {b}] is empty")));
            }
            vec![(a, b); d]
        }
        Interval::Empirical => (0..d)
            .map(|c| {
                let vals = (0..x.rows())
                    .map(|r| x.get(r, c))
                    .chain((0..y.rows()).map(|r| y.get(r, c)));
                let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                // A constant column contributes zero either way.
                if hi > lo {
                    (lo, hi)
                } else {
                    (lo, lo + 1.0)
                }
            })
            .collect(),
    };
    let mx = column_moments(x, &ranges, cfg.moments);
    let my = column_moments(y, &ranges, cfg.moments);
    Ok(mx
        .iter()
        .zip(&my)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .sum())
}

/// `1 / (cmd + eps)`.
pub fn transferability(x: &Tensor, y: &Tensor, cfg: &CmdConfig) -> Result<f64> {
    Ok(1.0 / (cmd(x, y, cfg)? + cfg.eps))
}
