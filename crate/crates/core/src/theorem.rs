//! Numeric check of the computation-tree embedding distance bound
//! `||phi(T_v1) - phi(T_v2)|| <= 2 B_x (C1 + sum_l C2^l D_l)`.
//!
//! With relu (1-Lipschitz), sum aggregation and identity update the
//! constants reduce to `C1 = B_W1` and `C2 = B_W2`, where each `B_W` is the
//! largest spectral norm of that weight over all layers.

use serde::Serialize;
use treevocab_autodiff::Tensor;

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::graph::Graph;

pub const POWER_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem1Report {
    pub lhs: f64,
    pub rhs: f64,
    pub c1: f64,
    pub c2: f64,
    pub b_x: f64,
    /// `d_l` for `l = 1..=L`.
    pub degrees: Vec<f64>,
    /// `D_l = d_l * ... * d_1`.
    pub degree_products: Vec<f64>,
    pub holds: bool,
}

/// Largest singular value by power iteration on `W^T W`.
pub fn spectral_norm(w: &Tensor, iterations: usize) -> Result<f64> {
    let wt = w.transpose()?;
    let n = w.cols();
    if n == 0 || w.rows() == 0 {
        return Ok(0.0);
    }
    let mut v = Tensor::new(vec![n, 1], vec![1.0 / (n as f64).sqrt(); n])?;
    let mut sigma = 0.0;
    for _ in 0..iterations {
        let wv = w.matmul(&v)?;
        sigma = wv.norm();
        let next = wt.matmul(&wv)?;
        let norm = next.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = next.scale(1.0 / norm);
    }
    Ok(sigma.max(w.matmul(&v)?.norm()))
}

/// Evaluates both sides of the bound for nodes `v1` and `v2`.
/// The encoder must have normalization disabled.
pub fn theorem1_check(encoder: &Encoder, graph: &Graph, v1: usize, v2: usize) -> Result<Theorem1Report> {
    if encoder.layers.iter().any(|l| l.norm.is_some()) {
        return Err(Error::Contract(
            "the bound covers encoders without normalization; disable batch_norm".into(),
        ));
    }
    let n = graph.num_nodes();
    if v1 >= n || v2 >= n {
        return Err(Error::Precondition(format!(
            "nodes ({v1}, {v2}) out of range for {n} nodes"
        )));
    }
    let z = encoder.encode(graph)?;
    let lhs = z
        .row(v1)
        .iter()
        .zip(z.row(v2))
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let mut c1: f64 = 0.0;
    let mut c2: f64 = 0.0;
    for layer in &encoder.layers {
        c1 = c1.max(spectral_norm(&layer.w1, POWER_ITERATIONS)?);
        c2 = c2.max(spectral_norm(&layer.w2, POWER_ITERATIONS)?);
    }
    let b_x = (0..n)
        .map(|v| graph.node_features().row(v).iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let d = graph.max_degree() as f64;
    let depth = encoder.layers.len();
    let degrees = vec![d; depth];
    let mut degree_products = Vec::with_capacity(depth);
    let mut acc = 1.0;
    for &dl in &degrees {
        acc *= dl;
        degree_products.push(acc);
    }
    let series: f64 = degree_products
        .iter()
        .enumerate()
        .map(|(i, &big_d)| c2.powi(i as i32 + 1) * big_d)
        .sum();
    let rhs = 2.0 * b_x * (c1 + series);
    Ok(Theorem1Report {
        lhs,
        rhs,
        c1,
        c2,
        b_x,
        degrees,
        degree_products,
        holds: lhs <= rhs,
    })
}
