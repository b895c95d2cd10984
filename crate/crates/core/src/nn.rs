//! Small neural building blocks shared by the encoders, decoders and heads.

use std::collections::BTreeMap;

use rand::Rng as _;
use treevocab_autodiff::{ParamBinder, Parameters, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Where a module's weights come from on a tape: trainable leaves bound by
/// name, or constants that never receive gradient.
#[derive(Clone, Copy)]
pub enum ParamSource<'a, 't> {
    Train(&'a ParamBinder<'t>),
    Frozen(&'t Tape),
}

impl<'a, 't> ParamSource<'a, 't> {
    pub fn var(&self, name: &str, value: &Tensor) -> Var<'t> {
        match self {
            ParamSource::Train(b) => b.bind(name, value),
            ParamSource::Frozen(t) => t.constant(value.clone()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        match self {
            ParamSource::Train(b) => b.tape(),
            ParamSource::Frozen(t) => t,
        }
    }
}

/// Whether normalization uses batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Glorot-uniform `[rows, cols]` matrix.
pub fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

/// Two-layer perceptron `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    pub fn new(prefix: &str, d_in: usize, d_hidden: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self {
            prefix: prefix.to_string(),
            w1: glorot(d_in, d_hidden, rng),
            b1: Tensor::zeros(&[d_hidden]),
            w2: glorot(d_hidden, d_out, rng),
            b2: Tensor::zeros(&[d_out]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn forward<'t>(&self, src: &ParamSource<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let p = &self.prefix;
        let h = x
            .matmul(src.var(&format!("{p}.w1"), &self.w1))?
            .add_row(src.var(&format!("{p}.b1"), &self.b1))?
            .relu();
        Ok(h.matmul(src.var(&format!("{p}.w2"), &self.w2))?
            .add_row(src.var(&format!("{p}.b2"), &self.b2))?)
    }
}

impl Parameters for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        let p = &self.prefix;
        f(&format!("{p}.w1"), &self.w1);
        f(&format!("{p}.b1"), &self.b1);
        f(&format!("{p}.w2"), &self.w2);
        f(&format!("{p}.b2"), &self.b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let p = self.prefix.clone();
        f(&format!("{p}.w1"), &mut self.w1);
        f(&format!("{p}.b1"), &mut self.b1);
        f(&format!("{p}.w2"), &mut self.w2);
        f(&format!("{p}.b2"), &mut self.b2);
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over rows with learnable scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub prefix: String,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

/// Batch statistics observed by one training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl BatchNorm {
    pub fn new(prefix: &str, d: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
            running_mean: Tensor::zeros(&[d]),
            running_var: Tensor::ones(&[d]),
        }
    }

    pub fn forward<'t>(
        &self,
        src: &ParamSource<'_, 't>,
        x: Var<'t>,
        mode: Mode,
    ) -> Result<(Var<'t>, Option<NormStats>)> {
        let m = x.shape()[0];
        let p = &self.prefix;
        let gamma = src.var(&format!("{p}.gamma"), &self.gamma);
        let beta = src.var(&format!("{p}.beta"), &self.beta);
        let (normed, stats) = match mode {
            Mode::Train => {
                if m == 0 {
                    return Err(Error::Precondition("batch norm over an empty batch".into()));
                }
                let mean = x.mean_axis(0)?;
                let centered = x.sub(mean.broadcast_rows(m)?)?;
                let var = centered.mul(centered)?.mean_axis(0)?;
                let inv_std = var.add_scalar(BN_EPS).powf(-0.5)?;
                let stats = NormStats {
                    mean: mean.value().reshape(&[x.shape()[1]])?,
                    var: var.value().reshape(&[x.shape()[1]])?,
                };
                (centered.mul(inv_std.broadcast_rows(m)?)?, Some(stats))
            }
            Mode::Eval => {
                let tape = src.tape();
                let mean = tape.constant(self.running_mean.clone());
                let inv_std = tape.constant(self.running_var.map(|v| 1.0 / (v + BN_EPS).sqrt()));
                (x.sub(mean.broadcast_rows(m)?)?.mul_row(inv_std)?, None)
            }
        };
        Ok((normed.mul_row(gamma)?.add_row(beta)?, stats))
    }

    pub fn update_running(&mut self, stats: &NormStats) {
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(stats.mean.data()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(stats.var.data()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

impl Parameters for BatchNorm {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.gamma", self.prefix), &self.gamma);
        f(&format!("{}.beta", self.prefix), &self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let p = self.prefix.clone();
        f(&format!("{p}.gamma"), &mut self.gamma);
        f(&format!("{p}.beta"), &mut self.beta);
    }
}

/// Every tensor a module persists: trainable parameters plus buffers such
/// as running statistics.
pub trait Stateful: Parameters {
    fn visit_buffers(&self, _f: &mut dyn FnMut(&str, &Tensor)) {}
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&str, &mut Tensor)) {}

    fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit(&mut |n, t| {
            out.insert(n.to_string(), t.clone());
        });
        self.visit_buffers(&mut |n, t| {
            out.insert(n.to_string(), t.clone());
        });
        out
    }

    /// Overwrites every tensor from `state`; names and shapes must match.
    fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut err = None;
        let mut apply = |name: &str, t: &mut Tensor| {
            if err.is_some() {
                return;
            }
            match state.get(name) {
                None => err = Some(Error::CorruptCheckpoint(format!("missing tensor `{name}`"))),
                Some(s) if s.shape() != t.shape() => {
                    err = Some(Error::CheckpointShape {
                        name: name.to_string(),
                        stored: s.shape().to_vec(),
                        expected: t.shape().to_vec(),
                    })
                }
                Some(s) => *t = s.clone(),
            }
        };
        self.visit_mut(&mut apply);
        self.visit_buffers_mut(&mut apply);
        err.map_or(Ok(()), Err)
    }
}

impl Stateful for Mlp {}

impl Stateful for BatchNorm {
    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.running_mean", self.prefix), &self.running_mean);
        f(&format!("{}.running_var", self.prefix), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let p = self.prefix.clone();
        f(&format!("{p}.running_mean"), &mut self.running_mean);
        f(&format!("{p}.running_var"), &mut self.running_var);
    }
}
