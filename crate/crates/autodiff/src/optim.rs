use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Anything that owns named parameters.
///
/// Names must be unique within a model; the optimizer and checkpoint code
/// key their state on them.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }
}

/// Maps parameter names to leaf vars on one tape.
///
/// Binding the same name twice returns the same var, so a module used on
/// several inputs in one step accumulates a single gradient.
pub struct ParamBinder<'t> {
    tape: &'t Tape,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t> ParamBinder<'t> {
    pub fn new(tape: &'t Tape) -> Self {
        Self {
            tape,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn bind(&self, name: &str, value: &Tensor) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let v = self.tape.leaf(value.clone());
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn get(&self, name: &str) -> Option<Var<'t>> {
        self.bound.borrow().get(name).copied()
    }

    /// Gradient for a bound name; `None` if it was never bound or the loss
    /// does not depend on it.
    pub fn grad<'g>(&self, grads: &'g Gradients, name: &str) -> Option<&'g Tensor> {
        self.get(name).and_then(|v| grads.wrt(v))
    }

    /// Collects gradients for every bound parameter that received one.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(k, v)| grads.wrt(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Tensor,
    pub second: Tensor,
}

/// AdamW hyperparameters plus per-parameter moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One decoupled-weight-decay Adam update over every parameter of
    /// `model` that has an entry in `grads`. Parameters without a gradient
    /// are left untouched.
    pub fn step(&mut self, model: &mut dyn Parameters, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(AutodiffError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, wd, b1, b2, eps) = (self.lr, self.weight_decay, self.beta1, self.beta2, self.eps);
        let moments = &mut self.moments;
        let mut err = None;
        model.visit_mut(&mut |name, param| {
            let Some(g) = grads.get(name) else { return };
            if g.shape() != param.shape() {
                err = Some(AutodiffError::Shape(format!(
                    "gradient for `{}` has shape {:?}, parameter has {:?}",
                    name,
                    g.shape(),
                    param.shape()
                )));
                return;
            }
            let m = moments.entry(name.to_string()).or_insert_with(|| Moments {
                first: Tensor::zeros(param.shape()),
                second: Tensor::zeros(param.shape()),
            });
            let p = param.data_mut();
            let m1 = m.first.data_mut();
            let m2 = m.second.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m1[i] = b1 * m1[i] + (1.0 - b1) * gi;
                m2[i] = b2 * m2[i] + (1.0 - b2) * gi * gi;
                let mhat = m1[i] / bc1;
                let vhat = m2[i] / bc2;
                p[i] -= lr * wd * p[i];
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// `target <- decay * target + (1 - decay) * source`, matched by name.
pub fn ema_update(target: &mut dyn Parameters, source: &dyn Parameters, decay: f64) -> Result<()> {
    let src: BTreeMap<String, Tensor> = source.named_params().into_iter().collect();
    let mut err = None;
    target.visit_mut(&mut |name, t| {
        let Some(s) = src.get(name) else {
            err = Some(AutodiffError::Shape(format!("ema source lacks parameter `{name}`")));
            return;
        };
        if s.shape() != t.shape() {
            err = Some(AutodiffError::Shape(format!(
                "ema shapes disagree for `{}`: {:?} vs {:?}",
                name,
                t.shape(),
                s.shape()
            )));
            return;
        }
        for (x, &y) in t.data_mut().iter_mut().zip(s.data()) {
            *x = decay * *x + (1.0 - decay) * y;
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
