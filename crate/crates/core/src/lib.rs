//! Graph encoders, a tree-token vocabulary, pre-training, fine-tuning and
//! transferability measurements on small graphs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod gcn;
pub mod graph;
pub mod nn;
pub mod pretrain;
pub mod report;
pub mod rng;
pub mod sampling;
pub mod synthetic;
pub mod theorem;
pub mod transfer;
pub mod vocab;

pub use error::{Error, Result};
pub use graph::Graph;
