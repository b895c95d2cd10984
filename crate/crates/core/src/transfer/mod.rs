//! Graph similarity kernels, distribution discrepancy and the synthetic
//! transferability experiment.

pub mod cmd;
pub mod experiment;
pub mod graphlet;
pub mod stats;
pub mod wl;

pub use cmd::{cmd, transferability, CmdConfig, Interval};
pub use experiment::{run_synthetic_transfer, summarize, TransferConfig, TransferRecord, TransferSummary};
pub use graphlet::{graphlet_frequencies, graphlet_similarity, GraphletCatalog, GraphletConfig};
pub use stats::spearman;
pub use wl::{wl_subtree_similarity, WlConfig};
