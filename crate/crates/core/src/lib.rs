//! Nested sampling on an exploration tree: integration, LRPS back-ends,
//! agents, diagnostics and run management.

pub mod agents;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod hexfloat;
pub mod integrator;
pub mod linalg;
pub mod lrps;
pub mod priors;
pub mod problems;
pub mod region;
pub mod run;
pub mod special;
pub mod step;
pub mod termination;
pub mod tree;

pub use error::{NestError, Result};
pub use tree::{ExplorationTree, Node, NodeId, Reattach, TreeSource, TreeView, ROOT};

pub type NsRng = rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> NsRng {
    use rand::SeedableRng;
    NsRng::seed_from_u64(seed)
}
