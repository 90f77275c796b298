//! Maximum inner product search on proximity graphs.
//!
//! The crate is organised bottom-up:
//!
//! - [`vecstore`]: dense vector datasets, normalization, the exact top-k oracle
//!   and ground-truth tables.
//! - [`proxgraph`]: ip-NSW, IPDG and Mobius graph construction plus the greedy
//!   search used while building.
//! - [`search`]: budgeted beam search and training-path collection.
//! - [`agent`]: the graph-convolutional vertex encoder and softmax routing policy.
//! - [`training`]: shaped rewards, self-critic returns and the REINFORCE loop.
//! - [`eval`]: recall metrics, ground-truth generation and experiment runs.
//!
//! Inner products are the unit of cost everywhere: searches are budgeted in
//! inner-product computations (IPC), not wall-clock time.

pub mod agent;
pub mod error;
pub mod eval;
mod io;
pub mod proxgraph;
pub mod search;
pub mod training;
pub mod vecstore;

pub use error::{Error, Result};
