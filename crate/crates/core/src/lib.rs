//! Control-flow attestation from basic-block execution traces.
//!
//! The pipeline: a benign trace is turned into a featured execution graph
//! ([`graph`]), a small variational graph autoencoder is trained on it
//! ([`gnn`]), and unseen executions are attested by the directed Hausdorff
//! distance between their node embeddings and the reference embeddings
//! ([`attest`]). [`attack`] synthesizes ROP/DOP traces and [`eval`] runs
//! detection experiments on synthetic workloads.

pub mod attack;
pub mod attest;
pub mod error;
pub mod eval;
pub mod gnn;
pub mod graph;
pub mod linalg;
pub mod trace_io;

pub use error::{Error, Result};
pub use graph::{build_graph, build_graph_with, ExecutionGraph, GraphOptions};
pub use trace_io::{Address, Trace, TraceFormat};
