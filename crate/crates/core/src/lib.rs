//! Federated post-deployment adaptation.
//!
//! A model pre-trained across several source nodes is deployed to a target
//! domain that has only a handful of labelled samples. The target then
//! keeps adapting with help from the sources, which never reveal their data:
//! each source ships the average of its local gradients, and the target
//! aligns its own updates with them.
//!
//! Modules, bottom-up:
//!
//! - [`numerics`]: flat parameter and gradient vectors, a small dense matrix,
//!   seeded random streams.
//! - [`model`]: an MLP with one batch-norm layer, and a linear least-squares
//!   model with a closed-form Hessian.
//! - [`data`]: labelled domains, a synthetic multi-domain benchmark,
//!   stratified splits, CSV input and output.
//! - [`algorithms`]: SGD, fine-tuning, supervised TENT, gradient surgery,
//!   centralized source-target alignment and its second-order oracle.
//! - [`federation`]: wire protocol, transports and the distributed rounds.
//! - [`harness`]: experiments, checkpoints, summaries and the CLI.
//!
//! The `examples/` directory has one runnable program per capability; start
//! with `cargo run --release --example distributed_staralign`.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
