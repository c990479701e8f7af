//! Change captioning for bi-temporal feature grids.
//!
//! The crate pairs a self-contained f64 autodiff engine with the full
//! model stack: differential cross-temporal attention ([`bdam`]),
//! hierarchical changed/unchanged routing with a group-constrained
//! mixture of experts ([`hasd`]), a one-layer Transformer caption decoder
//! ([`decoder`]), a curriculum training loop ([`training`]), caption
//! metrics ([`metrics`]) and a deterministic synthetic dataset ([`data`]).
//!
//! The companion guide under `book/` walks through each of these with
//! runnable snippets; [`guide`] re-includes every chapter as module docs
//! so `cargo test` runs the book's code blocks as doc-tests.

pub mod bdam;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod hasd;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;
pub mod viz;

pub use error::{HisemError, Result};

/// The `book/` chapters, included verbatim so their snippets compile
/// and run under `cargo test --doc`.
pub mod guide {
    #[doc = include_str!("../../../book/src/overview.md")]
    pub mod overview {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    pub mod tensors {}
    #[doc = include_str!("../../../book/src/attention.md")]
    pub mod attention {}
    #[doc = include_str!("../../../book/src/routing.md")]
    pub mod routing {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    pub mod decoding {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
