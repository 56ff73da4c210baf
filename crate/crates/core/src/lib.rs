//! Long-short generative memory for block-wise video diffusion.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, products, softmax, seeded draws, resampling.
//! - [`narrative`]: narrative scripts and prompt embeddings.
//! - [`sparse_cache`]: probe-scored KV compression and sparse attention.
//! - [`memory`]: the retrieval repository and KV fusion.
//! - [`model`]: a small dual-memory transformer denoiser with explicit
//!   backward passes.
//! - [`flow`]: rectified-flow noising, sampling and training losses.
//! - [`pipeline`]: block-wise generation and the training loop.
//! - [`nrdp`]: drift metrics over chunked quality series.
//!
//! Hot loops go through [`par`], which uses rayon when the `parallel`
//! feature is on and runs sequentially otherwise.

pub mod error;
pub mod flow;
pub mod memory;
pub mod model;
pub mod narrative;
pub mod nrdp;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod sparse_cache;

pub use error::{Error, Result};
