//! Dense tensor kernels: products, softmax, cosine similarity, seeded
//! Gaussian draws, temporal resampling, and the binary tensor format.
//!
//! Arithmetic is `f64` throughout; files store `f32`.

pub mod io;
mod ops;
mod rng;
mod tensor;

pub use ops::{
    clip_dims, cosine, dot, matmul, matmul_nt, matmul_tn, resample_temporal, softmax_in_place,
    softmax_rows, AttentionMask,
};
pub use rng::{gaussian, Rng};
pub use tensor::Tensor;
