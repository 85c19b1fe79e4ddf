//! Flat vector arithmetic, a small dense matrix, and the seeded RNG.

mod matrix;
mod rng;
mod vector;

pub use matrix::Matrix;
pub use rng::{sample_gaussian, Rng};
pub use vector::{axpy, cosine_similarity, dot, dot_slices, mean_vectors, GradientVector, ParamVector};
pub(crate) use vector::mean_slices;
