//! Cross-modal correlation hashing at desk scale.
//!
//! Two small dense networks (one per modality) are trained jointly so that
//! the cosine similarity of their tanh embeddings tracks pairwise semantic
//! labels, while a cosine quantization term pushes embeddings toward the
//! hypercube vertices they will be binarized to. Retrieval then runs over
//! bit-packed sign codes with popcount Hamming scans.
//!
//! The crate is organized around that pipeline:
//!
//! - [`net`]: dense layers, forward/backward, SGD with momentum, model files
//! - [`losses`]: squared cosine correlation losses, cosine quantization loss,
//!   exact output residuals, and the finite-difference gradient oracle
//! - [`hashing`]: bit-packed codes, Hamming search, and the identity /
//!   quantization-bound checkers
//! - [`eval`]: MAP@R, precision-recall and precision@top-R curves
//! - [`data`]: synthetic bimodal datasets, similarity sets, dataset file I/O
//! - [`training`]: the joint optimization loop, ablation variants, encoding,
//!   and the (lambda, gamma) sweep
//!
//! Everything is `f64` and deterministic under explicit seeds; repeated runs
//! with the same configuration produce bit-identical parameters and files.

pub mod data;
pub mod error;
pub mod eval;
pub mod hashing;
pub mod losses;
pub mod matrix;
pub mod net;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
