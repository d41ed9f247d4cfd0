//! Merging and compression of fine-tuned checkpoints through the singular
//! value decompositions of per-layer task matrices.
//!
//! * [`tensor`]: safetensors I/O, task deltas, layer classification
//! * [`linalg`]: SVD, truncation, Procrustes, eigen-whitening, running means
//! * [`interference`]: concatenated bases and the singular task interference score
//! * [`compress`]: per-task low-rank compression and storage accounting
//! * [`merge`]: TSV-Merge and its ablation grid
//! * [`validation`]: numerical checks of the orthogonalization error bounds

pub mod compress;
pub mod error;
pub mod interference;
pub mod linalg;
pub mod merge;
pub mod rank;
pub mod tensor;
pub mod validation;

pub use error::{Error, Result};
pub use rank::RankPolicy;
