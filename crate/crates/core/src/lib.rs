//! Tangent-space gradient optimization (TSGO) for matrix-product-state Born
//! machines, with an Adam baseline for comparison.
//!
//! The state `|psi>` is an open-boundary MPS over qubit-embedded features.
//! Probabilities follow the Born rule `P(X) = <X|psi>^2 / <psi|psi>`, the loss
//! is the negative log-likelihood, and TSGO updates the orthogonality center
//! by rotating it a fixed angle towards the (tangent) gradient direction.

pub mod data;
pub mod error;
pub mod feature_map;
pub mod linalg;
pub mod loss;
pub mod mps;
pub mod optim;
pub mod train;

pub use data::{Dataset, GrayImages, ImageSet};
pub use error::{Error, Result};
pub use feature_map::{embed_feature, embed_sample, EmbeddedSample};
pub use linalg::{contract, qr_split, svd_split, DenseTensor, SvdSplit};
pub use loss::{center_gradient, full_gradient, nll, GradientTensor};
pub use mps::{LogAmplitude, Mps, Sampler};
pub use optim::{tsgo_step, AdamConfig, StepDirection, TsgoState};
pub use train::{run_length_scan, sweep_tsgo, train, OptimizerKind, TraceLog, TrainConfig};
