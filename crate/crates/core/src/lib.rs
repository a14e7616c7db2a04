//! Two-stage training (TST) and variational two-stage training (V-TST) for
//! neural-network classifiers, plus the calibration, shift and OOD metrics
//! used to evaluate them.
//!
//! The numerical core is generic over the floating-point scalar through
//! [`Scalar`]. Everything defaults to `f64`; the aliases below name the
//! concrete instantiations.
//!
//! Module map:
//!
//! - [`tensor`]: dense row-major tensors and a define-by-run gradient tape.
//! - [`nn`]: layers, the beta/theta/nu parameter split, freezing, checkpoints.
//! - [`variational`]: Gaussian latent head, reparameterized sampling, KL, MC predictive.
//! - [`train`]: losses, Adam, early stopping, the training stages, temperature scaling.
//! - [`metrics`]: accuracy, NLL, ECE/MCE, entropy, AUROC, FPR95.
//! - [`data`]: synthetic datasets, splits, rotations, IDX ingestion.

pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod rng;
mod scalar;
pub mod tensor;
pub mod train;
pub mod variational;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use data::{Dataset, DatasetKind, ShiftSpec, SplitSpec};
pub use metrics::{EvalReport, OodReport, Prediction, ReliabilityBins};
pub use nn::{Checkpoint, ExtractorSpec, HeadKind, Model, ModelSpec, StageTag};
pub use tensor::{Gradients, Tape, Tensor, Var};
pub use train::{LossMode, TemperatureScale, TrainConfig, TrainOutcome};
pub use variational::{GaussianPosterior, LatentSample, PredictConfig};

pub type TensorF64 = Tensor<f64>;
pub type TensorF32 = Tensor<f32>;
pub type TapeF64 = Tape<f64>;
pub type TapeF32 = Tape<f32>;
pub type ModelF64 = Model<f64>;
pub type ModelF32 = Model<f32>;
pub type CheckpointF64 = Checkpoint<f64>;
pub type CheckpointF32 = Checkpoint<f32>;
