//! Lightweight single-channel EEG sleep staging.
//!
//! A five-layer 1-d grouped-convolution network with channel shuffle and
//! identity residual blocks, trained with a gradient-density reweighted
//! cross-entropy and personalized to new subjects by recomputing batch
//! normalization statistics on unlabeled data (AdaBN).
//!
//! Module map:
//!
//! * [`nn`] tensors, layer primitives (forward and backward), model assembly, checkpoints
//! * [`loss`] softmax cross-entropy, gradient-density histogram, reweighted loss
//! * [`train`] training loop, Adam, learning-rate schedules
//! * [`adapt`] online statistics and AdaBN
//! * [`complexity`] analytic parameter and FLOP accounting
//! * [`data`] EDF ingestion, hypnograms, the SEPB epoch container, synthetic data, subject splits
//! * [`metrics`] confusion matrix, accuracy, macro-F1, Cohen's kappa

pub mod adapt;
pub mod complexity;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod train;

pub use error::{Error, ErrorKind, Result};

/// Number of sleep stages scored (W, N1, N2, N3, REM).
pub const N_CLASSES: usize = 5;
/// Samples per 30 s epoch at 100 Hz.
pub const EPOCH_LEN: usize = 3000;
/// Required sampling rate in Hz.
pub const SAMPLE_RATE_HZ: f64 = 100.0;
