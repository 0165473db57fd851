//! Synthesis and evaluation toolkit for six-axis IMU activity time series.
//!
//! The library turns raw inertial recordings into fixed-size training windows,
//! lifts them into a compact short-time Fourier representation, learns a
//! denoising diffusion model over that representation, and measures what the
//! generated sequences are worth by augmenting a CNN activity classifier under
//! leave-one-subject-out cross-validation.
//!
//! The main stages, in pipeline order:
//!
//! * [`ingest`] — recording parsing, sliding-window segmentation, per-axis
//!   standardization, fold construction.
//! * [`spectral`] — the 12x12x80 spectrogram transform and its exact inverse.
//! * [`diffusion`] — per-sensor-group noise schedules, forward noising and
//!   ancestral sampling.
//! * [`network`] — the UNet noise predictor with hand-derived reverse-mode
//!   gradients.
//! * [`train`] — smooth-L1 / Adam optimization loops for the diffusion model
//!   and the classifier.
//! * [`classify`] — the activity CNN and classification metrics.
//! * [`evaluate`] — DTW/DBA clustering, the LOSOCV harness and the synthetic
//!   data sweep.
//! * [`pipeline`] — on-disk experiment orchestration behind the CLI.

pub mod artifact;
pub mod classify;
pub mod diffusion;
pub mod error;
pub mod evaluate;
pub mod ingest;
pub mod network;
pub mod pipeline;
pub mod rng;
pub mod spectral;
pub mod toy;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use types::{Activity, AxisStats, FoldSpec, RawRecording, Window};

/// Toolkit version embedded in every persisted artifact.
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
