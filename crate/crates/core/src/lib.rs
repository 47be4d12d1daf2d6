//! Reconstruction engine for mask-based lensless cameras.
//!
//! The forward model is `b = C H x` per color plane: circular convolution with
//! a calibrated PSF on a grid twice the sensor size, followed by a central
//! crop. On top of it sit a classic ADMM solver with a TV prior, the unrolled
//! trainable networks (learned per-layer penalties, and a variant with a small
//! learned regularizer), their reverse-mode gradients, and a training and
//! evaluation harness.

pub mod admm;
pub mod error;
pub mod forward;
pub mod grid;
pub mod io;
pub mod training;
pub mod unrolled;

pub use admm::{admm_solve, admm_step, AdmmParams, PrecomputedOperators, ResidualTrace, Shrinkage};
pub use error::{Error, Result};
pub use forward::{forward_measure, normalize_psf, ColorImage, Measurement, NoiseModel, Psf, Scene};
pub use grid::{Dims, RealGrid};
pub use training::{
    adam_step, evaluate_testset, generate_synthetic_dataset, loss_eval, metrics, train, AdamState, Dataset,
    DatasetPair, LossSchedule, MetricsReport, TrainConfig,
};
pub use unrolled::{
    gradient_check, leadmm_backward, leadmm_forward, leadmm_star_forward, LeAdmmTheta, LearnedTransform, Tape,
    ThetaGradients, UnrolledModel, Variant,
};
