//! Core library for joint detection + masked-reconstruction training.
//!
//! The crate is generic over the floating scalar via [`scalar::Scalar`];
//! `f32` is the working type for training speed and `f64` backs the
//! finite-difference gradient checks. Concrete aliases for the common
//! types live at the crate root.

pub mod checkpoint;
pub mod coco;
pub mod detect;
pub mod encoder;
pub mod error;
pub mod image;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod recon;
pub mod render;
pub mod scalar;
pub mod synth;
pub mod texture;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working-precision image (training path).
pub type ImageBufferF32 = image::ImageBuffer<f32>;
/// Double-precision image (gradient-check path).
pub type ImageBufferF64 = image::ImageBuffer<f64>;
/// Working-precision model bundle.
pub type SsadModelF32 = trainer::SsadModel<f32>;
/// Double-precision model bundle (gradient checks).
pub type SsadModelF64 = trainer::SsadModel<f64>;
/// Working-precision dataset.
pub type DatasetF32 = trainer::Dataset<f32>;
/// Working-precision trainer.
pub type TrainerF32 = trainer::Trainer<f32>;
/// Working-precision inference model.
pub type InferenceModelF32 = trainer::InferenceModel<f32>;
