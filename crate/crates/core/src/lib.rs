//! Core library of the intermediate-level transfer-attack workbench.
//!
//! Everything numeric is generic over the scalar type via [`Scalar`]
//! (`f32` by default, `f64` for gradient verification). The crate is
//! organized as:
//!
//! * [`engine`] — dense tensors, a reverse-mode autodiff tape, the CNN
//!   primitives (conv, batchnorm, pooling, dense, softmax cross-entropy),
//!   SGD and a finite-difference gradient checker.
//! * [`models`] — small CNN architectures with named intermediate
//!   endpoints, plus binary model persistence.
//! * [`data`] — CIFAR-10 binary ingestion, a synthetic stand-in dataset
//!   and seeded batching.
//! * [`attacks`] — FGSM / I-FGSM / MI-FGSM baselines, the multi-fool
//!   ensemble attack and best-transfer-direction extraction.
//! * [`ila`] — ILAP/ILAF losses, the intermediate-level fine-tuning
//!   attack, disturbance curves and latest-peak layer selection.

pub mod attacks;
pub mod data;
pub mod engine;
pub mod ila;
pub mod models;
pub mod scalar;

pub use scalar::Scalar;

/// Default precision used by the training / attack pipeline.
pub type Tensor32 = engine::Tensor<f32>;
/// Verification precision used by the gradient checker.
pub type Tensor64 = engine::Tensor<f64>;
pub type Model32 = models::ModelHandle<f32>;
pub type Model64 = models::ModelHandle<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;
