//! Adaptive batch-size mini-batch SGD driven by gradient diversity.
//!
//! The crate is organised bottom-up:
//!
//! * [`data`] generates the synthetic binary-classification problem and reads
//!   and writes tabular datasets.
//! * [`models`] holds the three differentiable models (logistic regression, a
//!   two-layer MLP and a quadratic used by the diagnostics) with exact
//!   per-sample gradients.
//! * [`optim`] is the epoch-structured SGD engine together with the
//!   gradient-diversity estimator and the batch-size schedulers
//!   (fixed, AdaBatch, DiveBatch and the exact-diversity oracle).
//! * [`diagnostics`] checks gradients against finite differences and verifies
//!   the distance-reduction lemma and the SGD convergence bounds by Monte Carlo
//!   on a quadratic whose constants are known in closed form.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The `*64`
//! and `*32` aliases below name the usual instantiations.

pub mod data;
pub mod diagnostics;
pub mod models;
pub mod optim;
pub mod rng;
mod scalar;

pub use scalar::Scalar;

pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;

pub type LogisticModel64 = models::LogisticModel<f64>;
pub type LogisticModel32 = models::LogisticModel<f32>;
pub type MlpModel64 = models::MlpModel<f64>;
pub type MlpModel32 = models::MlpModel<f32>;
pub type QuadraticModel64 = models::QuadraticModel<f64>;
pub type QuadraticModel32 = models::QuadraticModel<f32>;
pub type AnyModel64 = models::AnyModel<f64>;
pub type AnyModel32 = models::AnyModel<f32>;

pub type GradStats64 = models::GradStats<f64>;
pub type DiversityAccumulator64 = optim::DiversityAccumulator<f64>;
