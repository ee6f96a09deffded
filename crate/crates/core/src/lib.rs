//! Concept-level Shapley attribution for image classifiers.
//!
//! The pipeline ingests concept masks ([`concept`]), loads a classifier whose
//! last layer is a single linear map ([`model`]), distills it into a tiny
//! per-input surrogate that reuses that frozen linear layer ([`pie`]), and
//! estimates each concept's Shapley value ([`shapley`]). [`explainer`] turns
//! the values into a selected concept subset and a report, and [`curve_eval`]
//! scores a ranking with insertion/deletion AUC against the real model.

pub mod concept;
pub mod curve_eval;
pub mod error;
pub mod explainer;
pub mod masking;
pub mod model;
pub mod pie;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod shapley;

pub use error::{EacError, Result};
