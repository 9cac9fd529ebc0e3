//! Token-level semantic subspace alignment for anomaly detection.
//!
//! Patch tokens are matched to learned per-class semantic subspaces with
//! entropic optimal transport, the plan is sparsified into per-token
//! assignments, and the resulting dynamic logits are fused with a shared
//! base alignment. Everything is generic over `f32`/`f64` through
//! [`scalar::Scalar`]; the aliases below fix the common double-precision case.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod grad;
pub mod io;
pub mod loss;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod ot;
pub mod pipeline;
pub mod scalar;
pub mod train;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Real = f64;
pub type MatrixF64 = matrix::Matrix<f64>;
pub type CostMatrixF64 = ot::CostMatrix<f64>;
pub type MarginalsF64 = ot::Marginals<f64>;
pub type TransportPlanF64 = ot::TransportPlan<f64>;
pub type SinkhornConfigF64 = ot::SinkhornConfig<f64>;
pub type AssignmentMatrixF64 = alignment::AssignmentMatrix<f64>;
pub type AnomalyMapF64 = alignment::AnomalyMap<f64>;
pub type TokenGridF64 = data::TokenGrid<f64>;
pub type LabeledSampleF64 = data::LabeledSample<f64>;
pub type DatasetF64 = data::Dataset<f64>;
pub type SubspaceModelF64 = model::SubspaceModel<f64>;
pub type GradientSetF64 = grad::GradientSet<f64>;
pub type LossBreakdownF64 = loss::LossBreakdown<f64>;
pub type ScoredSetF64 = metrics::ScoredSet<f64>;
pub type SubspaceModelF32 = model::SubspaceModel<f32>;
pub type TransportPlanF32 = ot::TransportPlan<f32>;
