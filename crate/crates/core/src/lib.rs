//! Tool-wear modelling from cutting-force measurements.
//!
//! Pipeline: Sobol experimental design, change-in-mean segmentation of raw
//! force traces, a hierarchical linear model whose wear-rate slopes share a
//! Gaussian-process prior over (cutting speed, feed rate), NUTS sampling,
//! split-R̂ diagnostics, and posterior-predictive response surfaces.
//!
//! Chains, grid nodes and per-parameter summaries run on rayon when the
//! `parallel` feature is on; [`Execution::Sequential`] gives the same results
//! on one thread.

pub mod config;
pub mod data;
pub mod design;
pub mod diagnostics;
pub mod exec;
pub mod io;
pub mod kernel;
pub mod model;
pub mod pipeline;
pub mod predict;
pub mod sampler;
pub mod segmentation;
pub mod simulate;

pub use data::{Channel, ControlPoint, ExperimentRecord, ExperimentSeries, ForceChannel};
pub use exec::Execution;
