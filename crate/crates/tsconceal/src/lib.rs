//! Concealed adversarial attacks on time-series classifiers.
//!
//! The crate trains a small classifier on a univariate time-series task,
//! trains a discriminator to spot perturbed inputs, then runs attacks whose
//! objective mixes fooling the classifier with staying invisible to the
//! discriminator. `runner` ties the stages into reproducible experiments.

pub mod aggregation;
pub mod attacks;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Bindings, Evaluation, Graph, GraphBuilder, NodeId};
pub use tensor::Tensor;
