//! Resource-efficient discrete classifiers under bit and operation budgets.
//!
//! The crate trains two model families end to end and accounts for their
//! inference cost:
//!
//! - Bayesian-network classifiers (naïve Bayes and tree-augmented variants)
//!   over discretized features, with quantization-aware training of the
//!   log-probability tables and size-aware differentiable structure learning.
//! - Small feed-forward / convolutional networks with manually implemented
//!   forward and backward passes, quantized weights, and binary activations.
//!
//! Supporting pieces: entropy-based discretization with an MDL stopping rule
//! (`data`), bit/op accounting and budget-matched architecture sizing
//! (`budget`), and Pareto-front extraction over (bits, ops, error) trade-offs
//! (`pareto`).
//!
//! All training is deterministic given a seed; random state is threaded
//! explicitly through every sampler.

pub mod budget;
pub mod data;
pub mod dnn;
pub mod error;
pub mod math;
pub mod model;
pub mod pareto;
pub mod quant;
pub mod structure;
pub mod train;

pub use budget::{BudgetReport, BudgetTarget};
pub use data::{DiscreteDataset, Discretizer, RawDataset};
pub use dnn::{DnnModel, LayerSpec, TensorShape};
pub use error::{Error, Result};
pub use model::{AffineMap, BncModel, Cpt, TanStructure};
pub use pareto::{pareto_front, Objective, ParetoPoint};
pub use quant::{BnQuantConfig, DnnQuantConfig};
pub use structure::{LearnedStructure, SizePenaltyConfig, StructureDistribution, StructureOutcome};
pub use train::{HybridConfig, OptimizerConfig, TrainHistory};
