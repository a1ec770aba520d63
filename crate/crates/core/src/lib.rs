//! Multi-task learning with sample-level weighting.
//!
//! SLGrad weights every `(task, sample)` loss term by how well its gradient
//! aligns with the gradient of the main task's validation loss, clamps
//! negative alignments to zero and normalizes the rest. This crate contains
//! the network and per-sample backprop it relies on, seven task-level
//! baselines behind the same interface, synthetic noisy datasets, and a
//! training harness with diagnostics.

pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod weighting;

pub use data::{Dataset, Split, TaskBatch};
pub use error::{Error, Result};
pub use harness::{train, RunRecord, TrainConfig};
pub use model::{Architecture, MtlNetwork, ParamVector, SampleGradients};
pub use objectives::{LossKind, MetaObjective};
pub use tensor::{Matrix, Rng, Vector};
pub use weighting::{Algorithm, SampleWeightMatrix, Weighter, WeighterConfig};
