//! Deterministic simulator for federated lesion segmentation when clients
//! annotate only part of their lesions.
//!
//! The pipeline: synthetic volumes ([`synth`]) feed per-client local training
//! of a small convnet ([`model`]) coordinated by [`fed`]. [`fedia`] adds
//! completeness estimation, completeness-aware aggregation and adaptive
//! annotation correction on top of plain FedAvg. [`harness`] wires runs,
//! artifacts and comparison tables together.

pub mod ccl;
pub mod error;
pub mod fed;
pub mod fedia;
pub mod format;
pub mod grid;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synth;

pub use ccl::{count_components, label_components, ComponentMap, Connectivity};
pub use error::{Error, Result};
pub use fedia::{AcagMode, FedIAConfig, Method, RunOutcome, SimConfig, Simulation};
pub use grid::{Dims, Grid, Mask};
pub use model::{ModelConfig, ModelParams, OptimizerState, SegNet};
pub use synth::{DatasetKind, FederatedDataset, FederationSpec, LabeledVolume, VolumeSpec};
