//! Digital-twin engine for an analog optical deep-equilibrium classifier.
//!
//! The optical hardware evaluates a recurrence whose hidden state settles to a
//! fixed point; the only analog operation is the weight-matrix / tanh-state
//! product, everything else (input and output projections) stays digital. This
//! crate models that machine end to end:
//!
//! - [`deq`] — the recurrence, the fixed-point solver, ensemble inference and
//!   parameter accounting;
//! - [`cell`] — the pluggable impairment pipeline (`SimpleCell` is the ideal
//!   product, `AocCell` adds seven parameterized non-idealities plus 9-bit
//!   weight quantisation);
//! - [`train`] — cross-entropy loss, implicit differentiation through the
//!   fixed point, Adam, and the early-stopping training loop;
//! - [`baselines`] — logistic regression and two ReLU MLPs trained with the
//!   same optimizer;
//! - [`encode`] — the raw (quantile + Ising) and 127-bit binarised feature
//!   representations, plus group-key derivation;
//! - [`split`] — stratified splitting, majority downsampling and the
//!   leakage-free group split;
//! - [`eval`] — balanced accuracy, error-set overlap, McNemar's test,
//!   multi-seed aggregation, latency projections and wall-clock timing;
//! - [`checkpoint`] — the `OPTIDEQ v1` text checkpoint format;
//! - [`synth`] — deterministic synthetic task generators used by the test and
//!   experiment harnesses.

pub mod baselines;
pub mod cell;
pub mod checkpoint;
pub mod data;
pub mod deq;
pub mod encode;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod seeds;
pub mod split;
pub mod synth;
pub mod train;

pub use cell::{CellKind, CellSpec, FrozenCell, StageMagnitudes};
pub use data::LabeledDataset;
pub use deq::{DeqBlockParams, EnsembleModel, FixedPointResult, ModelConfig, ParameterCount};
pub use encode::{EncoderFit, EncodingMode, FeatureKind, FeatureSchema};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use split::SplitReport;
pub use train::{Classifier, TrainConfig, TrainHistory};
