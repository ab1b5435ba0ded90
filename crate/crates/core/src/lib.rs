//! Semi-supervised log anomaly detection with a masked dual network.
//!
//! Pipeline: raw log lines are parsed into event templates ([`corpus`]),
//! grouped into event sequences ([`sequencer`]), embedded ([`embedder`]),
//! masked ([`masking`]) and fed to a teacher/student network ([`model`])
//! trained on normal data only ([`trainer`]). Scores are evaluated with
//! threshold-free and oracle-threshold metrics ([`evaluation`]). Trained
//! state is saved by [`checkpoint`]; [`synthbench`] generates a synthetic
//! corpus with one dominant event for benchmarking and ablations.

pub mod checkpoint;
pub mod corpus;
pub mod embedder;
pub mod error;
pub mod evaluation;
pub mod masking;
pub mod model;
pub mod sequencer;
pub mod synthbench;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
