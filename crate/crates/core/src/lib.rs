//! Cross-modal information routing for two-modality token sequences.
//!
//! Low-informativeness channels of each modality are found from the singular
//! structure of its flattened tokens and receive a gated blend of the
//! counterpart modality's values before the tokens are fused by an attention
//! decoder. The crate also carries the metrics, synthetic task generator and
//! experiment harness used to measure how routing shifts modality dominance.

pub mod config;
pub mod decoder;
pub mod error;
pub mod experiments;
pub mod informativeness;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod router;
pub mod synth;
pub mod tokens;

pub use error::{MoirError, Result};
pub use tokens::{Modality, TokenSequence};
