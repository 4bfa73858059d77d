//! Few-shot synthetic-speech-detection engine over precomputed embeddings.
//!
//! The crate treats speech representations as opaque fixed-dimension vectors
//! and builds everything downstream of them: episodic prototypical networks
//! with self-attentive prototype aggregation, anomaly-detection and
//! linear-probe baselines, supervised adaptation with early stopping, and an
//! equal-error-rate evaluation protocol with multi-run aggregation under
//! controlled distribution shift.

pub mod baselines;
pub mod episodes;
pub mod error;
pub mod metrics;
pub mod numkernel;
pub mod protonet;
pub mod seeding;
pub mod trainer;

pub use error::{Error, Result};
