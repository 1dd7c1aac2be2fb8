//! Dissected softmax (D-Softmax) losses and the tooling around them.
//!
//! The crate splits the softmax cross-entropy into an intra-class term with a fixed
//! termination target and an inter-class term that no longer depends on the positive
//! activation. Around that core it provides:
//!
//! * [`losses`]: forward values and analytic gradients for Softmax, SphereFace,
//!   CosFace, ArcFace, D-Softmax and the hybrid objectives;
//! * [`analysis`]: termination points, loss-curve traces and class-weight
//!   cosine statistics;
//! * [`sampling`]: the sampled negative-class and batch-row sets;
//! * [`param_server`]: a sharded, versioned class-weight store with a socket front end;
//! * [`trainer`]: a synthetic embedding-learning loop used to compare losses;
//! * [`bench`]: loss-layer timing.

pub mod analysis;
pub mod bench;
pub mod config;
pub mod error;
pub mod io;
pub mod losses;
pub mod math;
pub mod param_server;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{ActivationBatch, InterSelection, LossConfig, LossKind, LossOutput};
pub use math::{Matrix, RngState};
pub use sampling::{SampleSet, SamplerKind};
