//! Test-time adaptation by causal trimming.
//!
//! Representations are trimmed along the principal directions of variation
//! across augmentations of a single test input, class prototypes are trimmed
//! the same way and averaged over the stream, and predictions use the
//! trimmed representation against the running prototypes.

pub mod adapt;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scm;
pub mod session;
pub mod theory;
pub mod trim;

pub use error::{Error, Result};
pub use harness::{ablate, run_adaptation, run_with_model, sweep, Grid, RunConfig, RunMode, RunReport};
pub use linalg::Matrix;
pub use model::{Activation, Model, TrainConfig};
pub use rng::Prng;
pub use scm::{Domain, LabeledSample, Observation, Scm, ScmConfig};
pub use session::{Ablation, Prediction, TactConfig, TactSession};
