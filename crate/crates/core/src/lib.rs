//! Simulation of federated contrastive pre-training in which clients share
//! encoded features (never raw slices), use them as extra negatives and as
//! same-partition positives, and average their encoders each round.

mod codec;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod federation;
pub mod parallel;
pub mod seeding;
pub mod tensor_math;

pub use error::{FclError, Result};
