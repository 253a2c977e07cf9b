//! Off-policy evaluation for ranking policies under click-censored rewards.

pub mod analysis;
pub mod environment;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod models;
pub mod policy;
pub mod rng;
pub mod types;

pub use error::{Error, Result};
pub use policy::{MarginalConfig, PolicyKind, PolicyPair, PolicySpec, Scorer};
pub use rng::RngStream;
pub use types::{ActionId, ContextVector, LoggedDataset, LoggedRecord, Ranking};
