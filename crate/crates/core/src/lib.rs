//! Hierarchical token-level objective control for policy optimization,
//! exercised on a tabular softmax policy over synthetic verifiable tasks.

pub mod analysis;
pub mod audit;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod grouping;
pub mod metrics;
pub mod objectives;
pub mod policy;
pub mod rollout;
pub mod seeding;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
