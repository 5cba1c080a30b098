//! Action-chunking policies under inference delay: toy environments,
//! offset-augmented training data, flow-matching chunk policies, and a
//! tick-level runtime comparing synchronous and asynchronous execution.

pub mod bench;
pub mod data;
pub mod envs;
pub mod error;
pub mod policy;
pub mod runtime;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
