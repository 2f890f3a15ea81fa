//! Black-box extraction of fully connected ReLU networks from raw-output queries.
//!
//! The attack works one hidden layer at a time: harvest critical points along random
//! lines, turn each into a partial signature (an affine solution space), cluster the
//! spaces into components, drop components that actually come from deeper layers,
//! fill missing entries with a targeted walk, then recover biases and signs. The
//! evaluation side measures how much of the network was recovered and where the
//! unrecovered weights come from.

pub mod completion;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod filter;
pub mod geometry;
pub mod merge;
pub mod network;
pub mod oracle;
pub mod pipeline;
pub mod search;
pub mod signature;

pub use error::{Error, Result};
pub use network::{ActivationPattern, Layer, NetworkModel, Prefix};
