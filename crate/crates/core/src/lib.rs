//! Learning high-dimensional energy-market bids for a storage unit.
//!
//! A neural supply function is trained with PPO, retrained to be monotone
//! and discrete, converted into 10-pair price-quantity bids and evaluated
//! against baseline bid formats and a hindsight-optimal dispatch.

pub mod data;
pub mod env;
pub mod error;
pub mod ess;
pub mod evaluate;
pub mod extraction;
pub mod features;
pub mod market;
pub mod nn;
pub mod oracle;
pub mod policy;
pub mod ppo;
pub mod quantizer;

pub use error::{Error, Result};
