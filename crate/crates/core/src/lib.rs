//! Percentile-sensitive maximum state-entropy exploration.
//!
//! Policies are pre-trained over a class of reward-free environments by
//! ascending the CVaR of per-batch k-NN state-entropy estimates, then
//! fine-tuned on sparse goal tasks with a trust-region optimizer.

pub mod cli;
pub mod config;
pub mod entropy;
pub mod env;
pub mod error;
pub mod finetune;
pub mod io;
pub mod knn;
pub mod policy;
pub mod pretrain;
pub mod risk;
pub mod seeding;
pub mod special;
pub mod theory;
pub mod trajectory;

pub use error::{Error, Result};
