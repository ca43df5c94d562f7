//! Robust decentralized stochastic learning with Shapley-weighted
//! cross-gradient aggregation and momentum gossip.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: small classifiers, cross-entropy loss and gradients
//! - [`topology`]: graphs, Metropolis mixing matrices, spectral checks
//! - [`data`]: datasets, non-IID partitioning, attack injection
//! - [`shapley`]: coalition games, exact and Monte-Carlo Shapley values
//! - [`engine`]: the synchronous round loop and the two baselines
//! - [`diagnostics`]: learning-rate bound and exact recursion checks
//! - [`config`] and [`cli`]: experiment configuration and commands

pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod runner;
pub mod shapley;
pub mod topology;

pub use error::{Result, RossError};
