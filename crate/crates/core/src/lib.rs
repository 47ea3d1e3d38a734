//! Federated learning simulation with one-shot client-side data generation.
//!
//! Clients hold label- or domain-skewed private data drawn from a synthetic
//! Gaussian-mixture task. Before training, each client may synthesize extra
//! samples under a budget plan; local training then runs on the merged data
//! with any of the supported federated algorithms.

pub mod algorithms;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod numerics;
pub mod orchestrator;
pub mod rng;

pub use error::{Error, Result};
