//! Dual-batch-norm adversarial training: vanilla, AdvProp and Fast AdvProp,
//! with exact cost accounting and a corruption-robustness suite.

pub mod attack;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod leakage;
pub mod ledger;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod report;
pub mod rng;
pub mod run;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
