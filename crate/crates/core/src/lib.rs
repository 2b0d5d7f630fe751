//! Cross-domain action-instance mixing and mean-teacher self-training for
//! box-level action classification, with a deterministic synthetic benchmark.

pub mod cli;
pub mod clipstore;
pub mod config;
pub mod evaluator;
pub mod geometry;
pub mod mixer;
pub mod model;
pub mod propagator;
pub mod rng;
pub mod synthgen;
pub mod trainer;
