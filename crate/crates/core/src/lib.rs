//! Hexagonal predator-prey arena with a reactive pursuit predator, replay-based
//! ensemble Q-learning (standard and variance-penalized targets, threat-weighted
//! replay, surprise-minimizing intrinsic reward), behavioral trajectory metrics
//! and a chat-model driven prey harness.
//!
//! Data-parallel loops (visibility tables, evaluation rollouts, per-trajectory
//! metrics, multi-seed training) go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and runs sequentially otherwise.

pub mod agents;
pub mod commands;
pub mod env;
pub mod error;
pub mod exec;
pub mod hexgrid;
pub mod llm;
pub mod metrics;
pub mod replay;
pub mod scripted;
pub mod training;
pub mod trajio;

pub use error::{Error, Result};
