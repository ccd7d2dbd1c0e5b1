//! Tool-creating Earth-observation workflow engine.
//!
//! A natural-language task is grounded by probing its input data, planned as
//! several candidate plans that are merged and ranked, compiled into a DAG of
//! script nodes, and executed node by node. Every node runs a
//! synthesize / execute / check / revise loop until its outputs pass the
//! deterministic rule engine in [`validation`].
//!
//! The [`bench`] module scores the engine on stage-wise and end-to-end cases,
//! and [`corpus`] writes a small offline case corpus with scripted fixtures.

pub mod bench;
pub mod cli;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod executor;
pub mod llm;
pub mod manifest;
pub mod model;
pub mod planner;
pub mod probe;
pub mod retrieval;
pub mod sandbox;
pub mod validation;

pub use error::{Error, Result};
