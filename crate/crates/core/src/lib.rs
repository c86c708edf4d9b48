//! Tabular autoregressive language models for EHR audit logs.

pub mod cli;
pub mod config;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod sessionize;
pub mod synth;
pub mod trainer;
pub mod vocab;
