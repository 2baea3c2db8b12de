//! Open-world detection heads whose feature space is pinned to fixed
//! per-class semantic anchors.
//!
//! The crate is split into the anchor registry ([`topology`]), the trainable
//! head with hand-derived gradients ([`model`]), open-world box mechanics
//! ([`openworld`]), the incremental life cycle ([`protocol`]), the evaluation
//! metrics ([`metrics`]), dataset files and the synthetic benchmark
//! ([`data`]), and experiment orchestration ([`config`], [`experiment`]).

pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod openworld;
pub mod protocol;
pub mod seed;
pub mod topology;
