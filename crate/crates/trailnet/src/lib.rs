//! Trail-following vision pipeline on procedural forest worlds: dataset
//! rendering under domain shifts, a small conv-net heading classifier, deep
//! domain adaptation via multi-kernel MMD, and a closed-loop flight harness.

pub mod adapt;
pub mod config;
pub mod data;
pub mod exec;
pub mod flight;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod scene;
