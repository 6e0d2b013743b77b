//! Snapshot-based coverage-guided fuzzing for rehosted firmware.

pub mod config;
pub mod corpus;
pub mod coverage;
pub mod deduce;
pub mod executor;
pub mod mutator;
pub mod pcapout;
pub mod rng;
pub mod sanitizer;
pub mod targets;
pub mod vmcore;
