//! End-to-end open-set network intrusion detection toolkit.
//!
//! The pipeline turns raw packet captures into dual-modality flow feature
//! records, trains per-attack similarity models with a triplet objective,
//! calibrates an unknown-rejection threshold by pseudo-unknown simulation,
//! and classifies traffic as benign, a known attack class, or unknown.

pub mod embedding;
pub mod artifacts;
pub mod calibration;
pub mod config;
pub mod error;
pub mod flow;
pub mod inference;
pub mod metrics;
pub mod fusion;
pub mod packet;
pub mod pcap;
pub mod pipeline;
pub mod preprocess;
pub mod schema;
pub mod synth;

pub use error::{Error, Result};
