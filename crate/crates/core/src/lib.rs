//! Speculative decoding over a decentralized pipeline, at desk scale.
//!
//! * [`token_model`]: synthetic draft/target models with exact distributions.
//! * [`verifier`]: draft windows, key-token detection, adaptive verification.
//! * [`enumerate`]: exact output distributions, used as a losslessness oracle.
//! * [`latency`]: closed-form timing of standard vs. windowed decoding.
//! * [`netsim`]: discrete-event pipeline simulator.
//! * [`calibrate`]: threshold calibration on a validation set.
//! * [`metrics`]: run statistics and CSV output.
//! * [`config`] and [`experiment`]: the experiment driver behind the CLI.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod config;
pub mod enumerate;
pub mod error;
pub mod experiment;
pub mod latency;
pub mod metrics;
pub mod netsim;
pub mod rng;
pub mod token_model;
pub mod verifier;

pub use error::{DsdError, Result};
