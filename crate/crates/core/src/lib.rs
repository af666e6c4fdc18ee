//! LoRa radio frequency fingerprint identification.
//!
//! The crate covers the whole chain from simulated transmitters to device
//! labels:
//!
//! - [`phy`]: ideal chirps and preambles.
//! - [`devsim`]: virtual devices with hardware impairments and drifting CFO.
//! - [`receiver`]: synchronization, coarse/fine CFO estimation, normalization.
//! - [`repr`]: IQ, FFT and spectrogram network inputs.
//! - [`classifier`]: the CNNs, training, and the CFO-gated hybrid classifier.
//! - [`harness`]: dataset container, checkpoints, experiment orchestration, CLI.

pub mod classifier;
pub mod devsim;
pub mod error;
pub mod harness;
pub mod phy;
pub mod receiver;
pub mod repr;
mod seed;

pub use error::{Error, Result};
pub use phy::{ComplexSignal, LoRaParams};
