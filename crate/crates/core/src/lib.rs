//! Spectral DC arc-fault detection for photovoltaic inverters.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! - [`synth`]: labeled synthetic PV current traces (nuisance categories, arcs,
//!   hardware variants, field drift).
//! - [`features`]: framing, Hanning window, DFT, dB scaling and band aggregation.
//! - [`nn`]: a small deterministic 1-D CNN engine with hand-written backward passes.
//! - [`detector`]: supervised training, metrics, the consecutive-frame alarm
//!   counter and the data-scaling experiment.
//! - [`transfer`]: cross-hardware fine-tuning with source replay and anchored L2.
//! - [`adapt`]: alarm verification, two-stage evolutionary adaptation and canary rules.
//! - [`fleet`]: a discrete-event fleet/cloud simulation with a binary wire protocol.

pub mod adapt;
pub mod detector;
pub mod error;
pub mod features;
pub mod fleet;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod transfer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use features::{FeatureConfig, FeatureSet, Frame, SpectralVector};
pub use nn::{ArchSpec, FlopsCount, Model, ModelParams};

pub use synth::{ArcParams, Category, DriftSpec, HardwareProfile, Label, ScenarioSpec, SignalTrace};
