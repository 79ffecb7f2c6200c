//! Post-training mitigation of classifier overfitting — both backdoor data
//! poisoning and non-malicious causes such as class imbalance and
//! over-training — by learning per-neuron/per-channel activation clipping
//! bounds that suppress maximum classification margins.
//!
//! The crate is organized around a small reverse-mode tensor engine
//! ([`tensor`]), bounded feedforward networks ([`network`]), dataset
//! synthesis and poisoning ([`datagen`]), baseline training ([`trainer`]),
//! maximum-margin estimation ([`margin`]), the two alternating bound
//! optimizers ([`mitigation`]), the paired-model defense ([`mmdf`]), and an
//! experiment driver ([`harness`]).

pub mod config;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod margin;
pub mod mitigation;
pub mod mmdf;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
