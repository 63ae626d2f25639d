//! Lip-to-speech synthesis toolkit.
//!
//! Maps lip-feature sequences to speech-feature sequences with a
//! non-autoregressive encoder-decoder, optionally quantizes the result to
//! discrete units, renders waveforms through a pluggable vocoder, and
//! evaluates with STOI/ESTOI/WER.

pub mod autodiff;
pub mod error;
pub mod featureio;
pub mod objectives;
pub mod pipeline;
pub mod quantizer;
pub mod s2smodel;
pub mod trainer;
pub mod metrics;
pub mod vocoder;

pub use error::{Error, Result};
