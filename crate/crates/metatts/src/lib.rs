//! Few-shot style-transfer voice cloning on synthetic data.
//!
//! A style-conditioned non-autoregressive text-to-spectrogram model (FFT
//! blocks with style-adaptive layer normalization) is pretrained on a
//! multi-speaker multi-prosody synthetic corpus, meta-trained so that its
//! speaker-related parameters adapt to an unseen speaker in a handful of
//! gradient steps, and evaluated against a pretrain-finetune baseline with
//! analytic speaker-similarity and mel-cepstral-distortion oracles.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod partition;
pub mod plot;
pub mod rng;
pub mod scalar;
pub mod syndata;

pub use error::{Error, Result};
