//! Hierarchical disentanglement of speech features.
//!
//! A factorized variational autoencoder splits a log-mel sequence into a
//! temporally stable utterance-level stream and a fast content stream; the
//! utterance-level stream is then split again into a speaker embedding,
//! supervised by speaker labels, and a style embedding that is pushed away
//! from speaker identity through an adversarial classifier behind a
//! gradient-reversal layer.
//!
//! Module map:
//! - [`features`]: audio ingestion, log-mel extraction, VTLP, instance
//!   normalisation and room-impulse-response augmentation
//! - [`synthdata`]: factorized synthetic corpora with ground-truth factors
//! - [`model`]: encoders, classifiers, pooling and decoder
//! - [`losses`]: contrastive, KL, XSigmoid and cross-entropy objectives
//! - [`training`]: the alternating main/adversarial schedule
//! - [`eval`]: speaker verification, probes, conversion and embedding export

pub mod config;
pub mod error;
pub mod eval;
pub mod exec;
pub mod features;
pub mod io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod real;
pub mod seed;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
pub use exec::ExecMode;
pub use real::Real;
