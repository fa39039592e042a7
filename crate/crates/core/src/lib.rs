//! End-to-end text-dependent speaker verification.
//!
//! The pipeline turns keyword utterances into 38-dim cepstral frames, runs a
//! speaker CNN over asymmetric context windows, pools the frame features into
//! phoneme-blocked supervectors using posteriors (and optionally learned
//! attention weights) from a frozen phonetic network, and scores supervectors
//! by cosine similarity behind a logistic head. All trainable pieces are
//! optimized jointly on verification trials with hard impostors mined from a
//! speaker vector pool.

pub mod corpus;
pub mod error;
pub mod features;
pub mod metrics;
pub mod miner;
pub mod model;
pub mod nn;
pub mod par;
pub mod phonetic;
pub mod pooling;
pub mod scoring;
pub mod speaker_net;
pub mod trainer;

pub use error::{Error, Result};
