//! Expert recommendation for health-forum queries.
//!
//! Doctors are represented by their profile and their history dialogues. A
//! trainable text encoder is first aligned on a profile/dialogue matching
//! task ([`selflearn`]), then a profile-queried multi-head attention over
//! dialogue embeddings ([`expertise`]) feeds an MLP scorer trained with a
//! positive-weighted cross-entropy ([`ranker`]).

pub mod baselines;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod expertise;
pub mod metrics;
pub mod pipeline;
pub mod ranker;
pub mod rng;
pub mod selflearn;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
