//! Core algorithms for retrieval-augmented image captioning.
//!
//! Everything in this crate is pure computation over in-memory data: the
//! description database builder, unit-norm embeddings and the mock embedder,
//! crop geometry, exact top-k cosine retrieval, the image-conditioning layer
//! with hand-written backward passes, a small transformer captioner trained
//! with cross-entropy and self-critical sequence training, BLEU/CIDEr, and a
//! synthetic scene generator. File formats, IO and the command line live in
//! the `ragcap` crate.
//!
//! The crate is `no_std` and only needs `alloc`.
#![no_std]
#![deny(rust_2018_idioms)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod captioner;
pub mod conditioning;
pub mod crops;
pub mod descdb;
pub mod embed;
mod error;
pub mod experiment;
pub mod gradcheck;
pub mod math;
pub mod metrics;
pub mod retrieval;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
