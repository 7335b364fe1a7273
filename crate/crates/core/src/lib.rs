//! Allocation-only core of an EEND-CD speaker diarization system.
//!
//! Everything here is pure computation over in-memory buffers: the
//! reverse-mode tensor core ([`numerics`]), the CNN front-end encoder
//! ([`frontend`]), the conformer-decoder network with per-layer attractor
//! updates ([`model`]), the training objective ([`losses`]), synthetic data,
//! optimizer and training step ([`pipeline`]), and post-processing plus
//! DER scoring ([`eval`]). File formats, audio IO and the command line live
//! in the `eendcd` crate.
#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod assign;
mod error;
pub mod eval;
pub mod frontend;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, Result};
