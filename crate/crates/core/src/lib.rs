//! Desk-scale laboratory for testing representational claims about small
//! neural systems.
//!
//! The crate trains encoder/decoder systems on synthetic linguistic tasks,
//! fits probe families on intermediate activations, builds interventions on
//! those activations and checks the Information, Use and Misrepresentation
//! criteria end to end.
//!
//! Everything here is pure computation over `alloc`; file formats, configs
//! and the command line live in the `reprobe` companion crate. Build with
//! `--no-default-features` for a `no_std` target.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod experiment;
pub mod intervene;
pub mod math;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod stats;
pub mod task;

pub use error::{Error, Result};
pub use numeric::{ProbDist, RealMatrix, RealVector};
