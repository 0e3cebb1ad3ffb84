//! Complete-view pose-based gait recognition.
//!
//! Single-view 2D pose sequences are lifted to every camera view of a rig with
//! learned full-rank 3x3 transforms (product of masked triangular factors),
//! and identities are recognized from the original plus generated views by a
//! two-branch network built on multi-order hypergraph convolution.

pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod hgc;
pub mod lugan;
pub mod nn;
pub mod plot;
pub mod recognizer;
pub mod rng;
pub mod skeleton;
pub mod synth;

pub use error::{Error, Result};
