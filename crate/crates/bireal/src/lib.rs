//! A self-contained 1-bit CNN engine.
//!
//! Weights and activations of the convolutional trunk live in {-1, +1}, so
//! inference convolutions reduce to XNOR plus popcount over packed 64-bit
//! words. Training keeps real-valued master weights and routes gradients
//! through piecewise surrogates of the sign function; each block adds its
//! real-valued input back onto the convolution output through an identity
//! shortcut so the network propagates full-precision information between
//! binary layers. The crate also ships a cost analyzer (memory bits and
//! multiply counts against a full-precision twin) and a CLI for desk-scale
//! training, evaluation, and model inspection.

pub mod analysis;
pub mod bn;
pub mod conv;
pub mod data;
pub mod error;
pub mod io;
pub mod layers;
pub mod model;
pub mod net;
pub mod ops;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
