//! Coding of feature vectors in a reproducing kernel Hilbert space.
//!
//! Every coding scheme here (hard and soft bag of words, sparse coding,
//! exact and approximate locality-constrained coding) only touches the data
//! through kernel values: `k(x, x)`, `k(x, D)` and `K(D, D)`. Those are
//! bundled in [`kernels::GramBundle`] and handed to the encoders in
//! [`coders`]. On top of the encoders sit the learners: kernel parameters
//! and multiple-kernel weights ([`kernellearn`]), dictionaries expressed
//! over the training set ([`dictlearn`]) and jointly trained classifiers
//! ([`supervised`]).

pub mod classify;
pub mod cli;
pub mod coders;
pub mod dictlearn;
pub mod error;
pub mod kernellearn;
pub mod kernels;
pub mod numerics;
pub mod supervised;
pub mod synth;

pub use error::{Error, Result};
