//! Random Hierarchy Model toolkit.
//!
//! Generates data from random hierarchical grammars, regenerates it after
//! masking or ε-noise with exact belief propagation, and measures the
//! dynamical correlations and susceptibility of the resulting token changes.
//! A closed-form mean-field theory and a Gaussian random field baseline are
//! provided for comparison.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod belief_prop;
pub mod diffusion;
pub mod error;
pub mod grammar;
pub mod grf;
pub mod meanfield;
pub mod parallel;
pub mod rng;
pub mod runner;
pub mod statistics;

pub use error::{Error, Result};
pub use grammar::{Datum, GrammarParams, RuleTable};
