//! Safety-state augmented decoding.
//!
//! A language model is treated as a token-level decision process whose
//! remaining safety budget is carried alongside the text. Penalizing any
//! trajectory that exhausts the budget turns the constrained decoding problem
//! into an unconstrained one, which is then solved by blockwise lookahead
//! search guided either by direct cost queries or by a small critic trained
//! on the model's latent state.

// Negated float comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod baselines;
pub mod critic;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod oracle;
pub mod prompts;
pub mod rng;
pub mod search;
pub mod toy;

pub use error::{Error, Result};
