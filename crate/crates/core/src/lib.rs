//! Grammar-constrained neural semantic parsing with locally normalized (MLE)
//! and globally normalized (max-margin) training.
//!
//! Programs are ASTs over a small constructor grammar ([`grammar`]). The
//! [`transition`] system serializes them to action sequences, the [`model`]
//! scores each step, [`search`] runs beam search or exhaustive enumeration,
//! and [`training`] implements both objectives.

pub mod ast;
pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod grammar;
pub mod metrics;
pub mod model;
mod rng;
pub mod search;
pub mod training;
pub mod transition;

pub use rng::named_rng;
