//! Adversarial substitution sets and logic-rule regularisation for natural
//! language inference classifiers.
//!
//! The crate is organised around a small pipeline:
//!
//! - [`corpus`] reads SNLI-format JSONL, bracketed parses and vocabularies.
//! - [`rules`] parses first-order background rules and evaluates their
//!   fuzzy (Gödel t-norm) truth values and inconsistency losses.
//! - [`model`] is the three-class scorer with hand-written backpropagation.
//! - [`lm`] is the additive-smoothed n-gram model used as a fluency gate.
//! - [`search`] perturbs prototype sentences and re-ranks candidates.
//! - [`train`] runs plain and adversarially regularised mini-batch SGD.
//! - [`craft`] builds adversarial evaluation sets, violation audits and accuracy.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar to `f64`, which is what the CLI uses.

pub mod corpus;
pub mod craft;
pub mod error;
pub mod lm;
pub mod model;
pub mod rules;
pub mod scalar;
pub mod search;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Built-in classifier over `f64`.
pub type Model = model::NliModel<f64>;
/// Built-in classifier over `f32`.
pub type Model32 = model::NliModel<f32>;
pub type Params = model::ScorerParams<f64>;
pub type Params32 = model::ScorerParams<f32>;
pub type Gradient = model::Gradient<f64>;
pub type Prediction = model::Prediction<f64>;
pub type AdversarialSet = search::AdversarialSet<f64>;
pub type TrainOutcome = train::TrainOutcome<f64>;
