//! Explanation selection for AI-assisted stock trading.
//!
//! Given a prediction `p` and a pool of class-tagged explanations for each
//! trading day, [`selector::select_explanations`] picks the subset whose
//! predicted effect on the user's order ([`user_model`]) brings it closest to
//! the order a reward-trained [`policy`] recommends.

pub mod error;
pub mod explanations;
pub mod market;
pub mod nn;
pub mod policy;
pub mod predictor;
pub mod selector;
pub mod sim;
pub mod stats;
pub mod synth;
pub mod user_model;

pub use error::{Error, Result};
