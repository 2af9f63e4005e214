//! Predictive-state communication laboratory.
//!
//! Two endpoints hold synchronized predictive models of a token stream.
//! The sender transmits only innovations, the places where reality departs
//! from what the shared model already implies, as compressed patches over
//! a delayed, capacity-limited channel. This crate provides the pieces:
//!
//! - [`predictor`]: token alphabets, distributions with a probability
//!   floor, n-gram and Markov predictors, exact entropy-rate math.
//! - [`feasibility`]: the perception-capacity band telling whether a
//!   target token rate fits a link budget, and sweeps over its inputs.
//! - [`codec`]: edit scripts, arithmetic coding of new tokens against the
//!   shared predictor, and the checksummed patch wire format.

pub mod codec;
pub mod feasibility;
pub mod monitor;
pub mod netsim;
pub mod predictor;
pub mod protocol;
