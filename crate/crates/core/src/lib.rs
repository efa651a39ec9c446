//! Knowledge graph completion by probing the hidden states of a frozen
//! language model.
//!
//! The pipeline renders triples into stimulation prompts, captures the
//! last-token hidden state of every interior layer, and trains small
//! classifiers (logistic regression, MLP, linear SVM) on one layer at a time.

pub mod descgen;
pub mod eval;
pub mod extraction;
pub mod kg;
pub mod pipeline;
pub mod probe;
pub mod prompts;
pub mod sampling;
pub mod synthetic;
