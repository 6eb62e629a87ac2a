//! Failure-set guided differentiable architecture search.
//!
//! The crate searches a cell-based supernet with alternating first-order
//! bilevel updates, collects the corrupted test examples a deployed model
//! misclassifies, picks a small core subset of them with K-center greedy
//! over penultimate features, and re-runs the search with that subset mixed
//! into the training and validation splits.

pub mod autodiff;
pub mod bilevel;
pub mod coreset;
pub mod corruption;
pub mod data;
pub mod pipeline;
pub mod searchspace;
pub mod tensor;

pub use tensor::Tensor;
