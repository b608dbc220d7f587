//! Shortest-path graph attention networks (SPAGAN) for semi-supervised node
//! classification.
//!
//! The crate bundles everything the training pipeline needs: a small
//! reverse-mode autodiff engine over dense matrices ([`tensor`]), a CSR graph
//! and dataset loader ([`graph`]), shortest-path generation and sampling
//! ([`paths`]), first-order and path-based attention layers ([`layers`]), and
//! the iterative training protocol ([`train`]).

pub mod error;
pub mod graph;
pub mod layers;
pub mod paths;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
