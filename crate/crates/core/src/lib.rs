//! Semantic column-type annotation toolkit.
//!
//! Learns a flat dictionary of semantic classes from raw relational tables,
//! generalizes it into a class tree, annotates table columns through a
//! language-model backend (flat prompting, tree serialization, step-by-step
//! prompting, or grammar-constrained decoding), and scores annotations with
//! macro-averaged metrics under either exact or hierarchical correctness.

pub mod gateway;
pub mod grammar;
pub mod model;
pub mod cli;
