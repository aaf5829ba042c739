//! Chain and causal attention (ChaCAL) on a self-contained numerical core.
//!
//! A causal attention matrix can be read as the adjacency matrix of a
//! dependency graph; summing its geometrically-weighted powers lets one
//! layer aggregate paths of every length. The closed form
//! `(1-γ)·A(I-γA)⁻¹V` is computed here as a lower-triangular solve, with a
//! custom backward rule, an incremental per-token decode rule, and the
//! layer-count lower bound `⌈log₂(depth+1)⌉` mechanized alongside the
//! entity-tracking tasks that exercise it.

pub mod attention;
pub mod datasets;
pub mod experiments;
pub mod graphs;
pub mod model;
pub mod numcore;
pub mod rng;
pub mod training;
