//! Exact-arithmetic toolkit for joining compact metric spaces along cut
//! pairs over a bipartite tree, and for the matching graph-of-groups
//! constructions.
//!
//! The crate works at finite truncation depth with exact rational
//! arithmetic throughout: re-running any operation is bit-identical, and
//! every inequality the test-suite asserts is checked exactly, never to
//! a tolerance. The main pipelines are:
//!
//! * [`metric`] / [`tree`] / [`glue`]: finite metric spaces, tree
//!   systems of cut pairs, compatible shrinking metrics, the glued total
//!   space with its quotient metric, and finite completion data (ends,
//!   eps-nets, component splits).
//! * [`kettlebell`]: the same limit object described through an inverse
//!   system of kettlebell spaces (glued base plus one peripheral arc per
//!   frontier pair) with 1-Lipschitz bonding maps, and the finite-depth
//!   consistency report comparing the two descriptions.
//! * [`group`] / [`splitting`]: graphs of finite groups with signature
//!   data, tree unfolding, the combined graph obtained by collapsing
//!   pipe edges and removing neck edges, and the parabolic forest.
//! * [`analysis`]: circuit enumeration through an edge, four-point
//!   hyperbolicity estimates, separation, convexity, inseparable cut
//!   pairs, and the dual cut-pair tree with the round-trip isomorphism
//!   check.
//!
//! Data-parallel scans (the all-pairs quotient metric, quadruple scans)
//! use rayon when the default `parallel` feature is enabled and fall
//! back to plain iterators otherwise; outputs are identical either way.

pub mod analysis;
pub mod fixtures;
pub mod glue;
pub mod graph;
pub mod group;
pub mod instance;
pub mod kettlebell;
pub mod metric;
pub mod par;
pub mod rational;
pub mod splitting;
pub mod tree;

pub use rational::Rat;
