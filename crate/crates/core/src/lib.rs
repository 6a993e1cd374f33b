//! Two-hop retrieval routing.
//!
//! A question is scored against its candidate pool either on its own (the
//! `Q` action) or fused with the relation-bearing sentence of its bridge
//! passage (the `Union` action). A logistic-regression router picks the
//! action from surface-text features; a second logistic model picks the
//! sentence. The [`stats`] and [`experiments`] modules carry the rank
//! statistics and evaluation protocols around that pipeline.

pub mod corpus;
pub mod embedding;
pub mod error;
pub mod experiments;
pub mod linear_model;
pub mod routing;
pub mod selector;
pub mod stats;
pub mod text;

pub use error::{Error, Result};
