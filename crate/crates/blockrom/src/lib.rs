// Negated comparisons like `!(v > 0.0)` are kept: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::type_complexity)]
#![allow(clippy::large_enum_variant)]

//! Block-structured operator inference for coupled two-physics systems.
//!
//! The crate learns reduced-order models with prescribed block structure
//! from snapshot data of a coupled dynamical system, and compares them
//! against a monolithic (single dense model) formulation. It ships a
//! synthetic coupled full-order model (linear modal structure coupled to a
//! quadratic fluid-like subsystem) so the whole pipeline runs at desk
//! scale: simulate, preprocess, decompose, infer, search regularization,
//! predict, and evaluate.

pub mod error;
pub mod flutter;
pub mod fom;
pub mod inference;
pub mod kron;
mod ode;
pub mod pod;
pub mod regsearch;
pub mod rom;
pub mod snapshots;
pub mod textio;

pub use error::{Error, Result};
