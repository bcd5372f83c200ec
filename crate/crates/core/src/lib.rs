//! Arnol'd–Liouville structures of Hamiltonian systems on `T*Tⁿ`.
//!
//! The crate builds invariant Lagrangian foliations, cohomology maps,
//! generating functions, rotation vectors, torus conjugacies and
//! action-angle coordinates from sampled data, and checks them against
//! closed-form integrable models.
//!
//! Conventions: `ω = Σ dq_i ∧ dp_i`, `X_H = (∂H/∂p, −∂H/∂q)` and
//! `{F, G} = ∂F/∂q · ∂G/∂p − ∂F/∂p · ∂G/∂q`.

pub mod action_angle;
pub mod c0;
pub mod conjugacy;
pub mod error;
pub mod flow;
pub mod foliation;
pub mod models;
mod par;
pub mod spline;
pub mod torus;

pub use error::{Error, Result};
