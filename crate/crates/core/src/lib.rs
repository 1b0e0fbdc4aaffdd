//! Cubature on Wiener space for weak approximation of stochastic
//! differential equations in weighted function spaces.
//!
//! The crate is organised bottom-up: [`weights`] and [`vectorfields`]
//! provide the analytic machinery, [`quadrature`] and [`cubature`] build and
//! verify cubature formulas, [`flow`] evolves models along cubature paths,
//! and [`scheme`] composes the one-step operator over time meshes.
//! [`models`] holds concrete instances, [`cli`] the command-line front end.

pub mod cli;
pub mod cubature;
pub mod error;
pub mod flow;
pub mod jet;
pub mod models;
pub mod quadrature;
pub mod scheme;
pub mod vectorfields;
pub mod weights;

pub use error::{Error, Result};
