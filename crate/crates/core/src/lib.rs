//! Survival prognosis from clinical tables and CT/PET volumes.
//!
//! The crate combines three model families behind a shared survival core:
//!
//! - [`coxph`]: Cox proportional hazards (Breslow ties, Newton–Raphson).
//! - [`mtlr`]: multi-task logistic regression, linear or with a neural encoder.
//! - [`fusion`]: 3D-CNN image paths feeding an MTLR head (built on [`nn`]).
//!
//! Risks from different members are combined by [`ensemble`]; [`survival`]
//! holds the records, curves and the concordance index used to evaluate them.

// `!(x > 0.0)` style guards also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod coxph;
pub mod ensemble;
pub mod error;
pub mod fusion;
pub mod mtlr;
pub mod nn;
pub mod rng;
pub mod survival;
pub mod synthetic;
pub mod tabular;
pub mod volume;

pub use error::{Error, ErrorClass, Result};
pub use survival::{RiskScore, SurvivalCurve, SurvivalRecord, TimeGrid};
