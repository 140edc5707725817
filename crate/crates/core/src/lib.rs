//! Patient-specific tumor growth digital twin.
//!
//! Logistic growth with linear-quadratic radiotherapy and concurrent
//! chemotherapy, Bayesian calibration from sparse tumor burden data,
//! superquantile risk of early progression, risk-averse dose optimization
//! and cohort survival statistics.

pub mod calibration;
pub mod cohort;
pub mod error;
pub mod model;
pub mod optimizer;
pub mod risk;
pub mod seed;
pub mod survival;
pub mod truncnorm;

pub use error::{Result, TwinError};
