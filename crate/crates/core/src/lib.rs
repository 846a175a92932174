//! Joint modelling of longitudinal covariates and partly interval-censored
//! survival times by constrained maximum penalised likelihood.

pub mod basis;
pub mod bench;
pub mod data;
pub mod deriv;
pub mod error;
pub mod inference;
pub mod model;
pub mod optimizer;
pub mod simulate;
pub mod variance;

pub use error::{Error, Result};
