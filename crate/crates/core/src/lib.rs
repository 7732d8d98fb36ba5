//! Simulation, estimation and control toolkit for weakly interacting
//! (McKean-Vlasov) particle systems and the large deviations of their
//! empirical measures.

pub mod control;
pub mod diag;
pub mod error;
pub mod experiment;
pub mod laplace;
pub mod measures;
pub mod model;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
