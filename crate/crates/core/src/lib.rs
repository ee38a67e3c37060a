//! Numerical laboratory for the one-sided gradient-penalty problem, its
//! weighted Beckmann dual, and the congested-transport traffic plans that
//! realise the optimal flow, on uniform grids over the unit box.

pub mod beckmann;
pub mod error;
pub mod gp;
pub mod grid;
pub mod measures;
pub mod scenario;
pub mod suites;
pub mod traffic;
pub mod w1;

pub use error::{LabError, Result};
