//! Independent reference implementations and oracles used by the test
//! suites. Everything here is written as plain loops in f64 and must stay
//! decoupled from the tape kernels it cross-checks.

pub mod gradcheck;
pub mod oracles;
pub mod refops;

pub use gradcheck::{gradient_sweep, CaseReport, SweepReport};
