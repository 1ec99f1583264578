//! Finite-difference gradient verification.

pub mod fd;
pub mod suite;

pub use fd::{finite_difference_check, finite_difference_check_params, FdOptions, FdReport, FD_STEP, FD_TOLERANCE};
pub use suite::{run_suite, CheckOutcome, SuiteReport};
