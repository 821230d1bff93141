//! Config loading and experiment execution behind the `sindy` binary.

pub mod config;
pub mod run;
