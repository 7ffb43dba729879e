//! Validation harness behind the `rtfilter` binary: configuration loading,
//! machine-readable reports, scalar-loop reference implementations, and the
//! four experiment commands.

pub mod commands;
pub mod config;
pub mod reference;
pub mod report;
