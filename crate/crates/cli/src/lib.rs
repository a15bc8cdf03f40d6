//! Command-line front end: JSON experiment configs, run records and CSV
//! artifacts around the probes in `probe-core`.

pub mod config;
pub mod record;
pub mod run;
