//! Command-line front end for `aftkm`: single-set tests, gene-set scans with
//! FDR thresholds, simulation, calibration studies and Q-Q diagnostics.

pub mod commands;
pub mod config;
pub mod svg;

pub use commands::{cmd_calibrate, cmd_qq, cmd_scan, cmd_simulate, cmd_test, ScanSummary, Status};
pub use config::{ConfigFile, DataArgs, ScanConfig};
