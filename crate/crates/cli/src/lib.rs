//! Library side of the `spiked-lss` command-line tool: configuration,
//! subcommands and report emission.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN.

pub mod commands;
pub mod config;

use std::fmt;

/// Why a command failed; each class maps to its own exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration or flags (exit 1).
    Config(anyhow::Error),
    /// A numerical step failed (exit 2).
    Numeric(anyhow::Error),
    /// `compare` ran but a tolerance was missed (exit 3).
    Acceptance(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Numeric(_) => 2,
            Failure::Acceptance(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "configuration error: {e:#}"),
            Failure::Numeric(e) => write!(f, "numerical error: {e:#}"),
            Failure::Acceptance(m) => write!(f, "comparison failed: {m}"),
        }
    }
}

impl std::error::Error for Failure {}
