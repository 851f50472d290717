// Copyright 2026 The qmarkov Authors
// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("dimension {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("qubit index {index} out of range for {n} qubits")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("operator is not Hermitian (deviation {0:.3e})")]
    NotHermitian(f64),

    #[error("not a valid density matrix: {0}")]
    NotAState(String),

    #[error("operator norm {norm:.6} exceeds bound {bound:.6}")]
    NormViolation { norm: f64, bound: f64 },

    #[error("Kraus set incomplete: residual {0:.3e}")]
    Incomplete(f64),

    #[error("operator support violation: {0}")]
    SupportViolation(String),

    #[error("quadrature did not converge: achieved {achieved:.3e}, requested {requested:.3e}")]
    Quadrature { achieved: f64, requested: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("enumeration of {0} outcome sequences exceeds the limit")]
    EnumerationTooLarge(f64),

    #[error("marginals indistinguishable: delta = {0:.3e}")]
    Indistinguishable(f64),

    #[error("all outcome probabilities vanished in round {round}")]
    DeadBranch { round: usize },

    #[error("unknown {kind} '{name}' (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Configuration and validation problems are distinguished from numerical failures
    /// so that the runner can map them onto different exit codes.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidRegion(_)
                | Error::IndexOutOfRange { .. }
                | Error::InvalidParameter(_)
                | Error::UnknownStrategy { .. }
                | Error::Json(_)
                | Error::Io(_)
                | Error::NotAState(_)
                | Error::SupportViolation(_)
                | Error::Indistinguishable(_)
                | Error::EnumerationTooLarge(_)
        )
    }
}
