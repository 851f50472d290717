// Copyright 2026 The qmarkov Authors
// SPDX-License-Identifier: Apache-2.0

//! Exact few-qubit laboratory for detailed-balance Lindbladians, time-averaged
//! recovery maps, Markov-property diagnostics and measurement–recovery protocols.
//!
//! Qubit `q` is bit `q` of a computational basis index (qubit 0 is the least
//! significant tensor factor). Operators are vectorized column-major, so
//! `vec(X)[i + D·j] = X[i, j]`.

pub mod error;
pub mod operator;
pub mod quadrature;
pub mod registry;
pub mod semigroup;
pub mod spectral;
pub mod superop;
pub mod lindblad;
pub mod states;
pub mod diagnostics;
pub mod protocols;
pub mod experiment;

pub use error::{Error, Result};
