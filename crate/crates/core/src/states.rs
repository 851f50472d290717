// Copyright 2026 The qmarkov Authors
// SPDX-License-Identifier: Apache-2.0

//! State families used by experiments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::{embed, partial_trace, trace, DensityMatrix, Operator, C64};
use crate::spectral::{gibbs_state, HamiltonianSpec};

/// Dense complex matrix as nested row arrays, used for file exchange.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixFile {
    pub re: Vec<Vec<f64>>,
    #[serde(default)]
    pub im: Option<Vec<Vec<f64>>>,
}

impl MatrixFile {
    pub fn from_operator(op: &Operator) -> Self {
        let rows = |f: fn(&C64) -> f64| {
            (0..op.nrows())
                .map(|r| (0..op.ncols()).map(|c| f(&op[(r, c)])).collect())
                .collect()
        };
        Self {
            re: rows(|z| z.re),
            im: Some(rows(|z| z.im)),
        }
    }

    pub fn to_operator(&self) -> Result<Operator> {
        let d = self.re.len();
        let bad = |what: &str| Error::Config(format!("matrix file: {what}"));
        if d == 0 || self.re.iter().any(|r| r.len() != d) {
            return Err(bad("real part is not square"));
        }
        if let Some(im) = &self.im {
            if im.len() != d || im.iter().any(|r| r.len() != d) {
                return Err(bad("imaginary part has the wrong shape"));
            }
        }
        Ok(Operator::from_fn(d, d, |r, c| {
            C64::new(self.re[r][c], self.im.as_ref().map_or(0.0, |im| im[r][c]))
        }))
    }
}

pub fn load_state(path: &Path) -> Result<DensityMatrix> {
    let text = std::fs::read_to_string(path)?;
    let file: MatrixFile = serde_json::from_str(&text)?;
    DensityMatrix::new(file.to_operator()?)
}

/// Sign of the total Z-magnetization `Σ_q (1 − 2 b_q)` selected by a sector projector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sector {
    Positive,
    Negative,
}

/// Projector onto computational states of strictly positive or negative magnetization.
pub fn sector_projector(n: usize, sector: Sector) -> Operator {
    let d = 1usize << n;
    let diag = (0..d).map(|x| {
        let m = n as i64 - 2 * x.count_ones() as i64;
        let keep = match sector {
            Sector::Positive => m > 0,
            Sector::Negative => m < 0,
        };
        C64::new(if keep { 1.0 } else { 0.0 }, 0.0)
    });
    Operator::from_diagonal(&nalgebra::DVector::from_iterator(d, diag))
}

/// `Π ρ Π / Tr[Π ρ]` for the Gibbs state `ρ`.
pub fn sector_gibbs(spec: &HamiltonianSpec, sector: Sector) -> Result<DensityMatrix> {
    let rho = gibbs_state(spec)?;
    let p = sector_projector(spec.n, sector);
    let proj = &p * rho.matrix() * &p;
    let tr = trace(&proj).re;
    if tr < 1e-300 {
        return Err(Error::Numerical("sector has zero weight".into()));
    }
    DensityMatrix::new(proj.unscale(tr))
}

/// `(1 − p) ρ + p · (I_A/d_A ⊗ Tr_A ρ)`.
pub fn perturbed_gibbs(spec: &HamiltonianSpec, region: &[usize], p: f64) -> Result<DensityMatrix> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("mixing weight {p} outside [0, 1]")));
    }
    let rho = gibbs_state(spec)?;
    let depolarized = depolarize(rho.matrix(), region, spec.n)?;
    DensityMatrix::new(rho.matrix().scale(1.0 - p) + depolarized.scale(p))
}

/// `I_A/d_A ⊗ Tr_A X`.
pub fn depolarize(x: &Operator, region: &[usize], n: usize) -> Result<Operator> {
    let keep = crate::operator::complement(region, n);
    let reduced = partial_trace(x, &keep, n)?;
    Ok(embed(&reduced, &keep, n)?.unscale((1usize << region.len()) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{build_hamiltonian, ModelParams};

    #[test]
    fn sector_states_are_supported_on_their_sector() {
        let p = ModelParams {
            j: Some(-1.0),
            h: Some(0.0),
            ..Default::default()
        };
        let spec = build_hamiltonian("tfim", 4, &p, 3.0, 0).unwrap();
        let plus = sector_gibbs(&spec, Sector::Positive).unwrap();
        let minus = sector_gibbs(&spec, Sector::Negative).unwrap();
        // all-up and all-down dominate their sectors
        assert!(plus.matrix()[(0, 0)].re > 0.9);
        assert!(minus.matrix()[(15, 15)].re > 0.9);
        assert!((plus.matrix() * minus.matrix()).camax() < 1e-15);
    }

    #[test]
    fn perturbation_interpolates() {
        let spec = build_hamiltonian("tfim", 3, &ModelParams::default(), 1.0, 0).unwrap();
        let rho = gibbs_state(&spec).unwrap();
        let same = perturbed_gibbs(&spec, &[0], 0.0).unwrap();
        assert!((same.matrix() - rho.matrix()).camax() < 1e-15);
        let full = perturbed_gibbs(&spec, &[0], 1.0).unwrap();
        let a = partial_trace(full.matrix(), &[0], 3).unwrap();
        assert!((a - crate::operator::identity(2).scale(0.5)).camax() < 1e-12);
        assert!(perturbed_gibbs(&spec, &[0], 1.5).is_err());
    }

    #[test]
    fn matrix_file_round_trip() {
        let spec = build_hamiltonian("heisenberg", 2, &ModelParams::default(), 1.0, 0).unwrap();
        let rho = gibbs_state(&spec).unwrap();
        let f = MatrixFile::from_operator(rho.matrix());
        let text = serde_json::to_string(&f).unwrap();
        let back: MatrixFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_operator().unwrap(), *rho.matrix());
        let bad = MatrixFile {
            re: vec![vec![1.0, 0.0]],
            im: None,
        };
        assert!(bad.to_operator().is_err());
    }
}
