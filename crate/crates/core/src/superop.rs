// Copyright 2026 The qmarkov Authors
// SPDX-License-Identifier: Apache-2.0

//! Dense superoperators on column-vectorized operators.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::operator::{
    embed, hermitian_part, identity, op_norm, partial_trace, HermitianEigen, Operator, C64, ONE, ZERO,
};

/// `vec(X)[i + D·j] = X[i, j]`.
pub fn vectorize(x: &Operator) -> DVector<C64> {
    DVector::from_column_slice(x.as_slice())
}

pub fn unvectorize(v: &DVector<C64>, dim: usize) -> Operator {
    Operator::from_column_slice(dim, dim, v.as_slice())
}

/// Superoperator of `X ↦ A X`.
pub fn left_multiplication(a: &Operator) -> DMatrix<C64> {
    identity(a.nrows()).kronecker(a)
}

/// Superoperator of `X ↦ X B`.
pub fn right_multiplication(b: &Operator) -> DMatrix<C64> {
    b.transpose().kronecker(&identity(b.nrows()))
}

/// A linear map on `D × D` operators stored as a `D² × D²` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Superop {
    dim: usize,
    matrix: DMatrix<C64>,
}

impl Superop {
    pub fn from_matrix(dim: usize, matrix: DMatrix<C64>) -> Result<Self> {
        if matrix.nrows() != dim * dim || matrix.ncols() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: matrix.nrows(),
            });
        }
        Ok(Self { dim, matrix })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            matrix: identity(dim * dim),
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            matrix: DMatrix::zeros(dim * dim, dim * dim),
        }
    }

    /// `X ↦ Σ K X K†`.
    pub fn from_kraus(kraus: &[Operator]) -> Result<Self> {
        let dim = kraus.first().map(|k| k.nrows()).ok_or_else(|| {
            Error::InvalidParameter("empty Kraus list".into())
        })?;
        let mut matrix = DMatrix::zeros(dim * dim, dim * dim);
        for k in kraus {
            if k.nrows() != dim || k.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: k.nrows(),
                });
            }
            matrix += k.conjugate().kronecker(k);
        }
        Ok(Self { dim, matrix })
    }

    /// Tabulates an arbitrary linear map from its action on matrix units.
    pub fn from_fn<F: FnMut(&Operator) -> Result<Operator>>(dim: usize, mut f: F) -> Result<Self> {
        let mut matrix = DMatrix::zeros(dim * dim, dim * dim);
        let mut unit = Operator::zeros(dim, dim);
        for j in 0..dim {
            for i in 0..dim {
                unit[(i, j)] = ONE;
                let image = f(&unit)?;
                unit[(i, j)] = ZERO;
                matrix.column_mut(i + dim * j).copy_from(&vectorize(&image));
            }
        }
        Ok(Self { dim, matrix })
    }

    /// Replacement channel `X ↦ σ Tr[X]`.
    pub fn replacement(sigma: &Operator) -> Self {
        let dim = sigma.nrows();
        let matrix = vectorize(sigma) * vectorize(&identity(dim)).adjoint();
        Self { dim, matrix }
    }

    /// Forgetful channel `X ↦ I_R/d_R ⊗ Tr_R[X]` on region `R`.
    pub fn forgetful(region: &[usize], n: usize) -> Result<Self> {
        let keep = crate::operator::complement(region, n);
        crate::operator::validate_region(region, n)?;
        let d_r = (1usize << region.len()) as f64;
        Self::from_fn(1 << n, |x| {
            let reduced = partial_trace(x, &keep, n)?;
            Ok(embed(&reduced, &keep, n)?.unscale(d_r))
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.matrix
    }

    fn check(&self, x: &Operator) -> Result<()> {
        if x.nrows() != self.dim || x.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.nrows(),
            });
        }
        Ok(())
    }

    pub fn apply(&self, x: &Operator) -> Result<Operator> {
        self.check(x)?;
        Ok(unvectorize(&(&self.matrix * vectorize(x)), self.dim))
    }

    /// Hilbert–Schmidt adjoint: `Tr[Y† S(X)] = Tr[S†(Y)† X]`.
    pub fn apply_adjoint(&self, y: &Operator) -> Result<Operator> {
        self.check(y)?;
        Ok(unvectorize(&self.matrix.ad_mul(&vectorize(y)), self.dim))
    }

    pub fn adjoint(&self) -> Self {
        Self {
            dim: self.dim,
            matrix: self.matrix.adjoint(),
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Superop) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        Ok(Self {
            dim: self.dim,
            matrix: &self.matrix * &other.matrix,
        })
    }

    pub fn add(&self, other: &Superop) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        Ok(Self {
            dim: self.dim,
            matrix: &self.matrix + &other.matrix,
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            matrix: self.matrix.scale(s),
        }
    }

    /// Unnormalised Choi matrix `Σ_ij |i⟩⟨j| ⊗ S(|i⟩⟨j|)`, indexed `(a + D·i, b + D·j)`.
    pub fn choi(&self) -> Operator {
        let d = self.dim;
        let mut choi = Operator::zeros(d * d, d * d);
        for j in 0..d {
            for i in 0..d {
                let col = self.matrix.column(i + d * j);
                for b in 0..d {
                    for a in 0..d {
                        choi[(a + d * i, b + d * j)] = col[a + d * b];
                    }
                }
            }
        }
        choi
    }

    pub fn choi_min_eigenvalue(&self) -> f64 {
        HermitianEigen::new(&hermitian_part(&self.choi())).values[0]
    }

    /// `‖S†[I] − I‖` (operator norm).
    pub fn trace_preservation_error(&self) -> f64 {
        let id = identity(self.dim);
        let image = self.apply_adjoint(&id).expect("dimensions agree");
        op_norm(&(image - id))
    }

    /// Writes `{dim, region, beta, layout, re, im}` with row-major entries.
    pub fn write_json_dump<W: Write>(&self, out: W, region: &[usize], beta: f64) -> Result<()> {
        #[derive(Serialize)]
        struct Dump<'a> {
            dim: usize,
            region: &'a [usize],
            beta: f64,
            layout: &'static str,
            re: Vec<f64>,
            im: Vec<f64>,
        }
        let n = self.matrix.nrows();
        let mut re = Vec::with_capacity(n * n);
        let mut im = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                re.push(self.matrix[(r, c)].re);
                im.push(self.matrix[(r, c)].im);
            }
        }
        let dump = Dump {
            dim: self.dim,
            region,
            beta,
            layout: "row-major; column-vectorized operators",
            re,
            im,
        };
        serde_json::to_writer(out, &dump)?;
        Ok(())
    }

    /// Binary dump: magic `QMSUPER1`, `u64` dim, `u64` region length, region as `u64`,
    /// `f64` beta, then row-major `(re, im)` little-endian doubles.
    pub fn write_binary_dump<W: Write>(&self, mut out: W, region: &[usize], beta: f64) -> Result<()> {
        out.write_all(b"QMSUPER1")?;
        out.write_all(&(self.dim as u64).to_le_bytes())?;
        out.write_all(&(region.len() as u64).to_le_bytes())?;
        for &q in region {
            out.write_all(&(q as u64).to_le_bytes())?;
        }
        out.write_all(&beta.to_le_bytes())?;
        let n = self.matrix.nrows();
        for r in 0..n {
            for c in 0..n {
                let z = self.matrix[(r, c)];
                out.write_all(&z.re.to_le_bytes())?;
                out.write_all(&z.im.to_le_bytes())?;
            }
        }
        Ok(())
    }
}
