// Copyright 2026 The qmarkov Authors
// SPDX-License-Identifier: Apache-2.0

//! Evaluation of `e^{sℒ}` and of the time average `(1/t)∫₀ᵗ e^{sℒ} ds = φ(tℒ)`,
//! with `φ(z) = (e^z − 1)/z`.

use std::sync::Arc;

use nalgebra::linalg::Schur;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::operator::{identity, Operator, C64, ONE, ZERO};
use crate::quadrature::simpson_weights;
use crate::registry::{Named, Registry};

/// Eigenvector matrices worse conditioned than this are not trusted.
pub const MAX_CONDITION: f64 = 1e12;
/// Relative non-Hermiticity tolerated in the symmetrized generator.
const KMS_ASYMMETRY_TOL: f64 = 1e-9;
/// Spectral results whose trace defect exceeds this are recomputed by scaling and squaring.
pub const TRACE_DEFECT_TOL: f64 = 1e-10;

/// `φ(z) = (e^z − 1)/z`, with the series `1 + z/2 + z²/6` near zero.
pub fn phi(z: C64) -> C64 {
    if z.norm() < 1e-6 {
        return ONE + z / 2.0 + z * z / 6.0;
    }
    // e^z − 1 without cancellation: expm1(x) cos y − 2 sin²(y/2) + i e^x sin y
    let (x, y) = (z.re, z.im);
    let half = (0.5 * y).sin();
    let num = C64::new(x.exp_m1() * y.cos() - 2.0 * half * half, x.exp() * y.sin());
    num / z
}

/// Data for the similarity transform that makes a detailed-balanced generator Hermitian.
///
/// With `W = conj(V) ⊗ V` the Hamiltonian eigenbasis change and `Γ = diag(weights)`,
/// `Γ⁻¹ ℒ_e Γ` is Hermitian where `ℒ = W ℒ_e W†`.
#[derive(Clone, Debug)]
pub struct KmsFrame {
    pub vectors: Operator,
    pub eigen_matrix: DMatrix<C64>,
    pub weights: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub matrix: DMatrix<C64>,
    pub kms: Option<Arc<KmsFrame>>,
}

impl Generator {
    pub fn new(matrix: DMatrix<C64>) -> Self {
        Self { matrix, kms: None }
    }
}

/// A superoperator matrix and the method that produced it.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub matrix: DMatrix<C64>,
    pub method: &'static str,
}

pub trait PreparedSemigroup: Send + Sync {
    /// The primary method; individual evaluations may fall back.
    fn method(&self) -> &'static str;
    /// `e^{sℒ}`.
    fn propagator(&self, s: f64) -> Result<Evaluation>;
    /// `φ(tℒ)`.
    fn average(&self, t: f64) -> Result<Evaluation>;
    fn eigenvalues(&self) -> Vec<C64>;
}

pub trait SemigroupEvaluator: Named + Send + Sync {
    fn prepare(&self, generator: &Generator) -> Result<Box<dyn PreparedSemigroup>>;
}

// ---------------------------------------------------------------------------
// Spectral evaluation
// ---------------------------------------------------------------------------

/// `ℒ = L diag(λ) R` with `R L = I`.
struct Spectral {
    left: DMatrix<C64>,
    right: DMatrix<C64>,
    values: Vec<C64>,
    method: &'static str,
    /// Generator to fall back on when a result is not trace preserving.
    verify_against: Option<DMatrix<C64>>,
}

/// Largest entry of `vec(I)† M − vec(I)†`.
fn trace_defect(m: &DMatrix<C64>) -> f64 {
    let n = m.nrows();
    let d = (n as f64).sqrt().round() as usize;
    (0..n)
        .map(|b| {
            let sum: C64 = (0..d).map(|i| m[(i + d * i, b)]).sum();
            let target = if b % (d + 1) == 0 { ONE } else { ZERO };
            (sum - target).norm()
        })
        .fold(0.0, f64::max)
}

impl Spectral {
    fn map<F: Fn(C64) -> C64>(&self, f: F) -> DMatrix<C64> {
        let mut scaled = self.left.clone();
        for (k, &v) in self.values.iter().enumerate() {
            let w = f(v);
            for x in scaled.column_mut(k).iter_mut() {
                *x *= w;
            }
        }
        scaled * &self.right
    }

    fn checked<F: Fn(C64) -> C64>(&self, f: F, fallback: impl Fn(&DMatrix<C64>) -> DMatrix<C64>) -> Evaluation {
        let matrix = self.map(f);
        if let Some(g) = &self.verify_against {
            let defect = trace_defect(&matrix);
            if defect > TRACE_DEFECT_TOL {
                log::debug!("spectral result has trace defect {defect:.2e}; re-evaluating with expm");
                return Evaluation {
                    matrix: fallback(g),
                    method: "expm-fallback",
                };
            }
        }
        Evaluation {
            matrix,
            method: self.method,
        }
    }
}

impl PreparedSemigroup for Spectral {
    fn method(&self) -> &'static str {
        self.method
    }

    fn propagator(&self, s: f64) -> Result<Evaluation> {
        Ok(self.checked(|l| (l * s).exp(), |g| expm_phi(&g.scale(s), false).0))
    }

    fn average(&self, t: f64) -> Result<Evaluation> {
        Ok(self.checked(|l| phi(l * t), |g| expm_phi(&g.scale(t), true).1.expect("requested")))
    }

    fn eigenvalues(&self) -> Vec<C64> {
        self.values.clone()
    }
}

fn kms_decomposition(frame: &KmsFrame, generator: &DMatrix<C64>) -> Option<Spectral> {
    let w = &frame.weights;
    let n = w.len();
    if frame.eigen_matrix.nrows() != n || w.iter().any(|x| !(*x > 0.0)) {
        return None;
    }
    let sym = DMatrix::from_fn(n, n, |a, b| frame.eigen_matrix[(a, b)] * (w[b] / w[a]));
    let scale = sym.camax().max(1.0);
    if (&sym - sym.adjoint()).camax() > KMS_ASYMMETRY_TOL * scale {
        return None;
    }
    let eig = crate::operator::HermitianEigen::new(&sym);
    let v = &frame.vectors;
    let basis = v.conjugate().kronecker(v);
    let mut wu = eig.vectors.clone();
    for (a, mut row) in wu.row_iter_mut().enumerate() {
        row *= C64::new(w[a], 0.0);
    }
    let mut uw = eig.vectors.adjoint();
    for (b, mut col) in uw.column_iter_mut().enumerate() {
        col /= C64::new(w[b], 0.0);
    }
    Some(Spectral {
        left: &basis * wu,
        right: uw * basis.adjoint(),
        values: eig.values.iter().map(|&x| C64::new(x, 0.0)).collect(),
        method: "eigen-kms",
        verify_against: Some(generator.clone()),
    })
}

fn condition_number(m: &DMatrix<C64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Eigenvectors from a complex Schur form by back-substitution.
fn schur_decomposition(m: &DMatrix<C64>) -> Option<Spectral> {
    let n = m.nrows();
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 0)?;
    let (q, t) = schur.unpack();
    let tnorm = t.camax().max(f64::MIN_POSITIVE);
    let small = f64::EPSILON * tnorm;
    let mut y = DMatrix::<C64>::zeros(n, n);
    for k in 0..n {
        let lambda = t[(k, k)];
        y[(k, k)] = ONE;
        for j in (0..k).rev() {
            let mut s = ZERO;
            for m in j + 1..=k {
                s += t[(j, m)] * y[(m, k)];
            }
            let mut d = t[(j, j)] - lambda;
            if d.norm() < small {
                d = C64::new(small, 0.0);
            }
            y[(j, k)] = -s / d;
        }
        let norm = y.column(k).norm();
        y.column_mut(k).unscale_mut(norm);
    }
    let x = &q * y;
    if condition_number(&x) > MAX_CONDITION {
        return None;
    }
    let inv = x.clone().lu().try_inverse()?;
    Some(Spectral {
        left: x,
        right: inv,
        values: (0..n).map(|k| t[(k, k)]).collect(),
        method: "eigen-schur",
        verify_against: None,
    })
}

/// Identity for the zero generator.
struct Trivial(usize);

impl PreparedSemigroup for Trivial {
    fn method(&self) -> &'static str {
        "exact"
    }

    fn propagator(&self, _s: f64) -> Result<Evaluation> {
        Ok(Evaluation {
            matrix: identity(self.0),
            method: "exact",
        })
    }

    fn average(&self, _t: f64) -> Result<Evaluation> {
        Ok(Evaluation {
            matrix: identity(self.0),
            method: "exact",
        })
    }

    fn eigenvalues(&self) -> Vec<C64> {
        vec![ZERO; self.0]
    }
}

fn is_zero(m: &DMatrix<C64>) -> bool {
    m.iter().all(|z| *z == ZERO)
}

/// Diagonalization; falls back to scaling and squaring when the eigenvector
/// matrix is ill-conditioned.
pub struct EigenEvaluator;

impl Named for EigenEvaluator {
    fn name(&self) -> &'static str {
        "eigen"
    }
}

impl SemigroupEvaluator for EigenEvaluator {
    fn prepare(&self, g: &Generator) -> Result<Box<dyn PreparedSemigroup>> {
        if is_zero(&g.matrix) {
            return Ok(Box::new(Trivial(g.matrix.nrows())));
        }
        if let Some(frame) = &g.kms {
            if let Some(s) = kms_decomposition(frame, &g.matrix) {
                return Ok(Box::new(s));
            }
            log::debug!("generator is not detailed balanced to tolerance; using Schur form");
        }
        if let Some(s) = schur_decomposition(&g.matrix) {
            return Ok(Box::new(s));
        }
        log::warn!("eigenvector matrix condition number above {MAX_CONDITION:e}; using expm");
        Ok(Box::new(Expm {
            matrix: g.matrix.clone(),
            method: "expm-fallback",
        }))
    }
}

// ---------------------------------------------------------------------------
// Scaling and squaring
// ---------------------------------------------------------------------------

fn one_norm(m: &DMatrix<C64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `(e^M, φ(M))` by Taylor series on `M/2^s` with `‖M/2^s‖₁ ≤ ½`, then
/// `φ(2B) = ½(e^B + I)φ(B)` and `e^{2B} = (e^B)²`.
pub fn expm_phi(m: &DMatrix<C64>, want_phi: bool) -> (DMatrix<C64>, Option<DMatrix<C64>>) {
    const TERMS: usize = 20;
    let n = m.nrows();
    let norm = one_norm(m);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let b = m.unscale(2f64.powi(squarings));
    let id = identity(n);
    let mut power = id.clone();
    let mut e = id.clone();
    let mut p = id.clone();
    let mut fact = 1.0;
    for k in 1..=TERMS {
        power = &power * &b;
        fact *= k as f64;
        e += power.unscale(fact);
        if want_phi {
            p += power.unscale(fact * (k + 1) as f64);
        }
    }
    for _ in 0..squarings {
        if want_phi {
            p = (&e + &id) * &p * C64::new(0.5, 0.0);
        }
        e = &e * &e;
    }
    (e, want_phi.then_some(p))
}

struct Expm {
    matrix: DMatrix<C64>,
    method: &'static str,
}

impl PreparedSemigroup for Expm {
    fn method(&self) -> &'static str {
        self.method
    }

    fn propagator(&self, s: f64) -> Result<Evaluation> {
        Ok(Evaluation {
            matrix: expm_phi(&self.matrix.scale(s), false).0,
            method: self.method,
        })
    }

    fn average(&self, t: f64) -> Result<Evaluation> {
        Ok(Evaluation {
            matrix: expm_phi(&self.matrix.scale(t), true).1.expect("requested"),
            method: self.method,
        })
    }

    fn eigenvalues(&self) -> Vec<C64> {
        Schur::try_new(self.matrix.clone(), f64::EPSILON, 0)
            .map(|s| s.unpack().1.diagonal().iter().copied().collect())
            .unwrap_or_default()
    }
}

pub struct ExpmEvaluator;

impl Named for ExpmEvaluator {
    fn name(&self) -> &'static str {
        "expm"
    }
}

impl SemigroupEvaluator for ExpmEvaluator {
    fn prepare(&self, g: &Generator) -> Result<Box<dyn PreparedSemigroup>> {
        Ok(Box::new(Expm {
            matrix: g.matrix.clone(),
            method: "expm",
        }))
    }
}

// ---------------------------------------------------------------------------
// Quadrature over s
// ---------------------------------------------------------------------------

/// Composite Simpson over `s ∈ [0, t]`, doubling the panel count from 64 until
/// successive estimates agree.
struct Simpson {
    matrix: DMatrix<C64>,
}

const SIMPSON_MIN_PANELS: usize = 64;
const SIMPSON_MAX_PANELS: usize = 1 << 14;
const SIMPSON_TOL: f64 = 1e-10;

impl Simpson {
    fn rule(&self, t: f64, panels: usize) -> DMatrix<C64> {
        let h = t / panels as f64;
        let step = expm_phi(&self.matrix.scale(h), false).0;
        let n = self.matrix.nrows();
        let mut current = identity(n);
        let mut acc = DMatrix::<C64>::zeros(n, n);
        for (k, w) in simpson_weights(panels, h).into_iter().enumerate() {
            if k > 0 {
                current = &current * &step;
            }
            acc += current.scale(w);
        }
        acc.unscale(t)
    }
}

impl PreparedSemigroup for Simpson {
    fn method(&self) -> &'static str {
        "simpson"
    }

    fn propagator(&self, s: f64) -> Result<Evaluation> {
        Ok(Evaluation {
            matrix: expm_phi(&self.matrix.scale(s), false).0,
            method: "expm",
        })
    }

    fn average(&self, t: f64) -> Result<Evaluation> {
        let mut panels = SIMPSON_MIN_PANELS;
        let mut prev = self.rule(t, panels);
        loop {
            panels *= 2;
            let next = self.rule(t, panels);
            let change = (&next - &prev).camax();
            if change < SIMPSON_TOL {
                return Ok(Evaluation {
                    matrix: next,
                    method: "simpson",
                });
            }
            if panels >= SIMPSON_MAX_PANELS {
                return Err(Error::Quadrature {
                    achieved: change,
                    requested: SIMPSON_TOL,
                });
            }
            prev = next;
        }
    }

    fn eigenvalues(&self) -> Vec<C64> {
        Expm {
            matrix: self.matrix.clone(),
            method: "simpson",
        }
        .eigenvalues()
    }
}

pub struct SimpsonEvaluator;

impl Named for SimpsonEvaluator {
    fn name(&self) -> &'static str {
        "simpson"
    }
}

impl SemigroupEvaluator for SimpsonEvaluator {
    fn prepare(&self, g: &Generator) -> Result<Box<dyn PreparedSemigroup>> {
        Ok(Box::new(Simpson {
            matrix: g.matrix.clone(),
        }))
    }
}

pub fn evaluator_registry() -> Registry<dyn SemigroupEvaluator> {
    let mut reg: Registry<dyn SemigroupEvaluator> = Registry::new("semigroup evaluator");
    reg.register(Arc::new(EigenEvaluator));
    reg.register(Arc::new(ExpmEvaluator));
    reg.register(Arc::new(SimpsonEvaluator));
    reg
}
