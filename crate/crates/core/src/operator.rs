// Copyright 2026 The qmarkov Authors
// SPDX-License-Identifier: Apache-2.0

//! Operator algebra on `n` qubits.
//!
//! Basis states are little-endian: qubit `q` is bit `q` of the basis index, so
//! qubit 0 is the least significant tensor factor. Every routine in the crate
//! (embedding, partial traces, Pauli strings) follows this convention.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type Operator = DMatrix<C64>;

/// Absolute tolerance for Hermiticity and positivity checks.
pub const HERMITIAN_TOL: f64 = 1e-10;
pub const POSITIVITY_TOL: f64 = 1e-10;
/// Tolerance on the completeness relation of a Kraus set.
pub const COMPLETENESS_TOL: f64 = 1e-10;

pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };
pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub const IM: C64 = C64 { re: 0.0, im: 1.0 };

pub fn qubits_for_dim(dim: usize) -> Result<usize> {
    if dim == 0 || !dim.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(dim));
    }
    Ok(dim.trailing_zeros() as usize)
}

pub fn identity(dim: usize) -> Operator {
    Operator::identity(dim, dim)
}

pub fn trace(op: &Operator) -> C64 {
    op.diagonal().iter().sum()
}

/// `Tr[a b]` without forming the product.
pub fn trace_product(a: &Operator, b: &Operator) -> C64 {
    let d = a.nrows();
    let mut acc = ZERO;
    for i in 0..d {
        for k in 0..d {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Largest entrywise deviation `|A - A†|`.
pub fn hermitian_deviation(op: &Operator) -> f64 {
    let d = op.nrows();
    let mut worst = 0.0f64;
    for i in 0..d {
        for j in i..d {
            worst = worst.max((op[(i, j)] - op[(j, i)].conj()).norm());
        }
    }
    worst
}

pub fn hermitian_part(op: &Operator) -> Operator {
    (op + op.adjoint()).scale(0.5)
}

/// Eigendecomposition of a Hermitian operator, eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct HermitianEigen {
    pub values: DVector<f64>,
    pub vectors: Operator,
}

impl HermitianEigen {
    pub fn new(op: &Operator) -> Self {
        let eig = hermitian_part(op).symmetric_eigen();
        let d = op.nrows();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = DVector::from_iterator(d, order.iter().map(|&k| eig.eigenvalues[k]));
        let mut vectors = Operator::zeros(d, d);
        for (col, &k) in order.iter().enumerate() {
            vectors.set_column(col, &eig.eigenvectors.column(k));
        }
        Self { values, vectors }
    }

    /// `V f(Λ) V†`.
    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Operator {
        let d = self.values.len();
        let mut scaled = self.vectors.clone();
        for k in 0..d {
            let w = f(self.values[k]);
            scaled.column_mut(k).scale_mut(w);
        }
        scaled * self.vectors.adjoint()
    }
}

pub fn singular_values(op: &Operator) -> Vec<f64> {
    op.clone().svd(false, false).singular_values.iter().copied().collect()
}

/// Sum of singular values.
pub fn trace_norm(op: &Operator) -> f64 {
    singular_values(op).iter().sum()
}

/// Largest singular value.
pub fn op_norm(op: &Operator) -> f64 {
    singular_values(op).iter().copied().fold(0.0, f64::max)
}

pub fn frobenius(op: &Operator) -> f64 {
    op.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// The unitary factor `W` of the polar decomposition `op = W |op|`.
pub fn polar_unitary(op: &Operator) -> Operator {
    let svd = op.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    u * v_t
}

/// Square root of a positive semidefinite operator; negative eigenvalues are clipped to zero.
pub fn sqrt_psd(op: &Operator) -> Operator {
    HermitianEigen::new(op).map(|x| x.max(0.0).sqrt())
}

/// `Σ_i K_i† K_i`.
pub fn kraus_completeness(kraus: &[Operator]) -> Operator {
    let d = kraus[0].nrows();
    kraus
        .iter()
        .fold(Operator::zeros(d, d), |acc, k| acc + k.adjoint() * k)
}

/// Distributes the bits of `local` onto the global qubit positions `positions`.
#[inline]
pub(crate) fn spread_bits(local: usize, positions: &[usize]) -> usize {
    positions
        .iter()
        .enumerate()
        .fold(0, |acc, (j, &q)| acc | (((local >> j) & 1) << q))
}

pub(crate) fn validate_region(region: &[usize], n: usize) -> Result<()> {
    for (i, &q) in region.iter().enumerate() {
        if q >= n {
            return Err(Error::IndexOutOfRange { index: q, n });
        }
        if region[..i].contains(&q) {
            return Err(Error::InvalidRegion(format!("qubit {q} listed twice")));
        }
    }
    Ok(())
}

pub fn complement(region: &[usize], n: usize) -> Vec<usize> {
    (0..n).filter(|q| !region.contains(q)).collect()
}

/// Embeds an operator acting on `region` into `n` qubits, acting as identity elsewhere.
///
/// Local bit `j` of `op` corresponds to global qubit `region[j]`.
pub fn embed(op: &Operator, region: &[usize], n: usize) -> Result<Operator> {
    validate_region(region, n)?;
    let local_dim = 1usize << region.len();
    if op.nrows() != local_dim || op.ncols() != local_dim {
        return Err(Error::DimensionMismatch {
            expected: local_dim,
            got: op.nrows(),
        });
    }
    let rest = complement(region, n);
    let dim = 1usize << n;
    let local_masks: Vec<usize> = (0..local_dim).map(|l| spread_bits(l, region)).collect();
    let mut out = Operator::zeros(dim, dim);
    for e in 0..(1usize << rest.len()) {
        let base = spread_bits(e, &rest);
        for (c, &cm) in local_masks.iter().enumerate() {
            for (r, &rm) in local_masks.iter().enumerate() {
                let v = op[(r, c)];
                if v != ZERO {
                    out[(base | rm, base | cm)] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Partial trace keeping the qubits in `keep`; local bit `j` of the result is qubit `keep[j]`.
pub fn partial_trace(op: &Operator, keep: &[usize], n: usize) -> Result<Operator> {
    validate_region(keep, n)?;
    let dim = 1usize << n;
    if op.nrows() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: op.nrows(),
        });
    }
    let traced = complement(keep, n);
    let kd = 1usize << keep.len();
    let keep_masks: Vec<usize> = (0..kd).map(|l| spread_bits(l, keep)).collect();
    let mut out = Operator::zeros(kd, kd);
    for e in 0..(1usize << traced.len()) {
        let base = spread_bits(e, &traced);
        for (j, &jm) in keep_masks.iter().enumerate() {
            for (i, &im) in keep_masks.iter().enumerate() {
                out[(i, j)] += op[(base | im, base | jm)];
            }
        }
    }
    Ok(out)
}

/// Kronecker product in the little-endian convention: `low` occupies the low qubits.
pub fn tensor(low: &Operator, high: &Operator) -> Operator {
    high.kronecker(low)
}

// ---------------------------------------------------------------------------
// Pauli strings
// ---------------------------------------------------------------------------

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

impl Pauli {
    pub const ALL: [Pauli; 4] = [Pauli::I, Pauli::X, Pauli::Y, Pauli::Z];
    pub const NONTRIVIAL: [Pauli; 3] = [Pauli::X, Pauli::Y, Pauli::Z];

    pub fn to_char(self) -> char {
        match self {
            Pauli::I => 'I',
            Pauli::X => 'X',
            Pauli::Y => 'Y',
            Pauli::Z => 'Z',
        }
    }

    pub fn from_char(c: char) -> Option<Pauli> {
        match c.to_ascii_uppercase() {
            'I' => Some(Pauli::I),
            'X' => Some(Pauli::X),
            'Y' => Some(Pauli::Y),
            'Z' => Some(Pauli::Z),
            _ => None,
        }
    }

    fn flips(self) -> bool {
        matches!(self, Pauli::X | Pauli::Y)
    }

    /// `⟨b ⊕ flip| P |b⟩`.
    fn amplitude(self, bit: usize) -> C64 {
        match (self, bit) {
            (Pauli::I, _) | (Pauli::X, _) => ONE,
            (Pauli::Z, 0) => ONE,
            (Pauli::Z, _) => -ONE,
            (Pauli::Y, 0) => IM,
            (Pauli::Y, _) => -IM,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    PlusOne,
    PlusI,
    MinusOne,
    MinusI,
}

impl Phase {
    pub fn value(self) -> C64 {
        match self {
            Phase::PlusOne => ONE,
            Phase::PlusI => IM,
            Phase::MinusOne => -ONE,
            Phase::MinusI => -IM,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Phase::PlusOne => "",
            Phase::PlusI => "i",
            Phase::MinusOne => "-",
            Phase::MinusI => "-i",
        }
    }
}

/// A tensor product of single-qubit Paulis with a unit phase. `letters[q]` acts on qubit `q`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PauliString {
    letters: Vec<Pauli>,
    phase: Phase,
}

impl PauliString {
    pub fn new(letters: Vec<Pauli>) -> Result<Self> {
        if letters.is_empty() {
            return Err(Error::InvalidParameter(
                "Pauli string needs at least one qubit".into(),
            ));
        }
        Ok(Self {
            letters,
            phase: Phase::PlusOne,
        })
    }

    pub fn with_phase(mut self, phase: Phase) -> Self {
        self.phase = phase;
        self
    }

    pub fn identity(n: usize) -> Self {
        Self {
            letters: vec![Pauli::I; n],
            phase: Phase::PlusOne,
        }
    }

    pub fn single(n: usize, qubit: usize, p: Pauli) -> Result<Self> {
        if qubit >= n {
            return Err(Error::IndexOutOfRange { index: qubit, n });
        }
        let mut s = Self::identity(n);
        s.letters[qubit] = p;
        Ok(s)
    }

    /// Places `letters[j]` on qubit `region[j]`.
    pub fn on_region(n: usize, region: &[usize], letters: &[Pauli]) -> Result<Self> {
        validate_region(region, n)?;
        let mut s = Self::identity(n);
        for (&q, &p) in region.iter().zip(letters) {
            s.letters[q] = p;
        }
        Ok(s)
    }

    pub fn qubit_count(&self) -> usize {
        self.letters.len()
    }

    pub fn letters(&self) -> &[Pauli] {
        &self.letters
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn support(&self) -> Vec<usize> {
        self.letters
            .iter()
            .enumerate()
            .filter(|(_, &p)| p != Pauli::I)
            .map(|(q, _)| q)
            .collect()
    }

    pub fn weight(&self) -> usize {
        self.support().len()
    }

    pub fn to_dense(&self) -> Operator {
        let n = self.letters.len();
        let dim = 1usize << n;
        let flip = self
            .letters
            .iter()
            .enumerate()
            .filter(|(_, p)| p.flips())
            .fold(0usize, |m, (q, _)| m | (1 << q));
        let phase = self.phase.value();
        let mut out = Operator::zeros(dim, dim);
        for b in 0..dim {
            let amp = self
                .letters
                .iter()
                .enumerate()
                .fold(phase, |acc, (q, p)| acc * p.amplitude((b >> q) & 1));
            out[(b ^ flip, b)] = amp;
        }
        out
    }
}

impl fmt::Display for PauliString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.phase.prefix())?;
        for p in &self.letters {
            write!(f, "{}", p.to_char())?;
        }
        Ok(())
    }
}

impl FromStr for PauliString {
    type Err = Error;

    /// Parses strings such as `XIZ`, `-YY` or `iXZ`; character `q` acts on qubit `q`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (phase, body) = if let Some(rest) = s.strip_prefix("-i") {
            (Phase::MinusI, rest)
        } else if let Some(rest) = s.strip_prefix("+i") {
            (Phase::PlusI, rest)
        } else if let Some(rest) = s.strip_prefix('i') {
            (Phase::PlusI, rest)
        } else if let Some(rest) = s.strip_prefix('-') {
            (Phase::MinusOne, rest)
        } else if let Some(rest) = s.strip_prefix('+') {
            (Phase::PlusOne, rest)
        } else {
            (Phase::PlusOne, s)
        };
        let letters = body
            .chars()
            .map(|c| {
                Pauli::from_char(c)
                    .ok_or_else(|| Error::InvalidParameter(format!("bad Pauli letter '{c}' in '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PauliString::new(letters)?.with_phase(phase))
    }
}

impl Serialize for PauliString {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PauliString {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The single-site Paulis `X_q, Y_q, Z_q` for every `q` in `region`.
pub fn single_site_paulis(region: &[usize], n: usize) -> Result<Vec<PauliString>> {
    validate_region(region, n)?;
    let mut out = Vec::with_capacity(3 * region.len());
    for &q in region {
        for p in Pauli::NONTRIVIAL {
            out.push(PauliString::single(n, q, p)?);
        }
    }
    Ok(out)
}

/// All `4^|region|` Pauli strings supported on `region`, identity first.
pub fn paulis_on(region: &[usize], n: usize) -> Result<Vec<PauliString>> {
    validate_region(region, n)?;
    let k = region.len();
    let mut out = Vec::with_capacity(1 << (2 * k));
    for code in 0..(1usize << (2 * k)) {
        let letters: Vec<Pauli> = (0..k).map(|j| Pauli::ALL[(code >> (2 * j)) & 3]).collect();
        out.push(PauliString::on_region(n, region, &letters)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// States, regions, Kraus sets
// ---------------------------------------------------------------------------

/// A validated density matrix on `n` qubits.
#[derive(Clone, Debug)]
pub struct DensityMatrix {
    op: Operator,
    n: usize,
    trace_tol: f64,
}

impl DensityMatrix {
    pub const DEFAULT_TRACE_TOL: f64 = 1e-10;

    pub fn new(op: Operator) -> Result<Self> {
        Self::with_trace_tol(op, Self::DEFAULT_TRACE_TOL)
    }

    pub fn with_trace_tol(op: Operator, trace_tol: f64) -> Result<Self> {
        if op.nrows() != op.ncols() {
            return Err(Error::NotAState("matrix is not square".into()));
        }
        let n = qubits_for_dim(op.nrows())?;
        let dev = hermitian_deviation(&op);
        if dev > HERMITIAN_TOL {
            return Err(Error::NotAState(format!("not Hermitian (deviation {dev:.3e})")));
        }
        let tr = trace(&op).re;
        if (tr - 1.0).abs() > trace_tol {
            return Err(Error::NotAState(format!("trace {tr:.12} differs from 1")));
        }
        let min_eig = HermitianEigen::new(&op).values[0];
        if min_eig < -POSITIVITY_TOL {
            return Err(Error::NotAState(format!("negative eigenvalue {min_eig:.3e}")));
        }
        Ok(Self { op, n, trace_tol })
    }

    /// Wraps an operator known to be a state by construction, symmetrizing round-off.
    pub(crate) fn from_trusted(op: Operator) -> Self {
        let n = qubits_for_dim(op.nrows()).expect("power-of-two dimension");
        Self {
            op: hermitian_part(&op),
            n,
            trace_tol: Self::DEFAULT_TRACE_TOL,
        }
    }

    pub fn maximally_mixed(n: usize) -> Self {
        let d = 1usize << n;
        Self::from_trusted(identity(d).unscale(d as f64))
    }

    pub fn pure(amplitudes: &DVector<C64>) -> Result<Self> {
        let norm = amplitudes.norm();
        if norm == 0.0 {
            return Err(Error::NotAState("zero vector".into()));
        }
        let v = amplitudes.unscale(norm);
        Self::new(&v * v.adjoint())
    }

    pub fn basis_state(n: usize, index: usize) -> Result<Self> {
        let d = 1usize << n;
        if index >= d {
            return Err(Error::IndexOutOfRange { index, n: d });
        }
        let mut op = Operator::zeros(d, d);
        op[(index, index)] = ONE;
        Ok(Self::from_trusted(op))
    }

    pub fn matrix(&self) -> &Operator {
        &self.op
    }

    pub fn into_matrix(self) -> Operator {
        self.op
    }

    pub fn qubits(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.op.nrows()
    }

    pub fn trace_tol(&self) -> f64 {
        self.trace_tol
    }

    pub fn partial_trace(&self, keep: &[usize]) -> Result<DensityMatrix> {
        Ok(Self::from_trusted(partial_trace(&self.op, keep, self.n)?))
    }

    /// `self ⊗ other` with `self` on the low qubits.
    pub fn tensor(&self, other: &DensityMatrix) -> DensityMatrix {
        Self::from_trusted(tensor(&self.op, &other.op))
    }

    /// Convex combination `p self + (1-p) other`.
    pub fn mix(&self, p: f64, other: &DensityMatrix) -> Result<DensityMatrix> {
        if !(0.0..=1.0).contains(&p) || self.dim() != other.dim() {
            return Err(Error::InvalidParameter(format!("bad mixture weight {p}")));
        }
        Ok(Self::from_trusted(
            self.op.scale(p) + other.op.scale(1.0 - p),
        ))
    }

    pub fn expectation(&self, obs: &Operator) -> C64 {
        trace_product(&self.op, obs)
    }
}

/// A tripartition `ABC` of `n` qubits into disjoint sorted index lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tripartition {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub c: Vec<usize>,
}

impl Tripartition {
    pub fn new(n: usize, a: &[usize], b: &[usize], c: &[usize]) -> Result<Self> {
        let mut seen = vec![None::<char>; n];
        for (label, part) in [('A', a), ('B', b), ('C', c)] {
            for &q in part {
                if q >= n {
                    return Err(Error::IndexOutOfRange { index: q, n });
                }
                if let Some(prev) = seen[q] {
                    return Err(Error::InvalidRegion(format!(
                        "qubit {q} appears in both {prev} and {label}"
                    )));
                }
                seen[q] = Some(label);
            }
        }
        let missing: Vec<usize> = (0..n).filter(|&q| seen[q].is_none()).collect();
        if !missing.is_empty() {
            return Err(Error::InvalidRegion(format!(
                "qubits {missing:?} are not covered by A, B or C"
            )));
        }
        if a.is_empty() {
            return Err(Error::InvalidRegion("region A is empty".into()));
        }
        let sorted = |v: &[usize]| {
            let mut v = v.to_vec();
            v.sort_unstable();
            v
        };
        Ok(Self {
            a: sorted(a),
            b: sorted(b),
            c: sorted(c),
        })
    }

    pub fn qubits(&self) -> usize {
        self.a.len() + self.b.len() + self.c.len()
    }

    pub fn ab(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.a.iter().chain(&self.b).copied().collect();
        v.sort_unstable();
        v
    }
}

/// A Kraus list `{K_i}` acting on `n` qubits, each `K_i` supported on `support`.
#[derive(Clone, Debug)]
pub struct MeasurementChannel {
    kraus: Vec<Operator>,
    support: Vec<usize>,
    n: usize,
    completeness_residual: f64,
}

impl MeasurementChannel {
    /// Builds the channel from Kraus operators acting on `support` only.
    pub fn from_local(local: &[Operator], support: &[usize], n: usize) -> Result<Self> {
        if local.is_empty() {
            return Err(Error::InvalidParameter("empty Kraus set".into()));
        }
        let kraus = local
            .iter()
            .map(|k| embed(k, support, n))
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(kraus, support.to_vec(), n)
    }

    /// Builds the channel from full `n`-qubit Kraus operators, verifying their support.
    pub fn from_full(kraus: Vec<Operator>, support: &[usize], n: usize) -> Result<Self> {
        validate_region(support, n)?;
        if kraus.is_empty() {
            return Err(Error::InvalidParameter("empty Kraus set".into()));
        }
        let outside = complement(support, n);
        for (i, k) in kraus.iter().enumerate() {
            if k.nrows() != 1 << n {
                return Err(Error::DimensionMismatch {
                    expected: 1 << n,
                    got: k.nrows(),
                });
            }
            if let Some(q) = first_acting_qubit(k, &outside, n)? {
                return Err(Error::SupportViolation(format!(
                    "Kraus operator {i} acts on qubit {q} outside the support {support:?}"
                )));
            }
        }
        Self::assemble(kraus, support.to_vec(), n)
    }

    fn assemble(kraus: Vec<Operator>, support: Vec<usize>, n: usize) -> Result<Self> {
        let d = 1usize << n;
        let residual = op_norm(&(kraus_completeness(&kraus) - identity(d)));
        if residual > COMPLETENESS_TOL {
            return Err(Error::Incomplete(residual));
        }
        Ok(Self {
            kraus,
            support,
            n,
            completeness_residual: residual,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            kraus: vec![identity(1 << n)],
            support: Vec::new(),
            n,
            completeness_residual: 0.0,
        }
    }

    /// Projective measurement in the computational basis of `sites`.
    pub fn computational_basis(sites: &[usize], n: usize) -> Result<Self> {
        let k = 1usize << sites.len();
        let local: Vec<Operator> = (0..k)
            .map(|i| {
                let mut p = Operator::zeros(k, k);
                p[(i, i)] = ONE;
                p
            })
            .collect();
        Self::from_local(&local, sites, n)
    }

    /// Depolarizing noise of strength `p` on `sites`: `(1-p) X + p I/d ⊗ Tr_sites[X]`.
    pub fn depolarizing(sites: &[usize], n: usize, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!("depolarizing strength {p}")));
        }
        let paulis = paulis_on(sites, n)?;
        let m = paulis.len() as f64;
        let kraus: Vec<Operator> = paulis
            .iter()
            .enumerate()
            .filter_map(|(idx, s)| {
                let w = if idx == 0 { 1.0 - p + p / m } else { p / m };
                (w > 0.0).then(|| s.to_dense().scale(w.sqrt()))
            })
            .collect();
        Self::from_full(kraus, sites, n)
    }

    pub fn kraus(&self) -> &[Operator] {
        &self.kraus
    }

    pub fn len(&self) -> usize {
        self.kraus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kraus.is_empty()
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn qubits(&self) -> usize {
        self.n
    }

    pub fn completeness_residual(&self) -> f64 {
        self.completeness_residual
    }
}

/// Returns the first qubit in `candidates` on which `op` acts non-trivially.
///
/// `op` acts as identity on qubit `q` iff it commutes with `X_q` and `Z_q`.
pub(crate) fn first_acting_qubit(op: &Operator, candidates: &[usize], n: usize) -> Result<Option<usize>> {
    let scale = op_norm(op).max(1.0);
    for &q in candidates {
        for p in [Pauli::X, Pauli::Z] {
            let pd = PauliString::single(n, q, p)?.to_dense();
            let comm = &pd * op - op * &pd;
            if comm.camax() > 1e-10 * scale {
                return Ok(Some(q));
            }
        }
    }
    Ok(None)
}

/// Splits `X` with `‖X‖ ≤ 1` as `K₁†K₁ − K₂†K₂ + iK₃†K₃ − iK₄†K₄`.
///
/// The Hermitian and anti-Hermitian parts are each split into their positive and
/// negative spectral parts; every `K` is the square root of one of those parts.
pub fn four_kraus_decomposition(x: &Operator) -> Result<[Operator; 4]> {
    let norm = op_norm(x);
    if norm > 1.0 + 1e-10 {
        return Err(Error::NormViolation { norm, bound: 1.0 });
    }
    let re = hermitian_part(x);
    let im = (x - x.adjoint()).scale(0.5) * (-IM);
    let re_eig = HermitianEigen::new(&re);
    let im_eig = HermitianEigen::new(&im);
    Ok([
        re_eig.map(|v| v.max(0.0).sqrt()),
        re_eig.map(|v| (-v).max(0.0).sqrt()),
        im_eig.map(|v| v.max(0.0).sqrt()),
        im_eig.map(|v| (-v).max(0.0).sqrt()),
    ])
}

/// Reassembles `K₁†K₁ − K₂†K₂ + iK₃†K₃ − iK₄†K₄`.
pub fn reassemble_four_kraus(ks: &[Operator; 4]) -> Operator {
    let sq = |k: &Operator| k.adjoint() * k;
    sq(&ks[0]) - sq(&ks[1]) + (sq(&ks[2]) - sq(&ks[3])) * IM
}

/// Spectral projectors of a Hermitian observable on `support`.
#[derive(Clone, Debug)]
pub struct ObservableMeasurement {
    pub channel: MeasurementChannel,
    /// Projector onto the nonnegative eigenspace, local to the support.
    pub positive: Operator,
    /// Projector onto the negative eigenspace, local to the support.
    pub negative: Operator,
}

/// Two-outcome measurement `{P, Q}` onto the nonnegative and negative eigenspaces of `obs`.
///
/// An empty eigenspace yields an explicit zero Kraus operator.
pub fn measurement_from_observable(
    obs: &Operator,
    support: &[usize],
    n: usize,
) -> Result<ObservableMeasurement> {
    let dev = hermitian_deviation(obs);
    if dev > HERMITIAN_TOL {
        return Err(Error::NotHermitian(dev));
    }
    let eig = HermitianEigen::new(obs);
    // Exact zeros of a difference of states land on the nonnegative side.
    let floor = -1e-13 * op_norm(obs).max(1.0);
    let positive = eig.map(|v| if v >= floor { 1.0 } else { 0.0 });
    let negative = eig.map(|v| if v >= floor { 0.0 } else { 1.0 });
    let channel = MeasurementChannel::from_local(&[positive.clone(), negative.clone()], support, n)?;
    Ok(ObservableMeasurement {
        channel,
        positive,
        negative,
    })
}

// ---------------------------------------------------------------------------
// Random ensembles
// ---------------------------------------------------------------------------

pub mod random {
    //! Seeded random operators used by estimators and tests.

    use super::*;

    pub fn gaussian_complex<R: Rng + ?Sized>(rng: &mut R) -> C64 {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
    }

    pub fn ginibre<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Operator {
        Operator::from_fn(dim, dim, |_, _| gaussian_complex(rng))
    }

    /// Haar-random unitary via QR of a Ginibre matrix with the phase correction.
    pub fn unitary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Operator {
        let qr = ginibre(dim, rng).qr();
        let (mut q, r) = qr.unpack();
        for k in 0..dim {
            let d = r[(k, k)];
            let phase = if d.norm() > 0.0 { d / d.norm() } else { ONE };
            let col = q.column(k) * phase;
            q.set_column(k, &col);
        }
        q
    }

    pub fn hermitian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Operator {
        hermitian_part(&ginibre(dim, rng))
    }

    pub fn pure_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<C64> {
        let v = DVector::from_fn(dim, |_, _| gaussian_complex(rng));
        let norm = v.norm();
        v.unscale(norm)
    }

    /// Full-rank state `G G† / Tr[G G†]`.
    pub fn density<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DensityMatrix {
        let g = ginibre(1 << n, rng);
        let rho = &g * g.adjoint();
        let tr = trace(&rho).re;
        DensityMatrix::from_trusted(rho.unscale(tr))
    }

    pub fn pure_state<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DensityMatrix {
        let v = pure_vector(1 << n, rng);
        DensityMatrix::from_trusted(&v * v.adjoint())
    }

    /// A random operator with operator norm drawn uniformly from `(0, 1]`.
    pub fn contraction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Operator {
        let g = ginibre(dim, rng);
        let target: f64 = 1.0 - rng.random::<f64>();
        let norm = op_norm(&g);
        g.scale(target / norm)
    }

    /// A random complete Kraus set of `k` operators on `dim` dimensions.
    pub fn kraus_set<R: Rng + ?Sized>(dim: usize, k: usize, rng: &mut R) -> Vec<Operator> {
        let raw: Vec<Operator> = (0..k).map(|_| ginibre(dim, rng)).collect();
        let s = kraus_completeness(&raw);
        let inv_sqrt = HermitianEigen::new(&s).map(|v| 1.0 / v.sqrt());
        raw.into_iter().map(|g| g * &inv_sqrt).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pauli(s: &str) -> Operator {
        s.parse::<PauliString>().unwrap().to_dense()
    }

    fn diag(values: &[f64]) -> Operator {
        Operator::from_diagonal(&DVector::from_iterator(
            values.len(),
            values.iter().map(|&v| C64::new(v, 0.0)),
        ))
    }

    #[test]
    fn pauli_letters_follow_little_endian_order() {
        // "XI": X on qubit 0 flips the least significant bit.
        let xi = pauli("XI");
        assert_eq!(xi[(1, 0)], ONE);
        assert_eq!(xi[(0, 1)], ONE);
        assert_eq!(xi[(2, 0)], ZERO);
        let y = pauli("Y");
        assert_eq!(y[(1, 0)], IM);
        assert_eq!(y[(0, 1)], -IM);
    }

    #[test]
    fn pauli_strings_square_to_identity() {
        for s in ["XYZ", "YYI", "ZXY", "-YZ"] {
            let p = pauli(s);
            assert_abs_diff_eq!((&p * &p - identity(p.nrows())).camax(), 0.0, epsilon = 1e-15);
        }
        let ip = pauli("iX");
        assert_abs_diff_eq!((&ip * &ip + identity(2)).camax(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn pauli_string_round_trips_through_text() {
        for s in ["XIZ", "-YY", "iZ", "-iXY"] {
            let p: PauliString = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        assert!("XQ".parse::<PauliString>().is_err());
    }

    #[test]
    fn embed_places_operator_on_region() {
        let x = pauli("X");
        assert_eq!(embed(&x, &[0], 2).unwrap(), pauli("XI"));
        assert_eq!(embed(&identity(2), &[1], 3).unwrap(), identity(8));
        // Z on qubit 1 applied to |01⟩ (qubit 0 = 1, qubit 1 = 0 → index 1) gives +, and to
        // the state with qubit 1 set (index 2) gives -.
        let z1 = embed(&pauli("Z"), &[1], 2).unwrap();
        assert_eq!(z1[(2, 2)], -ONE);
        assert_eq!(z1[(1, 1)], ONE);
        assert_abs_diff_eq!(op_norm(&embed(&x.scale(0.3), &[1], 3).unwrap()), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn embed_rejects_bad_input() {
        assert!(matches!(
            embed(&identity(2), &[3], 2),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            embed(&identity(4), &[0], 2),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn partial_trace_of_product_and_bell_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ra = random::density(1, &mut rng);
        let rb = random::density(2, &mut rng);
        let prod = ra.tensor(&rb);
        let back = prod.partial_trace(&[0]).unwrap();
        assert_abs_diff_eq!((back.matrix() - ra.matrix()).camax(), 0.0, epsilon = 1e-14);
        let back_b = prod.partial_trace(&[1, 2]).unwrap();
        assert_abs_diff_eq!((back_b.matrix() - rb.matrix()).camax(), 0.0, epsilon = 1e-14);

        let s = std::f64::consts::FRAC_1_SQRT_2;
        let bell = DVector::from_vec(vec![C64::new(s, 0.0), ZERO, ZERO, C64::new(s, 0.0)]);
        let bell = DensityMatrix::pure(&bell).unwrap();
        let marg = bell.partial_trace(&[0]).unwrap();
        assert_abs_diff_eq!((marg.matrix() - identity(2).scale(0.5)).camax(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn partial_trace_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rho = random::density(4, &mut rng);
        let once = partial_trace(rho.matrix(), &[0, 3], 4).unwrap();
        let step = partial_trace(rho.matrix(), &[0, 1, 3], 4).unwrap();
        // qubits in `step` are ordered [0, 1, 3]; keep local positions 0 and 2.
        let twice = partial_trace(&step, &[0, 2], 3).unwrap();
        assert_abs_diff_eq!((once - twice).camax(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn norms_of_simple_operators() {
        assert_abs_diff_eq!(trace_norm(&diag(&[1.0, -1.0])), 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(op_norm(&pauli("X")), 1.0, epsilon = 1e-14);
        let d = diag(&[1.0, 0.0]) - diag(&[0.5, 0.5]);
        assert_abs_diff_eq!(trace_norm(&d), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(frobenius(&pauli("X")), 2f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn norm_ordering_on_random_operators() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for dim in [1usize, 2, 4, 8] {
            let g = random::ginibre(dim, &mut rng);
            let (t, f, o) = (trace_norm(&g), frobenius(&g), op_norm(&g));
            assert!(t + 1e-12 >= f && f + 1e-12 >= o, "{t} {f} {o}");
        }
    }

    #[test]
    fn four_kraus_examples() {
        let p = diag(&[1.0, 0.0]);
        let ks = four_kraus_decomposition(&p).unwrap();
        assert_abs_diff_eq!((&ks[0] - &p).camax(), 0.0, epsilon = 1e-12);
        for k in &ks[1..] {
            assert_abs_diff_eq!(k.camax(), 0.0, epsilon = 1e-12);
        }
        let ks = four_kraus_decomposition(&pauli("Z")).unwrap();
        let sq = |k: &Operator| k.adjoint() * k;
        assert_abs_diff_eq!((sq(&ks[0]) - diag(&[1.0, 0.0])).camax(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!((sq(&ks[1]) - diag(&[0.0, 1.0])).camax(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ks[2].camax() + ks[3].camax(), 0.0, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random::contraction(4, &mut rng);
        let ks = four_kraus_decomposition(&x).unwrap();
        assert!(op_norm(&(reassemble_four_kraus(&ks) - &x)) < 1e-10);

        assert!(matches!(
            four_kraus_decomposition(&pauli("X").scale(1.5)),
            Err(Error::NormViolation { .. })
        ));
    }

    #[test]
    fn measurement_from_observable_examples() {
        let m = measurement_from_observable(&pauli("Z"), &[0], 1).unwrap();
        assert_abs_diff_eq!((&m.positive - diag(&[1.0, 0.0])).camax(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!((&m.negative - diag(&[0.0, 1.0])).camax(), 0.0, epsilon = 1e-14);

        let m = measurement_from_observable(&identity(2), &[0], 1).unwrap();
        assert_eq!(m.channel.len(), 2);
        assert_abs_diff_eq!((&m.positive - identity(2)).camax(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(m.negative.camax(), 0.0, epsilon = 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s1 = random::density(2, &mut rng);
        let s2 = random::density(2, &mut rng);
        let o = s1.matrix() - s2.matrix();
        let m = measurement_from_observable(&o, &[0, 1], 3).unwrap();
        let (p, q) = (&m.positive, &m.negative);
        assert!((p * p - p).camax() < 1e-12);
        assert!((q * q - q).camax() < 1e-12);
        assert!((p * q).camax() < 1e-12);
        assert!((p + q - identity(4)).camax() < 1e-12);
        assert!(m.channel.completeness_residual() <= 1e-10);
        // Helstrom: Tr[P (σ₁ - σ₂)] = ‖σ₁ - σ₂‖₁ / 2.
        assert_abs_diff_eq!(trace_product(p, &o).re, trace_norm(&o) / 2.0, epsilon = 1e-12);

        let bad = Operator::from_fn(2, 2, |i, j| if i < j { ONE } else { ZERO });
        assert!(matches!(
            measurement_from_observable(&bad, &[0], 1),
            Err(Error::NotHermitian(_))
        ));
    }

    #[test]
    fn channel_support_and_completeness_checks() {
        let x0 = pauli("XI");
        assert!(matches!(
            MeasurementChannel::from_full(vec![x0.clone()], &[1], 2),
            Err(Error::SupportViolation(_))
        ));
        assert!(MeasurementChannel::from_full(vec![x0], &[0], 2).is_ok());
        assert!(matches!(
            MeasurementChannel::from_local(&[diag(&[1.0, 0.0])], &[0], 2),
            Err(Error::Incomplete(_))
        ));
        let dep = MeasurementChannel::depolarizing(&[0, 2], 3, 0.4).unwrap();
        assert!(dep.completeness_residual() < 1e-12);
    }

    #[test]
    fn tripartition_validation_names_offenders() {
        let err = Tripartition::new(3, &[0, 1], &[1], &[2]).unwrap_err().to_string();
        assert!(err.contains("qubit 1"), "{err}");
        let err = Tripartition::new(3, &[0], &[], &[2]).unwrap_err().to_string();
        assert!(err.contains("[1]"), "{err}");
        let t = Tripartition::new(4, &[3], &[2, 0], &[1]).unwrap();
        assert_eq!(t.b, vec![0, 2]);
        assert_eq!(t.ab(), vec![0, 2, 3]);
    }

    #[test]
    fn density_matrix_validation() {
        assert!(DensityMatrix::new(diag(&[0.5, 0.5])).is_ok());
        assert!(DensityMatrix::new(diag(&[0.6, 0.5])).is_err());
        assert!(DensityMatrix::new(diag(&[1.5, -0.5])).is_err());
        assert!(DensityMatrix::new(diag(&[0.5, 0.5, 0.0])).is_err());
    }

    #[test]
    fn random_unitary_is_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random::unitary(8, &mut rng);
        assert!((u.adjoint() * &u - identity(8)).camax() < 1e-12);
        let ks = random::kraus_set(4, 3, &mut rng);
        assert!((kraus_completeness(&ks) - identity(4)).camax() < 1e-12);
    }
}
