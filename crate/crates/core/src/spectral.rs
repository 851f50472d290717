// Copyright 2026 The qmarkov Authors
// SPDX-License-Identifier: Apache-2.0

//! Hamiltonians, exact diagonalization, Gibbs states and the operator Fourier transform.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::{
    hermitian_deviation, identity, Operator, Pauli, PauliString, DensityMatrix, HermitianEigen, C64,
};
use crate::registry::{Named, Registry};

/// Bohr frequencies closer than this are treated as one frequency.
pub const BOHR_MERGE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub coeff: f64,
    pub pauli: PauliString,
}

/// Model parameters; fields a model does not use are ignored.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Nearest-neighbour coupling (default 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j: Option<f64>,
    /// Transverse (TFIM) or longitudinal (Heisenberg) field (defaults 1 and 0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    /// Locality of random terms (default 2).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianSpec {
    pub model: String,
    pub n: usize,
    pub beta: f64,
    pub params: ModelParams,
    pub seed: u64,
    pub terms: Vec<Term>,
    /// Maximum number of terms touching a single site.
    pub interaction_degree: usize,
}

impl HamiltonianSpec {
    pub fn from_terms(model: &str, n: usize, beta: f64, terms: Vec<Term>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("need at least one qubit".into()));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
        }
        for t in &terms {
            if t.pauli.qubit_count() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: t.pauli.qubit_count(),
                });
            }
            if !t.coeff.is_finite() {
                return Err(Error::InvalidParameter("non-finite coefficient".into()));
            }
            if matches!(t.pauli.phase(), crate::operator::Phase::PlusI | crate::operator::Phase::MinusI) {
                return Err(Error::NotHermitian(1.0));
            }
        }
        let interaction_degree = interaction_degree(n, &terms);
        Ok(Self {
            model: model.to_string(),
            n,
            beta,
            params: ModelParams::default(),
            seed: 0,
            terms,
            interaction_degree,
        })
    }

    pub fn matrix(&self) -> Operator {
        let d = 1usize << self.n;
        self.terms.iter().fold(Operator::zeros(d, d), |acc, t| {
            acc + t.pauli.to_dense().scale(t.coeff)
        })
    }

    /// Keeps only the terms supported inside `region`.
    pub fn restricted_to(&self, region: &[usize]) -> Self {
        let terms: Vec<Term> = self
            .terms
            .iter()
            .filter(|t| t.pauli.support().iter().all(|q| region.contains(q)))
            .cloned()
            .collect();
        Self {
            model: format!("{}|{:?}", self.model, region),
            interaction_degree: interaction_degree(self.n, &terms),
            terms,
            ..self.clone()
        }
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        Self {
            beta,
            ..self.clone()
        }
    }
}

fn interaction_degree(n: usize, terms: &[Term]) -> usize {
    (0..n)
        .map(|q| terms.iter().filter(|t| t.pauli.letters()[q] != Pauli::I).count())
        .max()
        .unwrap_or(0)
}

/// A family of Hamiltonians selectable by name.
pub trait HamiltonianModel: Named + Send + Sync {
    fn terms(&self, n: usize, params: &ModelParams, seed: u64) -> Result<Vec<Term>>;
}

fn term(n: usize, sites: &[(usize, Pauli)], coeff: f64) -> Result<Term> {
    let mut letters = vec![Pauli::I; n];
    for &(q, p) in sites {
        letters[q] = p;
    }
    Ok(Term {
        coeff,
        pauli: PauliString::new(letters)?,
    })
}

/// Open transverse-field Ising chain `Σ J Z_i Z_{i+1} + h Σ X_i`.
pub struct Tfim;

impl Named for Tfim {
    fn name(&self) -> &'static str {
        "tfim"
    }
}

impl HamiltonianModel for Tfim {
    fn terms(&self, n: usize, params: &ModelParams, _seed: u64) -> Result<Vec<Term>> {
        let j = params.j.unwrap_or(1.0);
        let h = params.h.unwrap_or(1.0);
        let mut out = Vec::new();
        for i in 0..n.saturating_sub(1) {
            if j != 0.0 {
                out.push(term(n, &[(i, Pauli::Z), (i + 1, Pauli::Z)], j)?);
            }
        }
        if h != 0.0 {
            for i in 0..n {
                out.push(term(n, &[(i, Pauli::X)], h)?);
            }
        }
        Ok(out)
    }
}

/// Open Heisenberg chain `J Σ (XX + YY + ZZ) + h Σ Z_i`.
pub struct Heisenberg;

impl Named for Heisenberg {
    fn name(&self) -> &'static str {
        "heisenberg"
    }
}

impl HamiltonianModel for Heisenberg {
    fn terms(&self, n: usize, params: &ModelParams, _seed: u64) -> Result<Vec<Term>> {
        let j = params.j.unwrap_or(1.0);
        let h = params.h.unwrap_or(0.0);
        let mut out = Vec::new();
        for i in 0..n.saturating_sub(1) {
            for p in Pauli::NONTRIVIAL {
                out.push(term(n, &[(i, p), (i + 1, p)], j)?);
            }
        }
        if h != 0.0 {
            for i in 0..n {
                out.push(term(n, &[(i, Pauli::Z)], h)?);
            }
        }
        Ok(out)
    }
}

/// Every non-identity Pauli string on each window of `k` consecutive sites,
/// with independent standard-normal coefficients.
pub struct RandomKLocal;

impl Named for RandomKLocal {
    fn name(&self) -> &'static str {
        "random_klocal"
    }
}

impl HamiltonianModel for RandomKLocal {
    fn terms(&self, n: usize, params: &ModelParams, seed: u64) -> Result<Vec<Term>> {
        let k = params.k.unwrap_or(2).clamp(1, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for start in 0..=(n - k) {
            let window: Vec<usize> = (start..start + k).collect();
            for code in 1..(1usize << (2 * k)) {
                let letters: Vec<Pauli> = (0..k).map(|j| Pauli::ALL[(code >> (2 * j)) & 3]).collect();
                // Windows overlap; a string already drawn for an earlier window is skipped.
                if start > 0 && letters[k - 1] == Pauli::I {
                    continue;
                }
                let coeff: f64 = StandardNormal.sample(&mut rng);
                out.push(Term {
                    coeff,
                    pauli: PauliString::on_region(n, &window, &letters)?,
                });
            }
        }
        Ok(out)
    }
}

pub fn model_registry() -> Registry<dyn HamiltonianModel> {
    let mut reg: Registry<dyn HamiltonianModel> = Registry::new("Hamiltonian model");
    reg.register(Arc::new(Tfim));
    reg.register(Arc::new(Heisenberg));
    reg.register(Arc::new(RandomKLocal));
    reg
}

pub fn build_hamiltonian(
    model: &str,
    n: usize,
    params: &ModelParams,
    beta: f64,
    seed: u64,
) -> Result<HamiltonianSpec> {
    let terms = model_registry().get(model)?.terms(n, params, seed)?;
    let mut spec = HamiltonianSpec::from_terms(model, n, beta, terms)?;
    spec.params = params.clone();
    spec.seed = seed;
    Ok(spec)
}

/// Merged Bohr frequencies `ν_kl = E_k − E_l`.
#[derive(Clone, Debug)]
pub struct BohrBins {
    pub freqs: Vec<f64>,
    dim: usize,
    /// Bin of the pair `(k, l)`, stored at `k * dim + l`.
    index: Vec<usize>,
}

impl BohrBins {
    fn new(energies: &DVector<f64>) -> Self {
        let dim = energies.len();
        let mut pairs: Vec<(f64, usize)> = (0..dim * dim)
            .map(|idx| (energies[idx / dim] - energies[idx % dim], idx))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut index = vec![0usize; dim * dim];
        let mut freqs = Vec::new();
        let mut start = 0;
        while start < pairs.len() {
            let mut end = start + 1;
            while end < pairs.len() && pairs[end].0 - pairs[end - 1].0 < BOHR_MERGE_TOL {
                end += 1;
            }
            let mean = pairs[start..end].iter().map(|p| p.0).sum::<f64>() / (end - start) as f64;
            for p in &pairs[start..end] {
                index[p.1] = freqs.len();
            }
            freqs.push(mean);
            start = end;
        }
        // Exactly degenerate pairs (in particular k = l) are pinned to zero.
        if let Some(zero) = freqs.iter().position(|f| f.abs() < BOHR_MERGE_TOL) {
            freqs[zero] = 0.0;
        }
        Self { freqs, dim, index }
    }

    #[inline]
    pub fn bin(&self, k: usize, l: usize) -> usize {
        self.index[k * self.dim + l]
    }

    #[inline]
    pub fn freq(&self, k: usize, l: usize) -> f64 {
        self.freqs[self.bin(k, l)]
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }
}

/// Spectral data of a Hamiltonian.
#[derive(Clone, Debug)]
pub struct EigenSystem {
    pub energies: DVector<f64>,
    pub vectors: Operator,
    pub bins: BohrBins,
}

impl EigenSystem {
    pub fn new(h: &Operator) -> Result<Self> {
        let dev = hermitian_deviation(h);
        if dev > 1e-10 {
            return Err(Error::NotHermitian(dev));
        }
        let eig = HermitianEigen::new(h);
        let bins = BohrBins::new(&eig.values);
        Ok(Self {
            energies: eig.values,
            vectors: eig.vectors,
            bins,
        })
    }

    pub fn from_spec(spec: &HamiltonianSpec) -> Result<Self> {
        Self::new(&spec.matrix())
    }

    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    /// `E_k − E_l` for the (merged) pair.
    pub fn bohr(&self, k: usize, l: usize) -> f64 {
        self.bins.freq(k, l)
    }

    /// Bohr gap matrix `ν_kl = E_k − E_l` (unmerged).
    pub fn bohr_gaps(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |k, l| self.energies[k] - self.energies[l])
    }

    pub fn to_eigenbasis(&self, op: &Operator) -> Operator {
        self.vectors.adjoint() * op * &self.vectors
    }

    pub fn from_eigenbasis(&self, op: &Operator) -> Operator {
        &self.vectors * op * self.vectors.adjoint()
    }

    pub fn reconstruction_error(&self, h: &Operator) -> f64 {
        let diag = Operator::from_diagonal(&self.energies.map(|e| C64::new(e, 0.0)));
        (h - self.from_eigenbasis(&diag)).camax()
    }

    /// `e^{iHt} · e^{-iHt}` conjugation.
    pub fn evolve(&self, op: &Operator, t: f64) -> Operator {
        let d = self.dim();
        let mut e = self.to_eigenbasis(op);
        for k in 0..d {
            for l in 0..d {
                e[(k, l)] *= C64::from_polar(1.0, (self.energies[k] - self.energies[l]) * t);
            }
        }
        self.from_eigenbasis(&e)
    }
}

/// Gibbs state `e^{-βH} / Tr e^{-βH}` from the spectrum, shifted by the ground energy.
pub fn gibbs_from_eigen(es: &EigenSystem, beta: f64) -> DensityMatrix {
    let d = es.dim();
    let e0 = es.energies[0];
    let weights: Vec<f64> = es.energies.iter().map(|e| (-beta * (e - e0)).exp()).collect();
    let z: f64 = weights.iter().sum();
    let diag = Operator::from_diagonal(&DVector::from_iterator(
        d,
        weights.iter().map(|w| C64::new(w / z, 0.0)),
    ));
    DensityMatrix::from_trusted(es.from_eigenbasis(&diag))
}

pub fn gibbs_state(spec: &HamiltonianSpec) -> Result<DensityMatrix> {
    Ok(gibbs_from_eigen(&EigenSystem::from_spec(spec)?, spec.beta))
}

/// Gaussian time filter `f_σ(t) = e^{-σ²t²} (σ √(2/π))^{1/2}`, normalised in `L²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub sigma: f64,
}

impl FilterParams {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("filter width {sigma}")));
        }
        Ok(Self { sigma })
    }

    /// Energy width `σ = 1/β`.
    pub fn for_beta(beta: f64) -> Result<Self> {
        Self::new(1.0 / beta)
    }

    pub fn time_filter(&self, t: f64) -> f64 {
        let s = self.sigma;
        (-s * s * t * t).exp() * (s * (2.0 / PI).sqrt()).sqrt()
    }

    /// `f̂(x) = ∫ f_σ(t) e^{ixt} dt`, evaluated in closed form.
    pub fn frequency_filter(&self, x: f64) -> f64 {
        let s = self.sigma;
        (s * (2.0 / PI).sqrt()).sqrt() * (PI.sqrt() / s) * (-x * x / (4.0 * s * s)).exp()
    }

    /// Weight of Bohr component `ν` in `Â(ω)`: `f̂(ν − ω) / √(2π)`.
    pub fn oft_weight(&self, nu_minus_omega: f64) -> f64 {
        self.frequency_filter(nu_minus_omega) / (2.0 * PI).sqrt()
    }
}

/// Operator Fourier transform `Â(ω)`: element `(k, l)` in the eigenbasis is `A_kl f̂(ν_kl − ω)/√(2π)`.
pub fn oft(a: &Operator, omega: f64, es: &EigenSystem, fp: &FilterParams) -> Result<Operator> {
    oft_evolved(a, omega, 0.0, es, fp)
}

/// `e^{iHt} Â(ω) e^{-iHt}`.
pub fn oft_evolved(
    a: &Operator,
    omega: f64,
    t: f64,
    es: &EigenSystem,
    fp: &FilterParams,
) -> Result<Operator> {
    let d = es.dim();
    if a.nrows() != d || a.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: a.nrows(),
        });
    }
    let mut e = es.to_eigenbasis(a);
    for k in 0..d {
        for l in 0..d {
            let nu = es.bohr(k, l);
            e[(k, l)] *= C64::from_polar(fp.oft_weight(nu - omega), nu * t);
        }
    }
    Ok(es.from_eigenbasis(&e))
}

/// `[H, X]`, used to check that states commute with the Hamiltonian.
pub fn commutator(h: &Operator, x: &Operator) -> Operator {
    h * x - x * h
}

pub fn identity_like(es: &EigenSystem) -> Operator {
    identity(es.dim())
}
