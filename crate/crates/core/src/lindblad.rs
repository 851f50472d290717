// Copyright 2026 The qmarkov Authors
// SPDX-License-Identifier: Apache-2.0

//! Detailed-balance Lindbladians built from single-site Pauli jumps, and the
//! time-averaged recovery maps they generate.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::{
    single_site_paulis, trace_norm, validate_region, DensityMatrix, Operator, PauliString, C64, IM,
};
use crate::quadrature;
use crate::registry::{Named, Registry};
use crate::semigroup::{evaluator_registry, Generator, KmsFrame, PreparedSemigroup};
use crate::spectral::{gibbs_from_eigen, EigenSystem, FilterParams, HamiltonianSpec};
use crate::superop::Superop;

/// Absolute tolerance of the per-frequency ω-integrals.
pub const ALPHA_TOL: f64 = 1e-12;
/// Absolute tolerance of the principal-value t-integrals.
pub const COHERENT_TOL: f64 = 1e-12;
/// Kernels are truncated where they fall below this value.
pub const KERNEL_FLOOR: f64 = 1e-14;

/// Shifted Metropolis weight `γ(ω) = exp(−β max(ω + βσ²/2, 0))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetropolisWeight {
    pub beta: f64,
    pub sigma: f64,
}

impl MetropolisWeight {
    pub fn new(beta: f64) -> Result<Self> {
        Self::with_sigma(beta, 1.0 / beta)
    }

    pub fn with_sigma(beta: f64, sigma: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite() && sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta {beta}, sigma {sigma}")));
        }
        Ok(Self { beta, sigma })
    }

    /// Location of the kink, `−βσ²/2`.
    pub fn kink(&self) -> f64 {
        -0.5 * self.beta * self.sigma * self.sigma
    }

    pub fn gamma(&self, omega: f64) -> f64 {
        (-self.beta * (omega - self.kink()).max(0.0)).exp()
    }
}

pub fn gamma(omega: f64, w: &MetropolisWeight) -> f64 {
    w.gamma(omega)
}

/// Odd kernel of the coherent term, `c(t) = 1/(β sinh(2πt/β))`.
pub fn coherent_time_kernel(t: f64, beta: f64) -> f64 {
    1.0 / (beta * (2.0 * PI * t / beta).sinh())
}

/// Even kernel of the detailed-balance functional, `g(t) = 1/(β cosh(2πt/β))`.
pub fn adb_time_kernel(t: f64, beta: f64) -> f64 {
    1.0 / (beta * (2.0 * PI * t / beta).cosh())
}

/// `|t|` beyond which `g(t)` is negligible: `(β/2π) ln(2/10⁻¹⁴)`.
pub fn adb_time_cutoff(beta: f64) -> f64 {
    beta / (2.0 * PI) * (2.0 / KERNEL_FLOOR).ln()
}

/// `t` beyond which `|c(t)| < 10⁻¹⁴`.
pub fn coherent_time_cutoff(beta: f64) -> f64 {
    beta / (2.0 * PI) * (1.0 / (beta * KERNEL_FLOOR)).asinh()
}

/// `G(x) = ∫ g(t) e^{ixt} dt` by composite Simpson on the truncated domain.
///
/// The node spacing keeps the first alias of the trapezoid sums beyond the
/// kernel's decay scale, which makes the rule exponentially accurate.
pub fn adb_frequency_kernel(x: f64, beta: f64) -> f64 {
    let cut = adb_time_cutoff(beta);
    let h_max = PI / (x.abs() + 140.0 / beta);
    let panels = ((2.0 * cut / h_max).ceil() as usize).max(200);
    quadrature::simpson(|t| adb_time_kernel(t, beta) * (x * t).cos(), -cut, cut, panels)
}

/// `PV ∫ c(t) e^{iΔt} dt = 2i ∫₀^∞ c(t) sin(Δt) dt`.
pub fn coherent_frequency_kernel(delta: f64, beta: f64) -> Result<C64> {
    if delta == 0.0 {
        return Ok(C64::new(0.0, 0.0));
    }
    let cut = coherent_time_cutoff(beta);
    let integrand = |t: f64| {
        if t == 0.0 {
            delta / (2.0 * PI)
        } else {
            (delta * t).sin() * coherent_time_kernel(t, beta)
        }
    };
    let est = quadrature::integrate(integrand, 0.0, cut, &[], COHERENT_TOL, 2000)?;
    Ok(IM * (2.0 * est.value))
}

/// `∫ γ(ω) ĝ(m − ω)² dω` where `ĝ²` is the normal density of width σ.
fn alpha_diagonal(m: f64, fp: &FilterParams, w: &MetropolisWeight) -> Result<f64> {
    let s = fp.sigma;
    let density = |x: f64| (-x * x / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt());
    let (lo, hi) = (m - 12.0 * s, m + 12.0 * s);
    let est = quadrature::integrate(|om| w.gamma(om) * density(m - om), lo, hi, &[w.kink()], ALPHA_TOL, 400)?;
    Ok(est.value)
}

/// Frequency-domain kernels of one Hamiltonian, tabulated over merged Bohr bins.
#[derive(Debug)]
pub struct SpectralKernels {
    pub es: Arc<EigenSystem>,
    pub fp: FilterParams,
    pub weight: MetropolisWeight,
    /// `α(ν_p, ν_q) = ∫ γ(ω) ĝ(ν_p − ω) ĝ(ν_q − ω) dω` for bins `p, q`.
    alpha: DMatrix<f64>,
    /// `PV ∫ c(t) e^{iν_p t} dt` for bin `p`.
    coherent: Vec<C64>,
}

impl SpectralKernels {
    pub fn new(es: Arc<EigenSystem>, beta: f64) -> Result<Self> {
        let fp = FilterParams::for_beta(beta)?;
        let weight = MetropolisWeight::new(beta)?;
        Self::with_params(es, fp, weight)
    }

    pub fn from_spec(spec: &HamiltonianSpec) -> Result<Self> {
        Self::new(Arc::new(EigenSystem::from_spec(spec)?), spec.beta)
    }

    pub fn with_params(es: Arc<EigenSystem>, fp: FilterParams, weight: MetropolisWeight) -> Result<Self> {
        let freqs = &es.bins.freqs;
        let nb = freqs.len();
        // Gaussian products factor as e^{-(ν-ν')²/8σ²} times a function of the mean.
        let mut means: Vec<f64> = Vec::with_capacity(nb * (nb + 1) / 2);
        for p in 0..nb {
            for q in p..nb {
                means.push(0.5 * (freqs[p] + freqs[q]));
            }
        }
        means.sort_by(f64::total_cmp);
        means.dedup_by(|a, b| a.to_bits() == b.to_bits());
        let values: Vec<f64> = means
            .par_iter()
            .map(|&m| alpha_diagonal(m, &fp, &weight))
            .collect::<Result<_>>()?;
        let table: HashMap<u64, f64> = means.iter().map(|m| m.to_bits()).zip(values).collect();
        let s2 = fp.sigma * fp.sigma;
        let alpha = DMatrix::from_fn(nb, nb, |p, q| {
            let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
            let m = 0.5 * (freqs[lo] + freqs[hi]);
            let d = freqs[p] - freqs[q];
            table[&m.to_bits()] * (-d * d / (8.0 * s2)).exp()
        });
        let coherent = freqs
            .par_iter()
            .map(|&nu| coherent_frequency_kernel(nu, weight.beta))
            .collect::<Result<_>>()?;
        Ok(Self {
            es,
            fp,
            weight,
            alpha,
            coherent,
        })
    }

    pub fn beta(&self) -> f64 {
        self.weight.beta
    }

    pub fn dim(&self) -> usize {
        self.es.dim()
    }

    #[inline]
    pub fn alpha_bins(&self, p: usize, q: usize) -> f64 {
        self.alpha[(p, q)]
    }

    /// `α` for the Bohr pairs `(i, k)` and `(j, l)`.
    #[inline]
    pub fn alpha_pairs(&self, i: usize, k: usize, j: usize, l: usize) -> f64 {
        let b = &self.es.bins;
        self.alpha[(b.bin(i, k), b.bin(j, l))]
    }

    #[inline]
    pub fn coherent_bin(&self, p: usize) -> C64 {
        self.coherent[p]
    }

    pub fn gibbs(&self) -> DensityMatrix {
        gibbs_from_eigen(&self.es, self.weight.beta)
    }

    /// Jump operator in the Hamiltonian eigenbasis.
    fn jump_eigen(&self, jump: &PauliString) -> Result<Operator> {
        let a = jump.to_dense();
        if a.nrows() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: a.nrows(),
            });
        }
        Ok(self.es.to_eigenbasis(&a))
    }

    /// `∫ γ(ω) Â(ω)†Â(ω) dω` in the eigenbasis.
    fn decay_operator(&self, a: &Operator) -> Operator {
        let d = self.dim();
        let b = &self.es.bins;
        Operator::from_fn(d, d, |i, j| {
            (0..d)
                .map(|k| a[(k, i)].conj() * a[(k, j)] * self.alpha[(b.bin(k, i), b.bin(k, j))])
                .sum()
        })
    }

    fn dissipative_eigen(&self, a: &Operator) -> DMatrix<C64> {
        let d = self.dim();
        let b = &self.es.bins;
        let mut s = DMatrix::<C64>::zeros(d * d, d * d);
        for l in 0..d {
            for k in 0..d {
                let col = k + d * l;
                for j in 0..d {
                    let ajl = a[(j, l)].conj();
                    if ajl == C64::new(0.0, 0.0) {
                        continue;
                    }
                    let bjl = b.bin(j, l);
                    for i in 0..d {
                        let aik = a[(i, k)];
                        if aik == C64::new(0.0, 0.0) {
                            continue;
                        }
                        s[(i + d * j, col)] += aik * ajl * self.alpha[(b.bin(i, k), bjl)];
                    }
                }
            }
        }
        let n = self.decay_operator(a);
        s -= (anticommutator_superop(&n)).scale(0.5);
        s
    }

    fn coherent_eigen(&self, a: &Operator) -> Operator {
        let n = self.decay_operator(a);
        let b = &self.es.bins;
        Operator::from_fn(n.nrows(), n.ncols(), |i, j| n[(i, j)] * self.coherent[b.bin(i, j)])
    }

    /// Transition and decay parts of `ℒ_a`, computational basis.
    pub fn dissipative_part(&self, jump: &PauliString) -> Result<Superop> {
        let a = self.jump_eigen(jump)?;
        Superop::from_matrix(self.dim(), self.eigen_to_computational(&self.dissipative_eigen(&a)))
    }

    /// Hermitian coherent operator `C^a`, computational basis.
    pub fn coherent_term(&self, jump: &PauliString) -> Result<Operator> {
        let a = self.jump_eigen(jump)?;
        Ok(self.es.from_eigenbasis(&self.coherent_eigen(&a)))
    }

    fn eigen_to_computational(&self, s: &DMatrix<C64>) -> DMatrix<C64> {
        let v = &self.es.vectors;
        let w = v.conjugate().kronecker(v);
        &w * s * w.adjoint()
    }
}

/// `X ↦ NX + XN`.
fn anticommutator_superop(n: &Operator) -> DMatrix<C64> {
    crate::superop::left_multiplication(n) + crate::superop::right_multiplication(n)
}

/// `X ↦ −i[C, X]`.
fn commutator_superop(c: &Operator) -> DMatrix<C64> {
    (crate::superop::left_multiplication(c) - crate::superop::right_multiplication(c)) * (-IM)
}

pub fn dissipative_part(jump: &PauliString, kernels: &SpectralKernels) -> Result<Superop> {
    kernels.dissipative_part(jump)
}

pub fn coherent_term(jump: &PauliString, kernels: &SpectralKernels) -> Result<Operator> {
    kernels.coherent_term(jump)
}

/// `Σ_a ℒ_a` over the single-site Pauli jumps of a region.
#[derive(Clone, Debug)]
pub struct LindbladSuperop {
    pub region: Vec<usize>,
    pub n: usize,
    pub beta: f64,
    pub dissipative: Superop,
    pub coherent: Superop,
    total: Superop,
    kms: Arc<KmsFrame>,
}

impl LindbladSuperop {
    pub fn matrix(&self) -> &Superop {
        &self.total
    }

    pub fn dim(&self) -> usize {
        self.total.dim()
    }

    pub fn apply(&self, x: &Operator) -> Result<Operator> {
        self.total.apply(x)
    }

    pub fn apply_adjoint(&self, x: &Operator) -> Result<Operator> {
        self.total.apply_adjoint(x)
    }

    pub fn generator(&self) -> Generator {
        Generator {
            matrix: self.total.matrix().clone(),
            kms: Some(Arc::clone(&self.kms)),
        }
    }

    pub fn prepare(&self, evaluator: &str) -> Result<Box<dyn PreparedSemigroup>> {
        evaluator_registry().get(evaluator)?.prepare(&self.generator())
    }

    /// `e^{sℒ}`.
    pub fn propagator(&self, s: f64, evaluator: &str) -> Result<Superop> {
        Superop::from_matrix(self.dim(), self.prepare(evaluator)?.propagator(s)?.matrix)
    }
}

pub fn full_lindbladian(region: &[usize], kernels: &SpectralKernels) -> Result<LindbladSuperop> {
    let d = kernels.dim();
    let n = crate::operator::qubits_for_dim(d)?;
    if region.is_empty() {
        return Err(Error::InvalidRegion("jump region is empty".into()));
    }
    validate_region(region, n)?;
    let jumps = single_site_paulis(region, n)?;
    let parts: Vec<(DMatrix<C64>, Operator)> = jumps
        .par_iter()
        .map(|j| {
            let a = kernels.jump_eigen(j)?;
            Ok((kernels.dissipative_eigen(&a), kernels.coherent_eigen(&a)))
        })
        .collect::<Result<_>>()?;
    let mut diss_e = DMatrix::<C64>::zeros(d * d, d * d);
    let mut coh = Operator::zeros(d, d);
    for (s, c) in parts {
        diss_e += s;
        coh += c;
    }
    let coh_e = commutator_superop(&coh);
    let total_e = &diss_e + &coh_e;

    let beta = kernels.beta();
    let e0 = kernels.es.energies[0];
    let pops: Vec<f64> = kernels.es.energies.iter().map(|e| (-beta * (e - e0)).exp()).collect();
    let weights = DVector::from_fn(d * d, |idx, _| (pops[idx % d] * pops[idx / d]).powf(0.25));
    let dissipative = Superop::from_matrix(d, kernels.eigen_to_computational(&diss_e))?;
    let coherent = Superop::from_matrix(d, kernels.eigen_to_computational(&coh_e))?;
    let total = dissipative.add(&coherent)?;
    Ok(LindbladSuperop {
        region: region.to_vec(),
        n,
        beta,
        dissipative,
        coherent,
        total,
        kms: Arc::new(KmsFrame {
            vectors: kernels.es.vectors.clone(),
            eigen_matrix: total_e,
            weights,
        }),
    })
}

/// Recovery channel with provenance.
#[derive(Clone, Debug)]
pub struct RecoveryMap {
    pub kind: String,
    pub region: Vec<usize>,
    pub t: f64,
    pub method: String,
    map: Superop,
}

impl RecoveryMap {
    pub fn new(kind: &str, region: &[usize], t: f64, method: &str, map: Superop) -> Self {
        Self {
            kind: kind.to_string(),
            region: region.to_vec(),
            t,
            method: method.to_string(),
            map,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::new("identity", &[], 0.0, "exact", Superop::identity(1 << n))
    }

    /// `X ↦ σ Tr[X]`.
    pub fn perfect(sigma: &DensityMatrix) -> Self {
        Self::new("perfect", &[], f64::INFINITY, "exact", Superop::replacement(sigma.matrix()))
    }

    pub fn superop(&self) -> &Superop {
        &self.map
    }

    pub fn dim(&self) -> usize {
        self.map.dim()
    }

    pub fn apply(&self, x: &Operator) -> Result<Operator> {
        self.map.apply(x)
    }

    pub fn apply_adjoint(&self, x: &Operator) -> Result<Operator> {
        self.map.apply_adjoint(x)
    }

    /// Largest deviation `‖R†[P] − P‖` over Pauli strings supported outside `support`.
    ///
    /// Zero exactly when the map acts as the identity channel on the complement.
    pub fn support_defect(&self, support: &[usize]) -> Result<f64> {
        let n = crate::operator::qubits_for_dim(self.dim())?;
        let outside = crate::operator::complement(support, n);
        let mut worst: f64 = 0.0;
        for p in crate::operator::paulis_on(&outside, n)?.into_iter().skip(1) {
            let dense = p.to_dense();
            let image = self.apply_adjoint(&dense)?;
            worst = worst.max(crate::operator::op_norm(&(image - dense)));
        }
        Ok(worst)
    }
}

/// `(1/t) ∫₀ᵗ e^{sℒ} ds`.
pub fn recovery_map(l: &LindbladSuperop, t: f64, evaluator: &str) -> Result<RecoveryMap> {
    PreparedRecovery::new(l, evaluator)?.at(t)
}

/// A Lindbladian decomposed once and averaged over many times.
pub struct PreparedRecovery {
    region: Vec<usize>,
    prepared: Box<dyn PreparedSemigroup>,
    dim: usize,
}

impl PreparedRecovery {
    pub fn new(l: &LindbladSuperop, evaluator: &str) -> Result<Self> {
        Ok(Self {
            region: l.region.clone(),
            prepared: l.prepare(evaluator)?,
            dim: l.dim(),
        })
    }

    pub fn at(&self, t: f64) -> Result<RecoveryMap> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::InvalidParameter(format!("averaging time must be positive, got {t}")));
        }
        let eval = self.prepared.average(t)?;
        let m = Superop::from_matrix(self.dim, eval.matrix)?;
        Ok(RecoveryMap::new("lindblad", &self.region, t, eval.method, m))
    }

    pub fn propagator(&self, s: f64) -> Result<Superop> {
        Superop::from_matrix(self.dim, self.prepared.propagator(s)?.matrix)
    }

    pub fn method(&self) -> &'static str {
        self.prepared.method()
    }
}

/// Which Hamiltonian generates the recovery dynamics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryScope {
    /// The full Hamiltonian; the map is quasi-local around the jump region.
    #[default]
    Global,
    /// Only Hamiltonian terms inside the jump region; the map acts on it alone.
    Restricted,
}

pub struct RecoveryContext<'a> {
    pub spec: &'a HamiltonianSpec,
    pub region: &'a [usize],
    pub sigma: &'a DensityMatrix,
    pub scope: RecoveryScope,
    pub evaluator: &'a str,
}

/// A recovery channel family indexed by averaging time.
pub trait RecoveryFamily: Send + Sync {
    fn at(&self, t: f64) -> Result<RecoveryMap>;
}

pub trait RecoveryStrategy: Named + Send + Sync {
    fn prepare(&self, ctx: &RecoveryContext<'_>) -> Result<Box<dyn RecoveryFamily>>;
}

impl RecoveryFamily for PreparedRecovery {
    fn at(&self, t: f64) -> Result<RecoveryMap> {
        PreparedRecovery::at(self, t)
    }
}

struct Fixed(RecoveryMap);

impl RecoveryFamily for Fixed {
    fn at(&self, t: f64) -> Result<RecoveryMap> {
        let mut m = self.0.clone();
        m.t = t;
        Ok(m)
    }
}

pub struct LindbladRecovery;

impl Named for LindbladRecovery {
    fn name(&self) -> &'static str {
        "lindblad"
    }
}

impl RecoveryStrategy for LindbladRecovery {
    fn prepare(&self, ctx: &RecoveryContext<'_>) -> Result<Box<dyn RecoveryFamily>> {
        let spec = match ctx.scope {
            RecoveryScope::Global => ctx.spec.clone(),
            RecoveryScope::Restricted => ctx.spec.restricted_to(ctx.region),
        };
        let kernels = SpectralKernels::from_spec(&spec)?;
        let l = full_lindbladian(ctx.region, &kernels)?;
        Ok(Box::new(PreparedRecovery::new(&l, ctx.evaluator)?))
    }
}

/// `X ↦ σ Tr[X]`: recovers `σ` from any branch.
pub struct PerfectRecovery;

impl Named for PerfectRecovery {
    fn name(&self) -> &'static str {
        "perfect"
    }
}

impl RecoveryStrategy for PerfectRecovery {
    fn prepare(&self, ctx: &RecoveryContext<'_>) -> Result<Box<dyn RecoveryFamily>> {
        Ok(Box::new(Fixed(RecoveryMap::perfect(ctx.sigma))))
    }
}

pub struct IdentityRecovery;

impl Named for IdentityRecovery {
    fn name(&self) -> &'static str {
        "identity"
    }
}

impl RecoveryStrategy for IdentityRecovery {
    fn prepare(&self, ctx: &RecoveryContext<'_>) -> Result<Box<dyn RecoveryFamily>> {
        Ok(Box::new(Fixed(RecoveryMap::identity(ctx.spec.n))))
    }
}

pub fn recovery_registry() -> Registry<dyn RecoveryStrategy> {
    let mut reg: Registry<dyn RecoveryStrategy> = Registry::new("recovery strategy");
    reg.register(Arc::new(LindbladRecovery));
    reg.register(Arc::new(PerfectRecovery));
    reg.register(Arc::new(IdentityRecovery));
    reg
}

/// `‖ℒ[σ]‖₁`.
pub fn stationarity_residual(sigma: &DensityMatrix, l: &LindbladSuperop) -> Result<f64> {
    Ok(trace_norm(&l.apply(sigma.matrix())?))
}
