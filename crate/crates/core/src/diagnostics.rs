// Copyright 2026 The qmarkov Authors
// SPDX-License-Identifier: Apache-2.0

//! Error functionals: approximate detailed balance, clustering, local and strong
//! Markov errors, and the forgetful-channel trivialization check.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lindblad::{adb_frequency_kernel, RecoveryMap, SpectralKernels};
use crate::operator::{
    embed, four_kraus_decomposition, frobenius, op_norm, partial_trace, paulis_on, polar_unitary, random,
    sqrt_psd, tensor, trace, trace_norm, trace_product, validate_region, DensityMatrix, MeasurementChannel,
    Operator, PauliString, Tripartition, C64, COMPLETENESS_TOL, ZERO,
};
use crate::registry::{Named, Registry};
use crate::states::MatrixFile;
use crate::superop::Superop;

pub use crate::lindblad::stationarity_residual;

/// Slack allowed on `‖K‖ ≤ 1` and similar norm preconditions.
pub const NORM_SLACK: f64 = 1e-10;
/// Largest tolerated `‖R†[P] − P‖` for Paulis outside the recovery support.
pub const SUPPORT_TOL: f64 = 1e-7;

fn check_contraction(k: &Operator) -> Result<()> {
    let norm = op_norm(k);
    if norm > 1.0 + NORM_SLACK {
        return Err(Error::NormViolation { norm, bound: 1.0 });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Approximate detailed balance
// ---------------------------------------------------------------------------

/// `K_pq = α(ν_p, ν_q) · G(ν_p − ν_q)` over merged Bohr bins.
///
/// Expanding `Â(ω,t)` over Bohr frequencies turns the double integral of the
/// detailed-balance functional into a quadratic form with this kernel.
pub struct AdbKernel {
    kernels: Arc<SpectralKernels>,
    weights: DMatrix<f64>,
}

impl AdbKernel {
    pub fn new(kernels: Arc<SpectralKernels>) -> Self {
        let freqs = &kernels.es.bins.freqs;
        let beta = kernels.beta();
        let nb = freqs.len();
        let mut cache: HashMap<u64, f64> = HashMap::new();
        let mut weights = DMatrix::zeros(nb, nb);
        for p in 0..nb {
            for q in p..nb {
                let x = (freqs[p] - freqs[q]).abs();
                let g = *cache
                    .entry(x.to_bits())
                    .or_insert_with(|| adb_frequency_kernel(x, beta));
                let v = kernels.alpha_bins(p, q) * g;
                weights[(p, q)] = v;
                weights[(q, p)] = v;
            }
        }
        Self { kernels, weights }
    }

    pub fn kernels(&self) -> &SpectralKernels {
        &self.kernels
    }

    /// `∬ ‖Â(ω,t)√σ − √σ ρ^{-1/2}Â(ω,t)ρ^{1/2}‖₂² γ(ω) g(t) dω dt`.
    pub fn error(&self, sigma: &DensityMatrix, jump: &PauliString) -> Result<f64> {
        let k = &self.kernels;
        let es = &k.es;
        let d = es.dim();
        if sigma.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: sigma.dim(),
            });
        }
        let a = es.to_eigenbasis(&jump.to_dense());
        let m = sqrt_psd(&es.to_eigenbasis(sigma.matrix()));
        let beta = k.beta();
        // ρ^{-1/2} X ρ^{1/2} scales entry (k, l) by e^{β(E_k − E_l)/2}.
        let r = DMatrix::from_fn(d, d, |i, j| (0.5 * beta * (es.energies[i] - es.energies[j])).exp());
        let bins = &es.bins;
        let nb = bins.len();

        let mut coeff = vec![ZERO; nb];
        let mut touched: Vec<usize> = Vec::with_capacity(2 * d);
        let mut total = 0.0;
        for j in 0..d {
            for i in 0..d {
                for kk in 0..d {
                    let t1 = a[(i, kk)] * m[(kk, j)];
                    if t1 != ZERO {
                        let b = bins.bin(i, kk);
                        if coeff[b] == ZERO {
                            touched.push(b);
                        }
                        coeff[b] += t1;
                    }
                    let t2 = m[(i, kk)] * a[(kk, j)] * r[(kk, j)];
                    if t2 != ZERO {
                        let b = bins.bin(kk, j);
                        if coeff[b] == ZERO {
                            touched.push(b);
                        }
                        coeff[b] -= t2;
                    }
                }
                touched.sort_unstable();
                touched.dedup();
                for &p in &touched {
                    for &q in &touched {
                        total += (coeff[p] * coeff[q].conj()).re * self.weights[(p, q)];
                    }
                }
                for &p in &touched {
                    coeff[p] = ZERO;
                }
                touched.clear();
            }
        }
        Ok(total.max(0.0))
    }
}

pub fn adb_error(sigma: &DensityMatrix, jump: &PauliString, kernels: Arc<SpectralKernels>) -> Result<f64> {
    AdbKernel::new(kernels).error(sigma, jump)
}

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ClusteringResult {
    /// `|Tr[σ X Y] − Tr[σ X] Tr[σ Y]|` at the certificate.
    pub eps: f64,
    /// Certificate on `A`, local to the sorted qubits of `A`.
    pub x_a: Operator,
    /// Certificate on `C`, local to the sorted qubits of `C`.
    pub y_c: Operator,
    /// Best value over Pauli pairs.
    pub pauli_bound: f64,
    pub pauli_pair: (String, String),
    /// Best value of the alternating polar ascent.
    pub ascent_value: f64,
}

/// `σ_AC − σ_A ⊗ σ_C`, with `A` on the low local qubits.
fn correlation_operator(sigma: &DensityMatrix, a: &[usize], c: &[usize]) -> Result<Operator> {
    let n = sigma.qubits();
    let ac: Vec<usize> = a.iter().chain(c).copied().collect();
    validate_region(&ac, n).map_err(|e| match e {
        Error::InvalidRegion(_) => {
            let shared: Vec<usize> = a.iter().filter(|q| c.contains(q)).copied().collect();
            Error::InvalidRegion(format!("regions A and C overlap on qubits {shared:?}"))
        }
        other => other,
    })?;
    let s_ac = partial_trace(sigma.matrix(), &ac, n)?;
    let s_a = partial_trace(sigma.matrix(), a, n)?;
    let s_c = partial_trace(sigma.matrix(), c, n)?;
    Ok(s_ac - tensor(&s_a, &s_c))
}

/// `R_Y = Tr_C[Δ (I ⊗ Y)]`, so that `Tr[Δ (X ⊗ Y)] = Tr[X R_Y]`.
fn reduce_to_a(delta: &Operator, y: &Operator, da: usize) -> Operator {
    let dc = y.nrows();
    Operator::from_fn(da, da, |ap, a| {
        let mut s = ZERO;
        for c in 0..dc {
            for c2 in 0..dc {
                s += delta[(ap + da * c, a + da * c2)] * y[(c2, c)];
            }
        }
        s
    })
}

/// `S_X` with `Tr[Δ (X ⊗ Y)] = Tr[Y S_X]`.
fn reduce_to_c(delta: &Operator, x: &Operator, dc: usize) -> Operator {
    let da = x.nrows();
    Operator::from_fn(dc, dc, |c, c2| {
        let mut s = ZERO;
        for a in 0..da {
            for ap in 0..da {
                s += delta[(ap + da * c, a + da * c2)] * x[(a, ap)];
            }
        }
        s
    })
}

fn correlation(delta: &Operator, x: &Operator, y: &Operator) -> f64 {
    trace_product(x, &reduce_to_a(delta, y, x.nrows())).norm()
}

const ASCENT_GAIN_TOL: f64 = 1e-10;
const ASCENT_MAX_ITERS: usize = 500;

/// Alternating maximization from a starting operator on one side.
fn polar_ascent(delta: &Operator, da: usize, dc: usize, start: Start) -> (f64, Operator, Operator) {
    let (mut x, mut y) = match start {
        Start::A(x) => {
            let y = polar_unitary(&reduce_to_c(delta, &x, dc)).adjoint();
            (x, y)
        }
        Start::C(y) => (Operator::identity(da, da), y),
    };
    let mut value = f64::NEG_INFINITY;
    for _ in 0..ASCENT_MAX_ITERS {
        let ry = reduce_to_a(delta, &y, da);
        x = polar_unitary(&ry).adjoint();
        let sx = reduce_to_c(delta, &x, dc);
        y = polar_unitary(&sx).adjoint();
        let next = trace_norm(&sx);
        let gain = next - value;
        value = next;
        if gain < ASCENT_GAIN_TOL {
            break;
        }
    }
    (correlation(delta, &x, &y), x, y)
}

enum Start {
    A(Operator),
    C(Operator),
}

fn restart_rng(seed: u64, restart: usize, dim: usize) -> ChaCha8Rng {
    // Streams depend on the side's dimension only, so swapping A and C swaps the starts.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((restart as u64) << 32) | dim as u64);
    rng
}

/// Lower bound on `sup |Tr[σXY] − Tr[σX]Tr[σY]|` over `‖X_A‖, ‖Y_C‖ ≤ 1`.
pub fn clustering_epsilon(
    sigma: &DensityMatrix,
    a: &[usize],
    c: &[usize],
    restarts: usize,
    seed: u64,
) -> Result<ClusteringResult> {
    let delta = correlation_operator(sigma, a, c)?;
    let (da, dc) = (1usize << a.len(), 1usize << c.len());

    let pa = paulis_on(&(0..a.len()).collect::<Vec<_>>(), a.len())?;
    let pc = paulis_on(&(0..c.len()).collect::<Vec<_>>(), c.len())?;
    let pc_dense: Vec<Operator> = pc.iter().map(|p| p.to_dense()).collect();
    let mut best_pauli = (0.0, 0, 0);
    for (i, p) in pa.iter().enumerate() {
        let sp = reduce_to_c(&delta, &p.to_dense(), dc);
        for (j, q) in pc_dense.iter().enumerate() {
            let v = trace_product(q, &sp).norm();
            if v > best_pauli.0 {
                best_pauli = (v, i, j);
            }
        }
    }
    let (pauli_bound, pi, pj) = best_pauli;

    let mut starts = vec![Start::A(pa[pi].to_dense()), Start::C(pc_dense[pj].clone())];
    for r in 0..restarts {
        starts.push(Start::A(random::unitary(da, &mut restart_rng(seed, r, da))));
        starts.push(Start::C(random::unitary(dc, &mut restart_rng(seed, r, dc))));
    }
    let mut best: Option<(f64, Operator, Operator)> = None;
    for s in starts {
        let cand = polar_ascent(&delta, da, dc, s);
        if best.as_ref().is_none_or(|b| cand.0 > b.0) {
            best = Some(cand);
        }
    }
    let (ascent_value, x, y) = best.expect("at least two starts");
    let pair = (pa[pi].to_string(), pc[pj].to_string());
    let (eps, x_a, y_c) = if ascent_value >= pauli_bound {
        (ascent_value, x, y)
    } else {
        (pauli_bound, pa[pi].to_dense(), pc_dense[pj].clone())
    };
    Ok(ClusteringResult {
        eps,
        x_a,
        y_c,
        pauli_bound,
        pauli_pair: pair,
        ascent_value,
    })
}

// ---------------------------------------------------------------------------
// Markov errors
// ---------------------------------------------------------------------------

fn apply_channel(kraus: &[Operator], x: &Operator) -> Operator {
    let d = x.nrows();
    kraus
        .iter()
        .fold(Operator::zeros(d, d), |acc, k| acc + k * x * k.adjoint())
}

/// `‖R∘N[σ] − σ‖₁` for a channel `N` supported on `region`.
pub fn markov_error(
    sigma: &DensityMatrix,
    region: &[usize],
    noise: &MeasurementChannel,
    r: &RecoveryMap,
) -> Result<f64> {
    let outside: Vec<usize> = noise
        .support()
        .iter()
        .filter(|q| !region.contains(q))
        .copied()
        .collect();
    if !outside.is_empty() {
        return Err(Error::SupportViolation(format!(
            "noise acts on qubits {outside:?} outside region {region:?}"
        )));
    }
    let noisy = apply_channel(noise.kraus(), sigma.matrix());
    Ok(trace_norm(&(r.apply(&noisy)? - sigma.matrix())))
}

/// `‖R[KσK†] − σ Tr[KσK†]‖₁`.
pub fn strong_markov_error(sigma: &DensityMatrix, k: &Operator, r: &RecoveryMap) -> Result<f64> {
    check_contraction(k)?;
    strong_markov_unchecked(sigma.matrix(), k, r)
}

fn strong_markov_unchecked(sigma: &Operator, k: &Operator, r: &RecoveryMap) -> Result<f64> {
    let branch = k * sigma * k.adjoint();
    let q = trace(&branch).re;
    Ok(trace_norm(&(r.apply(&branch)? - sigma.scale(q))))
}

/// `Σ_i ‖R[K_iσK_i†] − σ Tr[K_iσK_i†]‖₁`.
pub fn strong_markov_measurement_error(
    sigma: &DensityMatrix,
    mc: &MeasurementChannel,
    r: &RecoveryMap,
) -> Result<f64> {
    let residual = mc.completeness_residual();
    if residual > COMPLETENESS_TOL {
        return Err(Error::Incomplete(residual));
    }
    mc.kraus()
        .iter()
        .map(|k| strong_markov_unchecked(sigma.matrix(), k, r))
        .sum()
}

// ---------------------------------------------------------------------------
// Supremum estimate over K
// ---------------------------------------------------------------------------

/// A candidate `K` on region `A`, local to its sorted qubits.
#[derive(Clone, Debug)]
pub struct LabeledK {
    pub label: String,
    pub op: Operator,
}

/// A family of candidate contractions on a region of `qubits` qubits.
pub trait KEnsemble: Named + Send + Sync {
    fn generate(&self, qubits: usize, samples: usize, rng: &mut ChaCha8Rng) -> Result<Vec<LabeledK>>;
}

/// Every Pauli string, identity included.
pub struct PauliEnsemble;

impl Named for PauliEnsemble {
    fn name(&self) -> &'static str {
        "pauli"
    }
}

impl KEnsemble for PauliEnsemble {
    fn generate(&self, qubits: usize, _samples: usize, _rng: &mut ChaCha8Rng) -> Result<Vec<LabeledK>> {
        let local: Vec<usize> = (0..qubits).collect();
        Ok(paulis_on(&local, qubits)?
            .into_iter()
            .map(|p| LabeledK {
                label: format!("pauli:{p}"),
                op: p.to_dense(),
            })
            .collect())
    }
}

/// Computational basis projectors and `samples` random rank-1 projectors.
pub struct ProjectorEnsemble;

impl Named for ProjectorEnsemble {
    fn name(&self) -> &'static str {
        "projectors"
    }
}

impl KEnsemble for ProjectorEnsemble {
    fn generate(&self, qubits: usize, samples: usize, rng: &mut ChaCha8Rng) -> Result<Vec<LabeledK>> {
        let d = 1usize << qubits;
        let mut out: Vec<LabeledK> = (0..d)
            .map(|x| {
                let mut op = Operator::zeros(d, d);
                op[(x, x)] = C64::new(1.0, 0.0);
                LabeledK {
                    label: format!("basis:{x}"),
                    op,
                }
            })
            .collect();
        for s in 0..samples {
            let v = random::pure_vector(d, rng);
            out.push(LabeledK {
                label: format!("projector:{s}"),
                op: &v * v.adjoint(),
            });
        }
        Ok(out)
    }
}

pub struct ContractionEnsemble;

impl Named for ContractionEnsemble {
    fn name(&self) -> &'static str {
        "contractions"
    }
}

impl KEnsemble for ContractionEnsemble {
    fn generate(&self, qubits: usize, samples: usize, rng: &mut ChaCha8Rng) -> Result<Vec<LabeledK>> {
        let d = 1usize << qubits;
        Ok((0..samples)
            .map(|s| LabeledK {
                label: format!("contraction:{s}"),
                op: random::contraction(d, rng),
            })
            .collect())
    }
}

pub fn k_ensemble_registry() -> Registry<dyn KEnsemble> {
    let mut reg: Registry<dyn KEnsemble> = Registry::new("K ensemble");
    reg.register(Arc::new(PauliEnsemble));
    reg.register(Arc::new(ProjectorEnsemble));
    reg.register(Arc::new(ContractionEnsemble));
    reg
}

#[derive(Clone, Debug)]
pub struct SupEstimate {
    pub eps_hat: f64,
    pub argmax: LabeledK,
    pub evaluations: usize,
    /// Always `"lower_bound"`: the supremum over the unit ball is not certified.
    pub estimator_kind: &'static str,
}

const ASCENT_START_STEP: f64 = 0.5;
const ASCENT_MIN_STEP: f64 = 1e-6;
const ASCENT_MAX_EVALS: usize = 400;

/// Singular values clipped at one.
fn project_to_unit_ball(k: &Operator) -> Operator {
    let svd = k.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let s = Operator::from_diagonal(&svd.singular_values.map(|x| C64::new(x.min(1.0), 0.0)));
    u * s * v_t
}

/// Lower bound on `sup_{‖K‖≤1, K on A} ‖R[KσK†] − σTr[KσK†]‖₁`.
pub fn strong_markov_sup_estimate(
    sigma: &DensityMatrix,
    region: &[usize],
    r: &RecoveryMap,
    samples: usize,
    seed: u64,
) -> Result<SupEstimate> {
    let n = sigma.qubits();
    validate_region(region, n)?;
    if samples == 0 {
        return Err(Error::InvalidParameter("samples must be at least 1".into()));
    }
    let mut region = region.to_vec();
    region.sort_unstable();
    let eval = |k: &Operator| -> Result<f64> { strong_markov_unchecked(sigma.matrix(), &embed(k, &region, n)?, r) };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, LabeledK)> = None;
    let mut evaluations = 0;
    for ens in k_ensemble_registry().iter() {
        for cand in ens.generate(region.len(), samples, &mut rng)? {
            let v = eval(&cand.op)?;
            evaluations += 1;
            if best.as_ref().is_none_or(|b| v > b.0) {
                best = Some((v, cand));
            }
        }
    }
    let (mut value, seed_k) = best.expect("the Pauli ensemble is never empty");
    let d = 1usize << region.len();
    let mut current = seed_k.op.clone();
    let mut improved = false;
    let mut step = ASCENT_START_STEP;
    while step >= ASCENT_MIN_STEP && evaluations < ASCENT_MAX_EVALS {
        let g = random::ginibre(d, &mut rng);
        let g = g.unscale(frobenius(&g));
        let trial = project_to_unit_ball(&(&current + g.scale(step)));
        let v = eval(&trial)?;
        evaluations += 1;
        if v > value {
            value = v;
            current = trial;
            improved = true;
        } else {
            step *= 0.5;
        }
    }
    let argmax = if improved {
        LabeledK {
            label: format!("ascent from {}", seed_k.label),
            op: current,
        }
    } else {
        seed_k
    };
    Ok(SupEstimate {
        eps_hat: value,
        argmax,
        evaluations,
        estimator_kind: "lower_bound",
    })
}

// ---------------------------------------------------------------------------
// Strong Markov implies clustering
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ClusteringBound {
    pub lhs: f64,
    pub bound: f64,
    pub piece_errors: [f64; 4],
    pub support_defect: f64,
    pub holds: bool,
}

/// `|Tr[σXY] − Tr[σX]Tr[σY]|` against `4 max_i ε(K_i)` for the pieces of `X`.
pub fn clustering_from_strong_markov(
    sigma: &DensityMatrix,
    tri: &Tripartition,
    r: &RecoveryMap,
    x_a: &Operator,
    y_c: &Operator,
) -> Result<ClusteringBound> {
    let n = sigma.qubits();
    check_contraction(x_a)?;
    check_contraction(y_c)?;
    let ab = tri.ab();
    let support_defect = r.support_defect(&ab)?;
    if support_defect > SUPPORT_TOL {
        return Err(Error::SupportViolation(format!(
            "recovery map acts on C (defect {support_defect:.3e})"
        )));
    }
    let x = embed(x_a, &tri.a, n)?;
    let y = embed(y_c, &tri.c, n)?;
    let s = sigma.matrix();
    let lhs = (trace(&(s * &x * &y)) - trace(&(s * &x)) * trace(&(s * &y))).norm();
    let mut piece_errors = [0.0; 4];
    for (slot, k) in piece_errors.iter_mut().zip(four_kraus_decomposition(x_a)?) {
        *slot = strong_markov_unchecked(s, &embed(&k, &tri.a, n)?, r)?;
    }
    let bound = 4.0 * piece_errors.iter().copied().fold(0.0, f64::max);
    Ok(ClusteringBound {
        lhs,
        bound,
        piece_errors,
        support_defect,
        holds: lhs <= bound + 1e-8,
    })
}

// ---------------------------------------------------------------------------
// Trivialization on AB
// ---------------------------------------------------------------------------

/// `max_{P,Q} |Tr[σ P (R†[X] − N†∘R†[X]) Q]|` over Pauli strings `P, Q` on `ab`,
/// where `N` is the forgetful channel on `ab`.
pub fn trivialization_check(r: &RecoveryMap, ab: &[usize], x: &Operator, sigma: &DensityMatrix) -> Result<f64> {
    check_contraction(x)?;
    let n = sigma.qubits();
    let forget = Superop::forgetful(ab, n)?;
    let lifted = r.apply_adjoint(x)?;
    let diff = &lifted - forget.apply_adjoint(&lifted)?;
    let paulis: Vec<Operator> = paulis_on(ab, n)?.iter().map(|p| p.to_dense()).collect();
    let mut worst: f64 = 0.0;
    for p in &paulis {
        let t = sigma.matrix() * p * &diff;
        for q in &paulis {
            worst = worst.max(trace_product(&t, q).norm());
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ClusteringCertificate {
    pub eps: f64,
    pub pauli_bound: f64,
    pub pauli_pair: [String; 2],
    pub x_a: MatrixFile,
    pub y_c: MatrixFile,
}

impl From<&ClusteringResult> for ClusteringCertificate {
    fn from(c: &ClusteringResult) -> Self {
        Self {
            eps: c.eps,
            pauli_bound: c.pauli_bound,
            pauli_pair: [c.pauli_pair.0.clone(), c.pauli_pair.1.clone()],
            x_a: MatrixFile::from_operator(&c.x_a),
            y_c: MatrixFile::from_operator(&c.y_c),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticsReport {
    pub adb_per_jump: BTreeMap<String, f64>,
    pub clustering: Option<ClusteringCertificate>,
    pub markov_err: BTreeMap<String, f64>,
    pub strong_markov_errs: BTreeMap<String, f64>,
    pub stationarity_residual: f64,
    pub estimator_kind: &'static str,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lindblad::{full_lindbladian, recovery_map};
    use crate::operator::{identity, single_site_paulis, ONE};
    use crate::spectral::{build_hamiltonian, gibbs_state, oft_evolved, HamiltonianSpec, ModelParams, Term};
    use crate::lindblad::{adb_time_cutoff, adb_time_kernel, MetropolisWeight};
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;

    fn kernels(spec: &HamiltonianSpec) -> Arc<SpectralKernels> {
        Arc::new(SpectralKernels::from_spec(spec).unwrap())
    }

    fn tfim(n: usize, beta: f64) -> HamiltonianSpec {
        build_hamiltonian("tfim", n, &ModelParams::default(), beta, 0).unwrap()
    }

    fn ket(bits: &[usize]) -> DVector<C64> {
        let n = bits.len();
        let idx = bits.iter().enumerate().fold(0, |acc, (q, &b)| acc | (b << q));
        let mut v = DVector::zeros(1 << n);
        v[idx] = ONE;
        v
    }

    #[test]
    fn adb_vanishes_on_gibbs_state() {
        for beta in [0.2, 1.0, 3.0] {
            let spec = tfim(3, beta);
            let k = AdbKernel::new(kernels(&spec));
            let rho = gibbs_state(&spec).unwrap();
            for jump in single_site_paulis(&[0, 1, 2], 3).unwrap() {
                assert!(k.error(&rho, &jump).unwrap() < 1e-8);
            }
        }
    }

    #[test]
    fn adb_matches_dense_grid() {
        let z: PauliString = "Z".parse().unwrap();
        let spec = HamiltonianSpec::from_terms("explicit", 1, 1.0, vec![Term { coeff: 1.0, pauli: z }]).unwrap();
        let k = kernels(&spec);
        let sigma = DensityMatrix::maximally_mixed(1);
        let jump: PauliString = "X".parse().unwrap();
        let value = adb_error(&sigma, &jump, k.clone()).unwrap();
        assert!(value > 1e-3);

        // Riemann sums on a dense (ω, t) grid.
        let es = &k.es;
        let w = MetropolisWeight::new(1.0).unwrap();
        let sqrt_rho = sqrt_psd(gibbs_state(&spec).unwrap().matrix());
        let inv_sqrt_rho = crate::operator::HermitianEigen::new(gibbs_state(&spec).unwrap().matrix()).map(|x| 1.0 / x.sqrt());
        let sq = sqrt_psd(sigma.matrix());
        let a = jump.to_dense();
        let tcut = adb_time_cutoff(1.0);
        let (dt, dw) = (0.01, 0.01);
        let nt = (2.0 * tcut / dt) as i64;
        let mut sum = 0.0;
        for iw in -1600..=1600 {
            let om = iw as f64 * dw;
            let gam = w.gamma(om);
            for it in -nt / 2..=nt / 2 {
                let t = it as f64 * dt;
                let ah = oft_evolved(&a, om, t, es, &k.fp).unwrap();
                let d = &ah * &sq - &sq * &inv_sqrt_rho * &ah * &sqrt_rho;
                sum += d.norm_squared() * gam * adb_time_kernel(t, 1.0);
            }
        }
        let grid = sum * dt * dw;
        assert_abs_diff_eq!(value, grid, epsilon = 1e-6);
    }

    #[test]
    fn adb_kernel_normalization() {
        // G(0) = ∫ g = 1/2
        assert_abs_diff_eq!(adb_frequency_kernel(0.0, 1.0), 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(adb_frequency_kernel(0.0, 3.0), 0.5, epsilon = 1e-10);
    }

    #[test]
    fn clustering_of_product_bell_and_ghz() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prod = random::density(1, &mut rng).tensor(&random::density(2, &mut rng));
        let r = clustering_epsilon(&prod, &[0], &[2], 4, 0).unwrap();
        assert!(r.eps < 1e-10);

        let bell = (ket(&[0, 0]) + ket(&[1, 1])).unscale(2f64.sqrt());
        let bell = DensityMatrix::pure(&bell).unwrap();
        let r = clustering_epsilon(&bell, &[0], &[1], 4, 0).unwrap();
        assert_abs_diff_eq!(r.eps, 1.0, epsilon = 1e-10);
        assert!(op_norm(&r.x_a) <= 1.0 + 1e-10 && op_norm(&r.y_c) <= 1.0 + 1e-10);

        let ghz = DensityMatrix::basis_state(3, 0)
            .unwrap()
            .mix(0.5, &DensityMatrix::basis_state(3, 7).unwrap())
            .unwrap();
        let r = clustering_epsilon(&ghz, &[0], &[2], 4, 0).unwrap();
        assert_abs_diff_eq!(r.eps, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(r.pauli_bound, 1.0, epsilon = 1e-12);
        assert_eq!(r.pauli_pair, ("Z".to_string(), "Z".to_string()));
    }

    #[test]
    fn clustering_certificate_value_and_swap_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random::density(3, &mut rng);
        let r = clustering_epsilon(&s, &[0], &[1, 2], 10, 3).unwrap();
        let delta = correlation_operator(&s, &[0], &[1, 2]).unwrap();
        assert_abs_diff_eq!(correlation(&delta, &r.x_a, &r.y_c), r.eps, epsilon = 1e-12);
        assert!(r.eps >= r.pauli_bound - 1e-12);
        let swapped = clustering_epsilon(&s, &[1, 2], &[0], 10, 3).unwrap();
        assert_abs_diff_eq!(r.eps, swapped.eps, epsilon = 1e-9);
        assert!(clustering_epsilon(&s, &[0, 1], &[1], 1, 0).is_err());
    }

    #[test]
    fn strong_markov_reductions() {
        let spec = tfim(2, 1.0);
        let rho = gibbs_state(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sigma = random::density(2, &mut rng);
        let l = full_lindbladian(&[0], &kernels(&spec)).unwrap();
        let r = recovery_map(&l, 2.0, "eigen").unwrap();
        let id = identity(4);
        let e_id = strong_markov_error(&sigma, &id, &r).unwrap();
        let m = markov_error(&sigma, &[0], &MeasurementChannel::identity(2), &r).unwrap();
        assert_abs_diff_eq!(e_id, m, epsilon = 1e-14);
        assert_eq!(strong_markov_error(&sigma, &Operator::zeros(4, 4), &r).unwrap(), 0.0);
        assert!(strong_markov_error(&sigma, &id.scale(1.1), &r).is_err());
        // Gibbs state is a fixed point of the averaged map
        assert!(strong_markov_error(&rho, &id, &r).unwrap() < 1e-10);

        // k copies of I/√k
        let k = 3;
        let copies = vec![embed(&identity(2), &[0], 2).unwrap().unscale((k as f64).sqrt()); k];
        let mc = MeasurementChannel::from_full(copies, &[0], 2).unwrap();
        assert_abs_diff_eq!(strong_markov_measurement_error(&sigma, &mc, &r).unwrap(), m, epsilon = 1e-13);
    }

    #[test]
    fn measurement_error_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p0 = 0.3;
        let mut rho_a = Operator::zeros(2, 2);
        rho_a[(0, 0)] = C64::new(p0, 0.0);
        rho_a[(1, 1)] = C64::new(1.0 - p0, 0.0);
        let rest = random::density(2, &mut rng);
        let sigma = DensityMatrix::new(tensor(&rho_a, rest.matrix())).unwrap();
        let mc = MeasurementChannel::computational_basis(&[0], 3).unwrap();
        let r = RecoveryMap::identity(3);
        let v = strong_markov_measurement_error(&sigma, &mc, &r).unwrap();
        assert_abs_diff_eq!(v, 2.0 * (p0 * (1.0 - p0) * 2.0), epsilon = 1e-12);
        // triangle inequality against the averaged channel
        let m = markov_error(&sigma, &[0], &mc, &r).unwrap();
        assert!(v >= m - 1e-10);
        // support violation
        assert!(markov_error(&sigma, &[1], &mc, &r).is_err());
        let bad = MeasurementChannel::from_full(vec![identity(8).scale(0.5)], &[0], 3);
        if let Ok(bad) = bad {
            assert!(strong_markov_measurement_error(&sigma, &bad, &r).is_err());
        }
    }

    #[test]
    fn single_qubit_hand_values() {
        let sigma = DensityMatrix::basis_state(1, 0).unwrap();
        let r = RecoveryMap::identity(1);
        let proj0 = sigma.matrix().clone();
        assert!(strong_markov_error(&sigma, &proj0, &r).unwrap() < 1e-15);
        let x = "X".parse::<PauliString>().unwrap().to_dense();
        assert_abs_diff_eq!(strong_markov_error(&sigma, &x, &r).unwrap(), 2.0, epsilon = 1e-14);
        let est = strong_markov_sup_estimate(&sigma, &[0], &r, 4, 0).unwrap();
        assert!(est.eps_hat >= 2.0 - 1e-12);
        assert_eq!(est.estimator_kind, "lower_bound");
        assert!(op_norm(&est.argmax.op) <= 1.0 + 1e-10);
    }

    #[test]
    fn sup_estimate_dominates_pauli_sweep_and_respects_perfect_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sigma = random::density(2, &mut rng);
        let r = RecoveryMap::identity(2);
        let est = strong_markov_sup_estimate(&sigma, &[1], &r, 3, 2).unwrap();
        let sweep = paulis_on(&[1], 2)
            .unwrap()
            .iter()
            .map(|p| strong_markov_error(&sigma, &p.to_dense(), &r).unwrap())
            .fold(0.0, f64::max);
        assert!(sweep > 0.0);
        assert!(est.eps_hat >= sweep);

        let perfect = RecoveryMap::perfect(&sigma);
        let est = strong_markov_sup_estimate(&sigma, &[1], &perfect, 3, 2).unwrap();
        assert!(est.eps_hat < 1e-12);
    }

    #[test]
    fn ensemble_registry_contents() {
        let reg = k_ensemble_registry();
        assert_eq!(reg.names(), vec!["pauli", "projectors", "contractions"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for e in reg.iter() {
            for k in e.generate(2, 5, &mut rng).unwrap() {
                assert!(op_norm(&k.op) <= 1.0 + 1e-12, "{}", k.label);
            }
        }
    }

    #[test]
    fn clustering_bound_for_products_and_positive_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tri = Tripartition::new(3, &[0], &[1], &[2]).unwrap();
        let prod = random::density(2, &mut rng).tensor(&random::density(1, &mut rng));
        let r = RecoveryMap::identity(3);
        let x = random::contraction(2, &mut rng);
        let y = random::contraction(2, &mut rng);
        let b = clustering_from_strong_markov(&prod, &tri, &r, &x, &y).unwrap();
        assert!(b.lhs < 1e-14 && b.holds);

        let sigma = random::density(3, &mut rng);
        let pos = crate::operator::hermitian_part(&(&x * x.adjoint()));
        let b = clustering_from_strong_markov(&sigma, &tri, &r, &pos, &y).unwrap();
        assert_eq!(b.piece_errors[1], 0.0);
        assert_eq!(b.piece_errors[2], 0.0);
        assert!(b.holds);

        // a map that touches C is refused
        let swap_like = RecoveryMap::perfect(&sigma);
        assert!(clustering_from_strong_markov(&sigma, &tri, &swap_like, &pos, &y).is_err());
    }

    #[test]
    fn trivialization_limits() {
        let spec = tfim(3, 1.0);
        let rho = gibbs_state(&spec).unwrap();
        let restricted = spec.restricted_to(&[0, 1]);
        let l = full_lindbladian(&[0, 1], &kernels(&restricted)).unwrap();
        let r = recovery_map(&l, 10.0, "eigen").unwrap();
        let ab = [0, 1];
        assert!(trivialization_check(&r, &ab, &identity(8), &rho).unwrap() < 1e-7);
        let z2 = PauliString::single(3, 2, crate::operator::Pauli::Z).unwrap().to_dense();
        assert!(trivialization_check(&r, &ab, &z2, &rho).unwrap() < 1e-7);
        let z0 = PauliString::single(3, 0, crate::operator::Pauli::Z).unwrap().to_dense();
        assert!(trivialization_check(&RecoveryMap::identity(3), &ab, &z0, &rho).unwrap() > 0.1);
    }
}
