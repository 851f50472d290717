// Copyright 2026 The qmarkov Authors
// SPDX-License-Identifier: Apache-2.0

//! Measurement–recovery protocols: repeated single-copy tomography, exact
//! outcome-sequence distributions, two-state distinguishing and local extremality.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::diagnostics::{strong_markov_error, LabeledK};
use crate::error::{Error, Result};
use crate::lindblad::RecoveryMap;
use crate::operator::{
    embed, measurement_from_observable, partial_trace, trace, trace_norm, trace_product, DensityMatrix,
    MeasurementChannel, Operator, COMPLETENESS_TOL,
};
use crate::superop::{vectorize, Superop};

/// Probabilities below this are treated as roundoff and clipped to zero.
pub const NEGATIVE_PROBABILITY_TOL: f64 = 1e-12;
/// Largest number of outcome sequences enumerated exactly.
pub const MAX_SEQUENCES: f64 = 1e6;
/// Smallest marginal distance the distinguisher accepts.
pub const MIN_DISTINGUISHABILITY: f64 = 1e-8;

/// Per-trial seed derived from a base seed.
pub fn trial_seed(seed: u64, trial: u64) -> u64 {
    seed ^ (trial.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn check_complete(mc: &MeasurementChannel) -> Result<()> {
    let residual = mc.completeness_residual();
    if residual > COMPLETENESS_TOL {
        return Err(Error::Incomplete(residual));
    }
    Ok(())
}

fn check_dims(sigma: &DensityMatrix, mc: &MeasurementChannel, r: &RecoveryMap) -> Result<()> {
    for got in [mc.kraus()[0].nrows(), r.dim()] {
        if got != sigma.dim() {
            return Err(Error::DimensionMismatch {
                expected: sigma.dim(),
                got,
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Repeated measurement and recovery
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ProtocolTrace {
    pub outcomes: Vec<usize>,
    /// Outcome probabilities seen in each round, after clipping.
    pub probabilities: Vec<Vec<f64>>,
    /// Trace of the recovered unnormalized branch in each round.
    pub branch_traces: Vec<f64>,
    pub empirical_means: BTreeMap<usize, f64>,
    pub rounds: usize,
    pub seed: u64,
    #[serde(skip)]
    pub final_state: Operator,
    #[serde(skip)]
    pub post_states: Option<Vec<Operator>>,
}

/// Clipped outcome probabilities of `σ`; fails if all vanish.
fn outcome_probabilities(effects: &[Operator], sigma: &Operator, round: usize) -> Result<Vec<f64>> {
    let mut p: Vec<f64> = effects.iter().map(|e| trace_product(e, sigma).re).collect();
    for v in p.iter_mut() {
        if *v < -NEGATIVE_PROBABILITY_TOL {
            return Err(Error::Numerical(format!("outcome probability {v:.3e} in round {round}")));
        }
        *v = v.max(0.0);
    }
    let total: f64 = p.iter().sum();
    if total <= NEGATIVE_PROBABILITY_TOL {
        return Err(Error::DeadBranch { round });
    }
    p.iter_mut().for_each(|v| *v /= total);
    Ok(p)
}

fn sample(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    // Roundoff in the cumulative sum: fall back to the last possible outcome.
    p.iter().rposition(|&v| v > 0.0).unwrap_or(0)
}

/// `r` rounds of: measure with `{K_i}`, recover the branch with `R`, renormalize.
pub fn run_measure_recover(
    sigma: &DensityMatrix,
    mc: &MeasurementChannel,
    r: &RecoveryMap,
    rounds: usize,
    seed: u64,
) -> Result<ProtocolTrace> {
    run_measure_recover_with(sigma, mc, r, rounds, seed, false)
}

pub fn run_measure_recover_with(
    sigma: &DensityMatrix,
    mc: &MeasurementChannel,
    r: &RecoveryMap,
    rounds: usize,
    seed: u64,
    keep_states: bool,
) -> Result<ProtocolTrace> {
    check_complete(mc)?;
    check_dims(sigma, mc, r)?;
    if rounds == 0 {
        return Err(Error::InvalidParameter("rounds must be at least 1".into()));
    }
    let effects: Vec<Operator> = mc.kraus().iter().map(|k| k.adjoint() * k).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = sigma.matrix().clone();
    let mut outcomes = Vec::with_capacity(rounds);
    let mut probabilities = Vec::with_capacity(rounds);
    let mut branch_traces = Vec::with_capacity(rounds);
    let mut post_states = keep_states.then(Vec::new);
    for round in 0..rounds {
        let p = outcome_probabilities(&effects, &current, round)?;
        let i = sample(&p, &mut rng);
        let k = &mc.kraus()[i];
        let branch = r.apply(&(k * &current * k.adjoint()))?;
        let tr = trace(&branch).re;
        if tr <= NEGATIVE_PROBABILITY_TOL {
            return Err(Error::DeadBranch { round });
        }
        current = branch.unscale(tr);
        outcomes.push(i);
        probabilities.push(p);
        branch_traces.push(tr);
        if let Some(states) = post_states.as_mut() {
            states.push(current.clone());
        }
    }
    let mut empirical_means = BTreeMap::new();
    for i in 0..mc.len() {
        let count = outcomes.iter().filter(|&&o| o == i).count();
        empirical_means.insert(i, count as f64 / rounds as f64);
    }
    Ok(ProtocolTrace {
        outcomes,
        probabilities,
        branch_traces,
        empirical_means,
        rounds,
        seed,
        final_state: current,
        post_states,
    })
}

// ---------------------------------------------------------------------------
// Exact sequence distributions
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct SequenceDistributions {
    /// `Q(i₁, …, i_r)`, indexed by `Σ_ℓ i_ℓ k^{ℓ−1}`.
    pub q: Vec<f64>,
    /// Product measure of the single-round marginals, same indexing.
    pub p: Vec<f64>,
    pub tv: f64,
    /// `Σ_i ‖T_i[σ] − σ Tr[T_i[σ]]‖₁`.
    pub eps: f64,
    pub rounds: usize,
    pub outcomes: usize,
    pub bound_holds: bool,
    /// Largest difference of the round-one marginals of `Q` and `P`.
    pub first_round_gap: f64,
}

pub fn sequence_distribution_exact(
    sigma: &DensityMatrix,
    mc: &MeasurementChannel,
    r: &RecoveryMap,
    rounds: usize,
) -> Result<SequenceDistributions> {
    check_complete(mc)?;
    check_dims(sigma, mc, r)?;
    let k = mc.len();
    if rounds == 0 {
        return Err(Error::InvalidParameter("rounds must be at least 1".into()));
    }
    let count = (k as f64).powi(rounds as i32);
    if count > MAX_SEQUENCES {
        return Err(Error::EnumerationTooLarge(count));
    }
    let d = sigma.dim();
    let maps: Vec<Superop> = mc
        .kraus()
        .iter()
        .map(|kr| r.superop().compose(&Superop::from_kraus(std::slice::from_ref(kr))?))
        .collect::<Result<_>>()?;

    let s = sigma.matrix();
    let mut marginal = Vec::with_capacity(k);
    let mut eps = 0.0;
    for t in &maps {
        let img = t.apply(s)?;
        let q = trace(&img).re;
        eps += trace_norm(&(img - s.scale(q)));
        marginal.push(q);
    }

    let n_seq = count as usize;
    let mut q = vec![0.0; n_seq];
    // Depth-first over prefixes; the vectorized operator is carried down.
    let trace_idx: Vec<usize> = (0..d).map(|i| i + d * i).collect();
    let mut stack: Vec<(usize, usize, usize, nalgebra::DVector<crate::operator::C64>)> =
        vec![(0, 0, 1, vectorize(s))];
    while let Some((depth, index, stride, v)) = stack.pop() {
        if depth == rounds {
            q[index] = trace_idx.iter().map(|&t| v[t].re).sum();
            continue;
        }
        for (i, t) in maps.iter().enumerate() {
            stack.push((depth + 1, index + i * stride, stride * k, t.matrix() * &v));
        }
    }
    let p: Vec<f64> = (0..n_seq)
        .map(|mut idx| {
            let mut prod = 1.0;
            for _ in 0..rounds {
                prod *= marginal[idx % k];
                idx /= k;
            }
            prod
        })
        .collect();
    let tv = 0.5 * q.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>();
    let mut first = vec![0.0; k];
    for (idx, v) in q.iter().enumerate() {
        first[idx % k] += v;
    }
    let first_round_gap = first
        .iter()
        .zip(&marginal)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(SequenceDistributions {
        bound_holds: tv <= rounds as f64 * eps + 1e-9,
        q,
        p,
        tv,
        eps,
        rounds,
        outcomes: k,
        first_round_gap,
    })
}

// ---------------------------------------------------------------------------
// Concentration bounds
// ---------------------------------------------------------------------------

fn check_tau_eps(tau: f64, eps: f64) -> Result<()> {
    if !(tau > 0.0) || !(eps >= 0.0) {
        return Err(Error::InvalidParameter(format!("need τ > 0 and ε ≥ 0, got τ = {tau}, ε = {eps}")));
    }
    Ok(())
}

/// `2 e^{−2rτ²} + rε`.
pub fn hoeffding_failure_bound(rounds: u64, tau: f64, eps: f64) -> Result<f64> {
    check_tau_eps(tau, eps)?;
    if rounds == 0 {
        return Err(Error::InvalidParameter("rounds must be at least 1".into()));
    }
    let r = rounds as f64;
    Ok(2.0 * (-2.0 * r * tau * tau).exp() + r * eps)
}

/// `⌈ln(4τ²/ε) / (2τ²)⌉`, at least one round.
pub fn optimal_rounds(tau: f64, eps: f64) -> Result<u64> {
    check_tau_eps(tau, eps)?;
    if eps == 0.0 {
        return Err(Error::InvalidParameter("the round count diverges at ε = 0".into()));
    }
    let r = ((4.0 * tau * tau / eps).ln() / (2.0 * tau * tau)).ceil();
    Ok(r.max(1.0) as u64)
}

/// `(ε/2τ²) ln(4eτ²/ε) + ε`: the failure bound at the optimal round count.
pub fn failure_probability_at_optimal(tau: f64, eps: f64) -> Result<f64> {
    check_tau_eps(tau, eps)?;
    if eps == 0.0 {
        return Ok(0.0);
    }
    let t2 = tau * tau;
    Ok(eps / (2.0 * t2) * (4.0 * std::f64::consts::E * t2 / eps).ln() + eps)
}

#[derive(Clone, Debug, Serialize)]
pub struct HoeffdingReport {
    pub outcome: usize,
    pub exact_probability: f64,
    pub rounds: usize,
    pub tau: f64,
    pub eps: f64,
    pub runs: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub bound: f64,
    pub standard_error: f64,
    pub holds: bool,
    pub seed: u64,
}

/// Binomial standard error at success probability `p` clipped into `[0, 1]`.
pub fn binomial_standard_error(p: f64, trials: usize) -> f64 {
    let p = p.clamp(0.0, 1.0);
    (p * (1.0 - p) / trials as f64).sqrt()
}

/// Frequency of `|μ̂_i − Tr[K_i†K_iσ]| ≥ τ` over seeded runs, against the concentration bound.
#[allow(clippy::too_many_arguments)]
pub fn hoeffding_experiment(
    sigma: &DensityMatrix,
    mc: &MeasurementChannel,
    r: &RecoveryMap,
    outcome: usize,
    rounds: usize,
    tau: f64,
    runs: usize,
    seed: u64,
) -> Result<HoeffdingReport> {
    if outcome >= mc.len() {
        return Err(Error::InvalidParameter(format!("outcome {outcome} out of range")));
    }
    let k = &mc.kraus()[outcome];
    let exact = trace_product(&(k.adjoint() * k), sigma.matrix()).re;
    let eps = crate::diagnostics::strong_markov_measurement_error(sigma, mc, r)?;
    let bound = hoeffding_failure_bound(rounds as u64, tau, eps)?;
    let failures: Vec<bool> = (0..runs as u64)
        .into_par_iter()
        .map(|run| {
            let trace = run_measure_recover(sigma, mc, r, rounds, trial_seed(seed, run))?;
            Ok((trace.empirical_means[&outcome] - exact).abs() >= tau)
        })
        .collect::<Result<_>>()?;
    let failures = failures.iter().filter(|&&f| f).count();
    let failure_rate = failures as f64 / runs as f64;
    let standard_error = binomial_standard_error(bound, runs);
    Ok(HoeffdingReport {
        outcome,
        exact_probability: exact,
        rounds,
        tau,
        eps,
        runs,
        failures,
        failure_rate,
        bound,
        standard_error,
        holds: failure_rate <= bound + 3.0 * standard_error,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Distinguisher
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct DistinguisherReport {
    pub delta: f64,
    pub tau: f64,
    /// `Tr[P σ₁]` and `Tr[P σ₂]` for the Helstrom projector `P`.
    pub q: [f64; 2],
    pub threshold: f64,
    /// Largest per-Kraus strong Markov error over both states.
    pub eps: f64,
    pub eps_prime: f64,
    pub rounds: usize,
    pub rounds_capped: bool,
    pub trials: usize,
    pub failures: [usize; 2],
    pub failure_rate: f64,
    /// Closed form `(16ε/δ²) ln(eδ²/8ε) + 2ε`; meaningful only when its log argument exceeds one.
    pub closed_form: f64,
    /// Whether `eδ²/(8ε) > 1`, the regime where the closed form is a valid bound.
    pub closed_form_valid: bool,
    /// `"closed_form"` or `"finite_round"`.
    pub bound_regime: &'static str,
    /// The bound actually tested: the closed form when valid and uncapped, else `2e^{−2rτ²} + rε′`.
    pub bound: f64,
    pub standard_error: f64,
    pub holds: bool,
    pub seed: u64,
}

/// Distinguishes `σ₁` from `σ₂` by repeated Helstrom measurements on `A` with recovery.
pub fn distinguisher(
    sigma1: &DensityMatrix,
    sigma2: &DensityMatrix,
    r: &RecoveryMap,
    region: &[usize],
    trials: usize,
    seed: u64,
    max_rounds: usize,
) -> Result<DistinguisherReport> {
    let n = sigma1.qubits();
    if sigma2.qubits() != n {
        return Err(Error::DimensionMismatch {
            expected: sigma1.dim(),
            got: sigma2.dim(),
        });
    }
    let mut region = region.to_vec();
    region.sort_unstable();
    let diff = partial_trace(sigma1.matrix(), &region, n)? - partial_trace(sigma2.matrix(), &region, n)?;
    let delta = trace_norm(&diff);
    if delta < MIN_DISTINGUISHABILITY {
        return Err(Error::Indistinguishable(delta));
    }
    let meas = measurement_from_observable(&diff, &region, n)?;
    let mc = &meas.channel;
    let p_full = embed(&meas.positive, &region, n)?;
    let q = [
        trace_product(&p_full, sigma1.matrix()).re,
        trace_product(&p_full, sigma2.matrix()).re,
    ];
    let threshold = 0.5 * (q[0] + q[1]);
    let tau = delta / 4.0;

    let mut eps: f64 = 0.0;
    for s in [sigma1, sigma2] {
        for k in mc.kraus() {
            eps = eps.max(strong_markov_error(s, k, r)?);
        }
    }
    let eps_prime = 2.0 * eps;
    let ideal = if eps_prime > 0.0 {
        optimal_rounds(tau, eps_prime)? as f64
    } else {
        f64::INFINITY
    };
    let rounds_capped = ideal > max_rounds as f64;
    let rounds = if rounds_capped { max_rounds } else { ideal as usize };
    let closed_form = closed_form_failure_bound(delta, eps);
    let closed_form_valid = eps == 0.0 || std::f64::consts::E * delta * delta / (8.0 * eps) > 1.0;
    let (bound_regime, bound) = if closed_form_valid && !rounds_capped {
        ("closed_form", closed_form)
    } else {
        ("finite_round", hoeffding_failure_bound(rounds as u64, tau, eps_prime)?)
    };

    let outcomes: Vec<[bool; 2]> = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut wrong = [false; 2];
            for (s, state) in [sigma1, sigma2].into_iter().enumerate() {
                let t = run_measure_recover(state, mc, r, rounds, trial_seed(seed, 2 * trial + s as u64))?;
                let says_first = t.empirical_means[&0] > threshold;
                wrong[s] = says_first != (s == 0);
            }
            Ok(wrong)
        })
        .collect::<Result<_>>()?;
    let failures = [
        outcomes.iter().filter(|w| w[0]).count(),
        outcomes.iter().filter(|w| w[1]).count(),
    ];
    let total = 2 * trials;
    let failure_rate = (failures[0] + failures[1]) as f64 / total as f64;
    let standard_error = binomial_standard_error(bound, total);
    Ok(DistinguisherReport {
        delta,
        tau,
        q,
        threshold,
        eps,
        eps_prime,
        rounds,
        rounds_capped,
        trials,
        failures,
        failure_rate,
        closed_form,
        closed_form_valid,
        bound_regime,
        bound,
        standard_error,
        holds: failure_rate <= bound + 3.0 * standard_error,
        seed,
    })
}

/// `Σ_i ‖T_i[X]‖₁`; at most `‖X‖₁` for the branches of an instrument.
pub fn sum_trace_norm(maps: &[Superop], x: &Operator) -> Result<f64> {
    maps.iter().map(|t| Ok(trace_norm(&t.apply(x)?))).sum()
}

/// `(16ε/δ²) ln(eδ²/(8ε)) + 2ε`.
pub fn closed_form_failure_bound(delta: f64, eps: f64) -> f64 {
    if eps == 0.0 {
        return 0.0;
    }
    let d2 = delta * delta;
    16.0 * eps / d2 * (std::f64::consts::E * d2 / (8.0 * eps)).ln() + 2.0 * eps
}

// ---------------------------------------------------------------------------
// Local extremality
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ExtremalityEntry {
    pub label: String,
    pub q: [f64; 2],
    /// Errors for `σ`, `σ₁` and `σ₂`.
    pub errors: [f64; 3],
    pub eps_tilde: f64,
    /// `p₁p₂(q₁ − q₂)²`.
    pub scalar_lhs: f64,
    pub scalar_holds: bool,
    /// `‖p₁q₁σ₁ + p₂q₂σ₂ − (p₁q₁ + p₂q₂)σ‖₁`.
    pub identity_residual: f64,
    pub identity_holds: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExtremalityReport {
    pub p1: f64,
    pub lhs: f64,
    pub eps: f64,
    pub rhs: f64,
    pub holds: bool,
    pub scalar_all_hold: bool,
    pub identity_all_hold: bool,
    pub entries: Vec<ExtremalityEntry>,
}

/// Checks `‖σ₁^A − σ₂^A‖₁ ≤ 2√(2ε/(p₁p₂))` for `σ = p₁σ₁ + p₂σ₂` with measured `ε`.
///
/// The Helstrom projector of the two marginals is always added to `ensemble`,
/// which makes the check a consequence of the per-`K` inequalities alone.
pub fn extremality_check(
    sigma1: &DensityMatrix,
    sigma2: &DensityMatrix,
    p1: f64,
    r: &RecoveryMap,
    region: &[usize],
    ensemble: &[LabeledK],
) -> Result<ExtremalityReport> {
    if !(p1 > 0.0 && p1 < 1.0) {
        return Err(Error::InvalidParameter(format!("mixing weight {p1} must lie in (0, 1)")));
    }
    let p2 = 1.0 - p1;
    let n = sigma1.qubits();
    let mut region = region.to_vec();
    region.sort_unstable();
    let sigma = sigma1.mix(p1, sigma2)?;
    let diff = partial_trace(sigma1.matrix(), &region, n)? - partial_trace(sigma2.matrix(), &region, n)?;
    let lhs = trace_norm(&diff);

    let mut candidates: Vec<LabeledK> = ensemble.to_vec();
    if lhs > 0.0 {
        let meas = measurement_from_observable(&diff, &region, n)?;
        candidates.push(LabeledK {
            label: "helstrom".into(),
            op: meas.positive,
        });
    }
    let delta_full = sigma1.matrix() - sigma2.matrix();
    let delta_norm = trace_norm(&delta_full);
    let mut entries = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let k = embed(&cand.op, &region, n)?;
        let eff = k.adjoint() * &k;
        let q = [
            trace_product(&eff, sigma1.matrix()).re,
            trace_product(&eff, sigma2.matrix()).re,
        ];
        let errors = [
            strong_markov_error(&sigma, &k, r)?,
            strong_markov_error(sigma1, &k, r)?,
            strong_markov_error(sigma2, &k, r)?,
        ];
        let eps_tilde = errors.iter().copied().fold(0.0, f64::max);
        let scalar_lhs = p1 * p2 * (q[0] - q[1]).powi(2);
        // p₁q₁σ₁ + p₂q₂σ₂ − qσ = p₁p₂(q₁ − q₂)(σ₁ − σ₂)
        let identity_residual = p1 * p2 * (q[0] - q[1]).abs() * delta_norm;
        entries.push(ExtremalityEntry {
            label: cand.label,
            q,
            errors,
            eps_tilde,
            scalar_lhs,
            scalar_holds: scalar_lhs <= 2.0 * eps_tilde + 1e-12,
            identity_residual,
            identity_holds: identity_residual <= 2.0 * eps_tilde + 1e-9,
        });
    }
    let eps = entries.iter().map(|e| e.eps_tilde).fold(0.0, f64::max);
    let rhs = 2.0 * (2.0 * eps / (p1 * p2)).sqrt();
    Ok(ExtremalityReport {
        p1,
        lhs,
        eps,
        rhs,
        holds: lhs <= rhs + 1e-8,
        scalar_all_hold: entries.iter().all(|e| e.scalar_holds),
        identity_all_hold: entries.iter().all(|e| e.identity_holds),
        entries,
    })
}
