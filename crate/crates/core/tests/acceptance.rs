// Copyright 2026 The qmarkov Authors
// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite: one line per criterion, run with `cargo test --test acceptance`.
//! Pass criterion numbers as arguments to run a subset.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qmarkov::diagnostics::{clustering_epsilon, clustering_from_strong_markov, k_ensemble_registry, strong_markov_error, AdbKernel};
use qmarkov::error::Result;
use qmarkov::experiment::{run_stages, to_json_bytes, write_outputs, Experiment, ExperimentConfig, RunOptions};
use qmarkov::lindblad::{
    full_lindbladian, recovery_registry, stationarity_residual, PreparedRecovery, RecoveryContext, RecoveryMap,
    RecoveryScope, SpectralKernels,
};
use qmarkov::operator::{
    embed, frobenius, random, single_site_paulis, trace_norm, DensityMatrix, MeasurementChannel, Operator,
    Tripartition,
};
use qmarkov::protocols::{
    binomial_standard_error, distinguisher, extremality_check, hoeffding_experiment, sequence_distribution_exact,
    sum_trace_norm,
};
use qmarkov::quadrature;
use qmarkov::spectral::{build_hamiltonian, gibbs_state, oft, EigenSystem, FilterParams, HamiltonianSpec, ModelParams};
use qmarkov::states::{perturbed_gibbs, sector_gibbs, Sector};
use qmarkov::superop::Superop;

struct Outcome {
    pass: bool,
    detail: String,
}

enum Expect {
    Pass,
    /// Fails for a reason established by analysis; the predicate confirms that reason.
    KnownFailure(&'static str, fn(&Outcome) -> bool),
}

type Criterion = (u32, &'static str, fn() -> Result<Outcome>, Expect);

fn spec(model: &str, n: usize, params: ModelParams, beta: f64) -> HamiltonianSpec {
    build_hamiltonian(model, n, &params, beta, 0).expect("valid model")
}

fn default_spec(model: &str, n: usize, beta: f64) -> HamiltonianSpec {
    spec(model, n, ModelParams::default(), beta)
}

fn prepared(spec: &HamiltonianSpec, region: &[usize]) -> Result<PreparedRecovery> {
    let kernels = SpectralKernels::from_spec(spec)?;
    PreparedRecovery::new(&full_lindbladian(region, &kernels)?, "eigen")
}

fn c1_gibbs_fixed_point() -> Result<Outcome> {
    let (mut res, mut adb): (f64, f64) = (0.0, 0.0);
    let mut cases = 0;
    for model in ["tfim", "heisenberg"] {
        for n in 2..=4 {
            for beta in [0.2, 1.0, 3.0] {
                let s = default_spec(model, n, beta);
                let kernels = Arc::new(SpectralKernels::from_spec(&s)?);
                let all: Vec<usize> = (0..n).collect();
                let l = full_lindbladian(&all, &kernels)?;
                let rho = gibbs_state(&s)?;
                res = res.max(stationarity_residual(&rho, &l)?);
                let k = AdbKernel::new(kernels);
                for jump in single_site_paulis(&all, n)? {
                    adb = adb.max(k.error(&rho, &jump)?);
                }
                cases += 1;
            }
        }
    }
    Ok(Outcome {
        pass: res <= 1e-7 && adb <= 1e-8,
        detail: format!("{cases} cases, max residual {res:.2e}, max adb {adb:.2e}"),
    })
}

fn c2_parseval() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for n in 1..=3 {
        let s = default_spec("tfim", n, 1.0);
        let es = EigenSystem::from_spec(&s)?;
        let fp = FilterParams::for_beta(1.0)?;
        let span = es.bohr_gaps().abs().max() + 12.0 * fp.sigma;
        for _ in 0..20 {
            let g = random::ginibre(1 << n, &mut rng);
            let a = g.unscale(frobenius(&g));
            let est = quadrature::integrate(
                |w| frobenius(&oft(&a, w, &es, &fp).expect("square")).powi(2),
                -span,
                span,
                &[],
                1e-9,
                4000,
            )?;
            worst = worst.max((est.value - 1.0).abs());
            count += 1;
        }
    }
    Ok(Outcome {
        pass: worst <= 1e-6,
        detail: format!("{count} operators, max |∫‖Â‖² − ‖A‖²| = {worst:.2e} (unit norm)"),
    })
}

fn c3_cptp() -> Result<Outcome> {
    let systems = [
        (default_spec("tfim", 3, 1.0), vec![0, 1]),
        (default_spec("heisenberg", 3, 0.2), vec![1]),
        (default_spec("tfim", 2, 3.0), vec![0, 1]),
        (default_spec("random_klocal", 3, 1.0), vec![0, 2]),
        (default_spec("tfim", 4, 1.0), vec![0, 1, 2, 3]),
    ];
    let (mut choi, mut tp) = (f64::INFINITY, 0.0f64);
    for (s, region) in &systems {
        let p = prepared(s, region)?;
        for t in [0.1, 1.0, 10.0, 100.0] {
            for map in [p.propagator(t)?, p.at(t)?.superop().clone()] {
                choi = choi.min(map.choi_min_eigenvalue());
                tp = tp.max(map.trace_preservation_error());
            }
        }
    }
    Ok(Outcome {
        pass: choi >= -1e-7 && tp <= 1e-8,
        detail: format!("{} systems x 4 times, min Choi eigenvalue {choi:.2e}, max TP error {tp:.2e}", systems.len()),
    })
}

fn c4_clustering() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let models = ["tfim", "heisenberg", "random_klocal"];
    let mut instances = 0;
    let mut min_slack = f64::INFINITY;
    let mut max_lhs: f64 = 0.0;
    while instances < 60 {
        let n = rng.random_range(3..=4);
        let model = models[rng.random_range(0..models.len())];
        let beta = [0.2, 0.5, 1.0, 2.0][rng.random_range(0..4)];
        let s = build_hamiltonian(model, n, &ModelParams::default(), beta, rng.random())?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let na = if n == 4 { rng.random_range(1..=2) } else { 1 };
        let nc = if n - na >= 3 { rng.random_range(1..=2) } else { 1 };
        let mut a = order[..na].to_vec();
        let mut b = order[na..n - nc].to_vec();
        let mut c = order[n - nc..].to_vec();
        a.sort_unstable();
        b.sort_unstable();
        c.sort_unstable();
        let tri = Tripartition::new(n, &a, &b, &c)?;
        let sigma = if rng.random_bool(0.5) {
            gibbs_state(&s)?
        } else {
            perturbed_gibbs(&s, &a, rng.random_range(0.0..0.3))?
        };
        let ab = tri.ab();
        let ctx = RecoveryContext {
            spec: &s,
            region: &ab,
            sigma: &sigma,
            scope: RecoveryScope::Restricted,
            evaluator: "eigen",
        };
        let family = recovery_registry().get("lindblad")?.prepare(&ctx)?;
        let t = [0.1, 1.0, 10.0, 100.0][rng.random_range(0..4)];
        let r = family.at(t)?;
        let opt = clustering_epsilon(&sigma, &a, &c, 2, rng.random())?;
        let pairs = [
            (opt.x_a.clone(), opt.y_c.clone()),
            (random::unitary(1 << na, &mut rng), random::unitary(1 << nc, &mut rng)),
        ];
        for (x, y) in &pairs {
            let b = clustering_from_strong_markov(&sigma, &tri, &r, x, y)?;
            min_slack = min_slack.min(b.bound - b.lhs);
            max_lhs = max_lhs.max(b.lhs);
        }
        instances += 1;
    }
    Ok(Outcome {
        pass: min_slack >= 0.0,
        detail: format!("{instances} instances x 2 operator pairs, max covariance {max_lhs:.3}, min slack {min_slack:.3e}"),
    })
}

fn trine(n: usize) -> Result<MeasurementChannel> {
    let kraus: Vec<Operator> = (0..3)
        .map(|j| {
            let th = 2.0 * std::f64::consts::PI * j as f64 / 3.0;
            let v = nalgebra::DVector::from_vec(vec![C64::new((th / 2.0).cos(), 0.0), C64::new((th / 2.0).sin(), 0.0)]);
            (&v * v.adjoint()).scale((2.0f64 / 3.0).sqrt())
        })
        .collect();
    MeasurementChannel::from_local(&kraus, &[0], n)
}

fn c5_tv_bound() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut states: Vec<(String, DensityMatrix, PreparedRecovery)> = Vec::new();
    for (model, beta) in [("tfim", 1.0), ("heisenberg", 0.5)] {
        let s = default_spec(model, 2, beta);
        states.push((format!("{model} gibbs"), gibbs_state(&s)?, prepared(&s, &[0, 1])?));
    }
    let tfim = default_spec("tfim", 2, 1.0);
    for i in 0..2 {
        states.push((format!("random {i}"), random::density(2, &mut rng), prepared(&tfim, &[0])?));
    }
    let mut configs = 0;
    let mut enumerations = 0;
    let mut worst_ratio: f64 = 0.0;
    let mut all_hold = true;
    for (_, sigma, p) in &states {
        for mc in [MeasurementChannel::computational_basis(&[0], 2)?, trine(2)?] {
            for t in [1.0, 10.0, 100.0] {
                let r = p.at(t)?;
                configs += 1;
                for rounds in 1..=4 {
                    let d = sequence_distribution_exact(sigma, &mc, &r, rounds)?;
                    all_hold &= d.tv <= rounds as f64 * d.eps + 1e-12;
                    if d.eps > 0.0 {
                        worst_ratio = worst_ratio.max(d.tv / (rounds as f64 * d.eps));
                    }
                    enumerations += 1;
                }
            }
        }
    }
    Ok(Outcome {
        pass: all_hold && configs >= 20,
        detail: format!("{configs} configurations, {enumerations} enumerations, max tv/(r eps) = {worst_ratio:.3}"),
    })
}

fn random_isometry_blocks(d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Operator> {
    let g = DMatrix::from_fn(k * d, d, |_, _| random::gaussian_complex(rng));
    let q = g.qr().q();
    (0..k).map(|i| q.rows(i * d, d).into_owned()).collect()
}

fn c6_sum_trace() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = f64::NEG_INFINITY;
    let sets = 120;
    for i in 0..sets {
        let d = 1 << rng.random_range(1..=2);
        let k = rng.random_range(1..=4);
        let kraus = random_isometry_blocks(d, k, &mut rng);
        let recovery = if i % 3 == 0 {
            Superop::identity(d)
        } else {
            Superop::from_kraus(&random_isometry_blocks(d, rng.random_range(1..=3), &mut rng))?
        };
        let maps: Vec<Superop> = kraus
            .iter()
            .map(|k| recovery.compose(&Superop::from_kraus(std::slice::from_ref(k))?))
            .collect::<Result<_>>()?;
        for x in [random::hermitian(d, &mut rng), random::ginibre(d, &mut rng)] {
            worst = worst.max(sum_trace_norm(&maps, &x)? - trace_norm(&x));
        }
    }
    Ok(Outcome {
        pass: worst <= 1e-10,
        detail: format!("{sets} Kraus sets, max excess {worst:.2e}"),
    })
}

fn c7_tomography() -> Result<Outcome> {
    let s = default_spec("tfim", 3, 1.0);
    let sigma = gibbs_state(&s)?;
    let mc = MeasurementChannel::computational_basis(&[0], 3)?;
    let oracle = hoeffding_experiment(&sigma, &mc, &RecoveryMap::perfect(&sigma), 0, 200, 0.1, 1000, 70)?;
    let ideal = 2.0 * (-4.0f64).exp();
    let oracle_ok = oracle.failure_rate <= ideal + 3.0 * binomial_standard_error(ideal, 1000);
    let r = prepared(&s, &[0, 1])?.at(100.0)?;
    let real = hoeffding_experiment(&sigma, &mc, &r, 0, 200, 0.1, 1000, 71)?;
    Ok(Outcome {
        pass: oracle_ok && real.holds,
        detail: format!(
            "oracle: rate {:.4} vs {:.4}; t=100: eps {:.3e}, rate {:.4} vs bound {:.3}",
            oracle.failure_rate, ideal, real.eps, real.failure_rate, real.bound
        ),
    })
}

fn c8_distinguisher() -> Result<Outcome> {
    let h = |h| ModelParams {
        h: Some(h),
        ..Default::default()
    };
    let s1 = spec("tfim", 3, h(1.0), 1.0);
    let s2 = spec("tfim", 3, h(1.2), 1.0);
    let (g1, g2) = (gibbs_state(&s1)?, gibbs_state(&s2)?);
    let r = prepared(&s1, &[0, 1, 2])?.at(1000.0)?;
    let rep = distinguisher(&g1, &g2, &r, &[0, 1], 400, 8, 20_000)?;
    let se = binomial_standard_error(rep.closed_form, 2 * rep.trials);
    let pass = rep.closed_form_valid && rep.failure_rate <= rep.closed_form + 3.0 * se;
    Ok(Outcome {
        pass,
        detail: format!(
            "delta {:.4}, eps {:.3}, e*delta^2/(8 eps) = {:.4}, closed form {:.1}, rate {:.3} (r = {}); finite-round bound {:.3}{}",
            rep.delta,
            rep.eps,
            std::f64::consts::E * rep.delta * rep.delta / (8.0 * rep.eps),
            rep.closed_form,
            rep.failure_rate,
            rep.rounds,
            rep.bound,
            if rep.closed_form_valid { "" } else { " [closed form undefined]" }
        ),
    })
}

fn c9_extremality() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let reg = k_ensemble_registry();
    let mut instances = 0;
    let mut per_k = 0;
    let mut all = true;
    let mut min_slack = f64::INFINITY;
    for n in [2, 3] {
        for beta in [0.5, 1.0, 2.0] {
            for h in [0.0, 0.5, 1.0] {
                let params = ModelParams {
                    j: Some(-1.0),
                    h: Some(h),
                    ..Default::default()
                };
                let s = spec("tfim", n, params, beta);
                let (s1, s2) = (sector_gibbs(&s, Sector::Positive)?, sector_gibbs(&s, Sector::Negative)?);
                let all_sites: Vec<usize> = (0..n).collect();
                let p = prepared(&s, &all_sites)?;
                for t in [10.0, 1000.0] {
                    let r = p.at(t)?;
                    for p1 in [0.3, 0.5] {
                        let mut ens = reg.get("pauli")?.generate(1, 0, &mut rng)?;
                        ens.extend(reg.get("projectors")?.generate(1, 4, &mut rng)?);
                        let rep = extremality_check(&s1, &s2, p1, &r, &[0], &ens)?;
                        all &= rep.scalar_all_hold && rep.identity_all_hold && rep.lhs <= rep.rhs + 1e-8;
                        min_slack = min_slack.min(rep.rhs - rep.lhs);
                        per_k += rep.entries.len();
                        instances += 1;
                    }
                }
            }
        }
    }
    Ok(Outcome {
        pass: all && instances >= 50,
        detail: format!("{instances} mixtures, {per_k} per-K checks, min marginal slack {min_slack:.3e}"),
    })
}

fn rank_one_projectors() -> Vec<(&'static str, Operator)> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let vecs = [
        ("0", [C64::new(1.0, 0.0), C64::new(0.0, 0.0)]),
        ("1", [C64::new(0.0, 0.0), C64::new(1.0, 0.0)]),
        ("+", [C64::new(s, 0.0), C64::new(s, 0.0)]),
        ("-", [C64::new(s, 0.0), C64::new(-s, 0.0)]),
        ("+i", [C64::new(s, 0.0), C64::new(0.0, s)]),
        ("-i", [C64::new(s, 0.0), C64::new(0.0, -s)]),
    ];
    vecs.into_iter()
        .map(|(l, v)| {
            let v = nalgebra::DVector::from_row_slice(&v);
            (l, &v * v.adjoint())
        })
        .collect()
}

fn c10_trend() -> Result<Outcome> {
    let grid = [0.1, 1.0, 10.0, 100.0, 1000.0];
    let mut monotone = true;
    let mut worst_final: f64 = 0.0;
    let mut worst_label = String::new();
    let mut cases = 0;
    for n in [3, 4] {
        for beta in [0.2, 1.0] {
            let s = default_spec("tfim", n, beta);
            let sigma = gibbs_state(&s)?;
            let all: Vec<usize> = (0..n).collect();
            let p = prepared(&s, &all)?;
            let maps: Vec<RecoveryMap> = grid.iter().map(|&t| p.at(t)).collect::<Result<_>>()?;
            for (label, k) in rank_one_projectors() {
                let k = embed(&k, &[0], n)?;
                let errs: Vec<f64> = maps
                    .iter()
                    .map(|r| strong_markov_error(&sigma, &k, r))
                    .collect::<Result<_>>()?;
                monotone &= errs.windows(2).all(|w| w[1] <= w[0] + 1e-6);
                let last = *errs.last().expect("nonempty grid");
                if last > worst_final {
                    worst_final = last;
                    worst_label = format!("n={n} beta={beta} K=|{label}><{label}|");
                }
                cases += 1;
            }
        }
    }
    Ok(Outcome {
        pass: monotone && worst_final < 1e-3,
        detail: format!(
            "{cases} (state, K) series, nonincreasing: {monotone}, worst error at t=1000 {worst_final:.2e} ({worst_label})"
        ),
    })
}

fn c11_determinism() -> Result<Outcome> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tfim3_all.json");
    let bytes = std::fs::read(&path)?;
    let config = ExperimentConfig::from_json(std::str::from_utf8(&bytes).expect("utf-8"))?;
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    let mut hashes = Vec::new();
    for dir in &dirs {
        let ex = Experiment::new(config.clone(), &RunOptions::default())?;
        let run = run_stages(&ex, "all")?;
        write_outputs(dir.path(), &run, &bytes, "all", ex.seed)?;
        hashes.push((to_json_bytes(&run.report)?, std::fs::read(dir.path().join("manifest.json"))?));
    }
    let same = hashes[0] == hashes[1];
    let mut files_same = true;
    for f in ["report.json", "series.csv", "outcomes.csv", "lindbladian.bin"] {
        files_same &= std::fs::read(dirs[0].path().join(f))? == std::fs::read(dirs[1].path().join(f))?;
    }
    Ok(Outcome {
        pass: same && files_same,
        detail: format!("two `all` runs, reports identical: {same}, all files identical: {files_same}"),
    })
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        (1, "gibbs fixed point", c1_gibbs_fixed_point, Expect::Pass),
        (2, "oft parseval", c2_parseval, Expect::Pass),
        (3, "cptp semigroup and recovery", c3_cptp, Expect::Pass),
        (4, "4eps clustering", c4_clustering, Expect::Pass),
        (5, "tv bound", c5_tv_bound, Expect::Pass),
        (6, "sum-trace contraction", c6_sum_trace, Expect::Pass),
        (7, "tomography hoeffding", c7_tomography, Expect::Pass),
        (
            8,
            "distinguisher",
            c8_distinguisher,
            Expect::KnownFailure("log argument below one, closed form negative", |o| {
                o.detail.contains("[closed form undefined]")
            }),
        ),
        (9, "local extremality", c9_extremality, Expect::Pass),
        (10, "strong markov trend", c10_trend, Expect::Pass),
        (11, "determinism", c11_determinism, Expect::Pass),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut unexpected = 0;
    for (id, name, run, expect) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let secs = start.elapsed().as_secs_f64();
        let (status, detail, ok) = match (result, &expect) {
            (Err(e), _) => ("ERROR", e.to_string(), false),
            (Ok(o), Expect::Pass) => (if o.pass { "PASS" } else { "FAIL" }, o.detail, o.pass),
            (Ok(o), Expect::KnownFailure(reason, confirm)) => {
                if o.pass {
                    ("PASS", o.detail, true)
                } else if confirm(&o) {
                    ("FAIL", format!("{} (expected: {reason})", o.detail), true)
                } else {
                    ("FAIL", o.detail, false)
                }
            }
        };
        if !ok {
            unexpected += 1;
        }
        println!("criterion {id:>2}  {name:<28} {status:<5} {detail}  [{secs:.1}s]");
    }
    if unexpected > 0 {
        println!("{unexpected} criteria failed unexpectedly");
        std::process::exit(1);
    }
}
