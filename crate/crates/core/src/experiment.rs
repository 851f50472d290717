// Copyright 2026 The qmarkov Authors
// SPDX-License-Identifier: Apache-2.0

//! Config-driven experiment runner shared by the CLI and the acceptance suite.
//!
//! Each subcommand is a [`Stage`] in [`stage_registry`]; `all` runs every stage in
//! registration order. Outputs are `report.json`, `series.csv` and
//! `manifest.json`, plus stage-specific files. None of them carry timestamps, so
//! a run is a pure function of the config bytes and the seed.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::diagnostics::{
    clustering_epsilon, clustering_from_strong_markov, k_ensemble_registry, markov_error, strong_markov_error,
    strong_markov_measurement_error, strong_markov_sup_estimate, trivialization_check, AdbKernel,
    ClusteringCertificate, ClusteringResult, DiagnosticsReport, LabeledK, SUPPORT_TOL,
};
use crate::error::{Error, Result};
use crate::lindblad::{
    full_lindbladian, recovery_registry, stationarity_residual, PreparedRecovery, RecoveryContext,
    RecoveryFamily, RecoveryMap, RecoveryScope, SpectralKernels,
};
use crate::operator::{embed, single_site_paulis, DensityMatrix, MeasurementChannel, Pauli, PauliString, Tripartition};
use crate::protocols::{
    distinguisher, extremality_check, hoeffding_experiment, run_measure_recover, sequence_distribution_exact,
    MAX_SEQUENCES,
};
use crate::registry::{Named, Registry};
use crate::spectral::{build_hamiltonian, gibbs_state, HamiltonianSpec, ModelParams, Term};
use crate::states::{load_state, perturbed_gibbs, sector_gibbs, Sector};

/// Largest system the runner accepts; superoperators scale as `16^n`.
pub const MAX_QUBITS: usize = 5;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianConfig {
    pub model: String,
    pub n: usize,
    pub beta: f64,
    #[serde(default)]
    pub params: ModelParams,
    #[serde(default)]
    pub seed: u64,
    /// Explicit Pauli terms; overrides `model` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms: Option<Vec<Term>>,
}

impl HamiltonianConfig {
    pub fn build(&self, params: &ModelParams) -> Result<HamiltonianSpec> {
        match &self.terms {
            Some(terms) => HamiltonianSpec::from_terms("explicit", self.n, self.beta, terms.clone()),
            None => build_hamiltonian(&self.model, self.n, params, self.beta, self.seed),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripartitionConfig {
    pub a: Vec<usize>,
    #[serde(default)]
    pub b: Vec<usize>,
    #[serde(default)]
    pub c: Vec<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateFamily {
    #[default]
    Gibbs,
    SectorGibbs {
        sector: Sector,
    },
    PerturbedGibbs {
        p: f64,
        /// Depolarized region; defaults to `A`.
        #[serde(default)]
        region: Option<Vec<usize>>,
    },
    ExplicitMatrixFile {
        path: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryRegion {
    A,
    #[default]
    Ab,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoveryConfig {
    #[serde(default = "default_strategy")]
    pub strategy: String,
    #[serde(default)]
    pub scope: RecoveryScope,
    #[serde(default = "default_evaluator")]
    pub evaluator: String,
    /// Jump region of the recovery Lindbladian.
    #[serde(default)]
    pub region: RecoveryRegion,
}

fn default_strategy() -> String {
    "lindblad".into()
}

fn default_evaluator() -> String {
    "eigen".into()
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            strategy: default_strategy(),
            scope: RecoveryScope::default(),
            evaluator: default_evaluator(),
            region: RecoveryRegion::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub clustering_restarts: usize,
    pub sup_samples: usize,
    pub k_ensembles: Vec<String>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            clustering_restarts: 10,
            sup_samples: 8,
            k_ensembles: vec!["pauli".into(), "projectors".into()],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub rounds: usize,
    pub tau: f64,
    /// Independent runs of the tomography protocol.
    pub runs: usize,
    /// Trials of the distinguisher.
    pub trials: usize,
    pub max_rounds: usize,
    /// Rounds enumerated exactly for the sequence distributions.
    pub sequence_rounds: usize,
    /// Replace the recovery map by `X ↦ σ Tr[X]` in the tomography stage.
    pub perfect_oracle: bool,
    /// Model parameters of the second Gibbs state for the distinguisher.
    pub second_params: Option<ModelParams>,
    pub mixture_p1: f64,
    pub seed: Option<u64>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            tau: 0.1,
            runs: 100,
            trials: 100,
            max_rounds: 20_000,
            sequence_rounds: 3,
            perfect_oracle: false,
            second_params: None,
            mixture_p1: 0.5,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub stationarity: f64,
    pub adb: f64,
    pub choi: f64,
    pub trace_preservation: f64,
    pub clustering_slack: f64,
    pub trend_slack: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            stationarity: 1e-7,
            adb: 1e-8,
            choi: 1e-7,
            trace_preservation: 1e-8,
            clustering_slack: 1e-8,
            trend_slack: 1e-6,
        }
    }
}

impl Tolerances {
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            stationarity: self.stationarity * s,
            adb: self.adb * s,
            choi: self.choi * s,
            trace_preservation: self.trace_preservation * s,
            clustering_slack: self.clustering_slack * s,
            trend_slack: self.trend_slack * s,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub hamiltonian: HamiltonianConfig,
    pub tripartition: TripartitionConfig,
    pub t_grid: Vec<f64>,
    #[serde(default)]
    pub state_family: StateFamily,
    #[serde(default)]
    pub recovery: RecoveryConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.hamiltonian.n;
        if n == 0 || n > MAX_QUBITS {
            return Err(Error::Config(format!("n = {n} outside 1..={MAX_QUBITS}")));
        }
        if !(self.hamiltonian.beta > 0.0 && self.hamiltonian.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.hamiltonian.beta)));
        }
        if self.t_grid.is_empty() {
            return Err(Error::Config("t_grid is empty".into()));
        }
        for w in self.t_grid.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config(format!("t_grid must be strictly ascending ({} then {})", w[0], w[1])));
            }
        }
        if let Some(&t) = self.t_grid.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(Error::Config(format!("t_grid entries must be positive, got {t}")));
        }
        let t = &self.tripartition;
        Tripartition::new(n, &t.a, &t.b, &t.c)?;
        let p = &self.protocol;
        if p.rounds == 0 || p.runs == 0 || p.trials == 0 || p.max_rounds == 0 || p.sequence_rounds == 0 {
            return Err(Error::Config("protocol counts must be positive".into()));
        }
        if !(p.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", p.tau)));
        }
        if !(p.mixture_p1 > 0.0 && p.mixture_p1 < 1.0) {
            return Err(Error::Config(format!("mixture_p1 must lie in (0, 1), got {}", p.mixture_p1)));
        }
        if self.diagnostics.sup_samples == 0 {
            return Err(Error::Config("sup_samples must be positive".into()));
        }
        let reg = k_ensemble_registry();
        for name in &self.diagnostics.k_ensembles {
            reg.get(name)?;
        }
        recovery_registry().get(&self.recovery.strategy)?;
        crate::semigroup::evaluator_registry().get(&self.recovery.evaluator)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Experiment context
// ---------------------------------------------------------------------------

/// Per-run options that do not belong to the config file.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub tolerance_scale: f64,
    /// Directory for relative paths inside the config.
    pub base_dir: PathBuf,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: None,
            tolerance_scale: 1.0,
            base_dir: PathBuf::from("."),
        }
    }
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub spec: HamiltonianSpec,
    pub tri: Tripartition,
    pub sigma: DensityMatrix,
    pub seed: u64,
    pub tol: Tolerances,
    kernels: OnceCell<Arc<SpectralKernels>>,
    recovery: OnceCell<Box<dyn RecoveryFamily>>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, opts: &RunOptions) -> Result<Self> {
        config.validate()?;
        if !(opts.tolerance_scale > 0.0) {
            return Err(Error::Config("tolerance scale must be positive".into()));
        }
        let spec = config.hamiltonian.build(&config.hamiltonian.params)?;
        let t = &config.tripartition;
        let tri = Tripartition::new(spec.n, &t.a, &t.b, &t.c)?;
        let sigma = match &config.state_family {
            StateFamily::Gibbs => gibbs_state(&spec)?,
            StateFamily::SectorGibbs { sector } => sector_gibbs(&spec, *sector)?,
            StateFamily::PerturbedGibbs { p, region } => {
                perturbed_gibbs(&spec, region.as_deref().unwrap_or(&tri.a), *p)?
            }
            StateFamily::ExplicitMatrixFile { path } => {
                let s = load_state(&opts.base_dir.join(path))?;
                if s.qubits() != spec.n {
                    return Err(Error::Config(format!(
                        "state file has {} qubits, Hamiltonian has {}",
                        s.qubits(),
                        spec.n
                    )));
                }
                s
            }
        };
        let seed = opts.seed.unwrap_or(config.seed);
        let tol = config.tolerances.scaled(opts.tolerance_scale);
        Ok(Self {
            config,
            spec,
            tri,
            sigma,
            seed,
            tol,
            kernels: OnceCell::new(),
            recovery: OnceCell::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.spec.n
    }

    /// Kernels of the full Hamiltonian.
    pub fn kernels(&self) -> Result<Arc<SpectralKernels>> {
        if let Some(k) = self.kernels.get() {
            return Ok(k.clone());
        }
        let k = Arc::new(SpectralKernels::from_spec(&self.spec)?);
        Ok(self.kernels.get_or_init(|| k).clone())
    }

    pub fn recovery_region(&self) -> Vec<usize> {
        match self.config.recovery.region {
            RecoveryRegion::A => self.tri.a.clone(),
            RecoveryRegion::Ab => self.tri.ab(),
        }
    }

    /// Hamiltonian generating the recovery dynamics.
    pub fn recovery_spec(&self) -> HamiltonianSpec {
        match self.config.recovery.scope {
            RecoveryScope::Global => self.spec.clone(),
            RecoveryScope::Restricted => self.spec.restricted_to(&self.recovery_region()),
        }
    }

    pub fn recovery_at(&self, t: f64) -> Result<RecoveryMap> {
        if self.recovery.get().is_none() {
            let region = self.recovery_region();
            let ctx = RecoveryContext {
                spec: &self.spec,
                region: &region,
                sigma: &self.sigma,
                scope: self.config.recovery.scope,
                evaluator: &self.config.recovery.evaluator,
            };
            let family = recovery_registry().get(&self.config.recovery.strategy)?.prepare(&ctx)?;
            let _ = self.recovery.set(family);
        }
        self.recovery.get().expect("initialized above").at(t)
    }

    pub fn t_max(&self) -> f64 {
        *self.config.t_grid.last().expect("validated non-empty")
    }

    pub fn derived_seed(&self, stream: u64) -> u64 {
        crate::protocols::trial_seed(self.seed, stream)
    }

    /// Candidate Kraus operators on `A`, local to its sorted qubits.
    pub fn k_ensemble(&self, seed: u64) -> Result<Vec<LabeledK>> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let reg = k_ensemble_registry();
        let mut out = Vec::new();
        for name in &self.config.diagnostics.k_ensembles {
            out.extend(reg.get(name)?.generate(
                self.tri.a.len(),
                self.config.diagnostics.sup_samples,
                &mut rng,
            )?);
        }
        Ok(out)
    }

    pub fn metadata(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        m.insert("hamiltonian".into(), json!(self.spec));
        m.insert("tripartition".into(), json!(self.tri));
        m.insert("t_grid".into(), json!(self.config.t_grid));
        m.insert("state_family".into(), json!(self.config.state_family));
        m.insert("recovery".into(), json!(self.config.recovery));
        m.insert("seed".into(), json!(self.seed));
        m.insert("tolerances".into(), json!(self.tol));
        m.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        m
    }
}

// ---------------------------------------------------------------------------
// Series
// ---------------------------------------------------------------------------

/// One row of `series.csv`; empty cells mean the quantity was not computed.
#[derive(Clone, Debug, Default)]
pub struct SeriesRow {
    pub t: f64,
    pub method: Option<String>,
    pub markov_err: Option<f64>,
    pub strong_markov_err: Option<f64>,
    pub strong_markov_sup: Option<f64>,
    pub measurement_err: Option<f64>,
    pub trivialization: Option<f64>,
    pub choi_min: Option<f64>,
    pub tp_error: Option<f64>,
}

pub struct Series {
    pub rows: Vec<SeriesRow>,
}

impl Series {
    pub fn new(t_grid: &[f64]) -> Self {
        Self {
            rows: t_grid
                .iter()
                .map(|&t| SeriesRow {
                    t,
                    ..Default::default()
                })
                .collect(),
        }
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Numerical(format!("csv: {e}"));
        w.write_record([
            "t",
            "method",
            "markov_err",
            "strong_markov_err",
            "strong_markov_sup",
            "measurement_err",
            "trivialization",
            "choi_min",
            "tp_error",
        ])
        .map_err(csv_err)?;
        let f = |v: Option<f64>| v.map(format_float).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                format_float(r.t),
                r.method.clone().unwrap_or_default(),
                f(r.markov_err),
                f(r.strong_markov_err),
                f(r.strong_markov_sup),
                f(r.measurement_err),
                f(r.trivialization),
                f(r.choi_min),
                f(r.tp_error),
            ])
            .map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Numerical(format!("csv: {e}")))
    }
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

#[derive(Default)]
pub struct StageOutput {
    pub value: Value,
    /// Extra files written next to the report.
    pub files: Vec<(String, Vec<u8>)>,
}

impl StageOutput {
    fn value(value: Value) -> Self {
        Self {
            value,
            files: Vec::new(),
        }
    }
}

pub trait Stage: Named + Send + Sync {
    fn run(&self, ex: &Experiment, series: &mut Series) -> Result<StageOutput>;
}

fn trend_nonincreasing(values: &[f64], slack: f64) -> bool {
    values.windows(2).all(|w| w[1] <= w[0] + slack)
}

pub struct BuildStage;

impl Named for BuildStage {
    fn name(&self) -> &'static str {
        "build"
    }
}

impl Stage for BuildStage {
    fn run(&self, ex: &Experiment, series: &mut Series) -> Result<StageOutput> {
        let region = ex.recovery_region();
        let spec = ex.recovery_spec();
        let kernels = SpectralKernels::from_spec(&spec)?;
        let l = full_lindbladian(&region, &kernels)?;
        // restricted dynamics fix the Gibbs state of the restricted Hamiltonian
        let gibbs = gibbs_state(&spec)?;
        let prepared = PreparedRecovery::new(&l, &ex.config.recovery.evaluator)?;
        let mut per_t = Vec::new();
        let mut cptp = true;
        for row in series.rows.iter_mut() {
            let prop = prepared.propagator(row.t)?;
            let rec = prepared.at(row.t)?;
            let p_choi = prop.choi_min_eigenvalue();
            let p_tp = prop.trace_preservation_error();
            let r_choi = rec.superop().choi_min_eigenvalue();
            let r_tp = rec.superop().trace_preservation_error();
            cptp &= p_choi >= -ex.tol.choi
                && r_choi >= -ex.tol.choi
                && p_tp <= ex.tol.trace_preservation
                && r_tp <= ex.tol.trace_preservation;
            row.choi_min = Some(p_choi.min(r_choi));
            row.tp_error = Some(p_tp.max(r_tp));
            row.method = Some(rec.method.clone());
            per_t.push(json!({
                "t": row.t,
                "propagator": {"choi_min": p_choi, "tp_error": p_tp},
                "recovery": {"choi_min": r_choi, "tp_error": r_tp, "method": rec.method},
            }));
        }
        let gibbs_residual = stationarity_residual(&gibbs, &l)?;
        let mut dump = Vec::new();
        l.matrix().write_binary_dump(&mut dump, &region, ex.spec.beta)?;
        Ok(StageOutput {
            value: json!({
                "region": region,
                "dim": l.dim(),
                "bohr_bins": kernels.es.bins.len(),
                "generator_tp_error": l.matrix().apply_adjoint(&crate::operator::identity(l.dim()))
                    .map(|x| crate::operator::op_norm(&x))?,
                "evaluator_method": prepared.method(),
                "stationarity_residual_gibbs": gibbs_residual,
                "stationarity_residual_state": stationarity_residual(&ex.sigma, &l)?,
                "per_t": per_t,
                "checks": {
                    "gibbs_fixed_point": gibbs_residual <= ex.tol.stationarity,
                    "cptp": cptp,
                },
            }),
            files: vec![("lindbladian.bin".into(), dump)],
        })
    }
}

pub struct AdbStage;

impl Named for AdbStage {
    fn name(&self) -> &'static str {
        "adb"
    }
}

impl AdbStage {
    fn compute(ex: &Experiment) -> Result<(BTreeMap<String, f64>, f64)> {
        let kernels = ex.kernels()?;
        let adb = AdbKernel::new(kernels.clone());
        let all: Vec<usize> = (0..ex.n()).collect();
        let mut per_jump = BTreeMap::new();
        for jump in single_site_paulis(&all, ex.n())? {
            per_jump.insert(jump.to_string(), adb.error(&ex.sigma, &jump)?);
        }
        let l = full_lindbladian(&all, &kernels)?;
        Ok((per_jump, stationarity_residual(&ex.sigma, &l)?))
    }
}

impl Stage for AdbStage {
    fn run(&self, ex: &Experiment, _series: &mut Series) -> Result<StageOutput> {
        let (per_jump, residual) = Self::compute(ex)?;
        let max = per_jump.values().copied().fold(0.0, f64::max);
        Ok(StageOutput::value(json!({
            "adb_per_jump": per_jump,
            "adb_max": max,
            "stationarity_residual": residual,
            "checks": {
                "adb_below_tolerance": max <= ex.tol.adb,
                "stationary": residual <= ex.tol.stationarity,
            },
        })))
    }
}

pub struct ClusterStage;

impl Named for ClusterStage {
    fn name(&self) -> &'static str {
        "cluster"
    }
}

impl ClusterStage {
    fn compute(ex: &Experiment) -> Result<ClusteringResult> {
        clustering_epsilon(
            &ex.sigma,
            &ex.tri.a,
            &ex.tri.c,
            ex.config.diagnostics.clustering_restarts,
            ex.derived_seed(1),
        )
    }
}

impl Stage for ClusterStage {
    fn run(&self, ex: &Experiment, _series: &mut Series) -> Result<StageOutput> {
        let r = Self::compute(ex)?;
        Ok(StageOutput::value(json!({
            "clustering": ClusteringCertificate::from(&r),
            "ascent_value": r.ascent_value,
            "estimator_kind": "lower_bound",
        })))
    }
}

pub struct MarkovStage;

impl Named for MarkovStage {
    fn name(&self) -> &'static str {
        "markov"
    }
}

impl Stage for MarkovStage {
    fn run(&self, ex: &Experiment, series: &mut Series) -> Result<StageOutput> {
        let noise = MeasurementChannel::depolarizing(&ex.tri.a, ex.n(), 1.0)?;
        let mut values = Vec::new();
        for row in series.rows.iter_mut() {
            let r = ex.recovery_at(row.t)?;
            let v = markov_error(&ex.sigma, &ex.tri.a, &noise, &r)?;
            row.markov_err = Some(v);
            row.method.get_or_insert(r.method.clone());
            values.push(v);
        }
        Ok(StageOutput::value(json!({
            "noise": "completely_depolarizing_on_a",
            "markov_err": values,
            "nonincreasing": trend_nonincreasing(&values, ex.tol.trend_slack),
        })))
    }
}

pub struct StrongMarkovStage;

impl Named for StrongMarkovStage {
    fn name(&self) -> &'static str {
        "strong-markov"
    }
}

impl Stage for StrongMarkovStage {
    fn run(&self, ex: &Experiment, series: &mut Series) -> Result<StageOutput> {
        let n = ex.n();
        let a = &ex.tri.a;
        let ensemble = ex.k_ensemble(ex.derived_seed(2))?;
        let embedded: Vec<(String, crate::operator::Operator)> = ensemble
            .iter()
            .map(|k| Ok((k.label.clone(), embed(&k.op, a, n)?)))
            .collect::<Result<_>>()?;
        let meas = MeasurementChannel::computational_basis(a, n)?;
        let cluster = ClusterStage::compute(ex)?;
        let probe = PauliString::single(n, a[0], Pauli::Z)?.to_dense();

        let mut per_k: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut max_series = Vec::new();
        let mut sup_series = Vec::new();
        let mut argmax_labels = Vec::new();
        let mut clustering_rows = Vec::new();
        for (idx, row) in series.rows.iter_mut().enumerate() {
            let r = ex.recovery_at(row.t)?;
            let mut worst: f64 = 0.0;
            for (label, k) in &embedded {
                let v = strong_markov_error(&ex.sigma, k, &r)?;
                per_k.entry(label.clone()).or_default().push(v);
                worst = worst.max(v);
            }
            let sup = strong_markov_sup_estimate(
                &ex.sigma,
                a,
                &r,
                ex.config.diagnostics.sup_samples,
                ex.derived_seed(100 + idx as u64),
            )?;
            let m = strong_markov_measurement_error(&ex.sigma, &meas, &r)?;
            let triv = trivialization_check(&r, &ex.tri.ab(), &probe, &ex.sigma)?;
            row.strong_markov_err = Some(worst);
            row.strong_markov_sup = Some(sup.eps_hat);
            row.measurement_err = Some(m);
            row.trivialization = Some(triv);
            row.method.get_or_insert(r.method.clone());
            max_series.push(worst);
            sup_series.push(sup.eps_hat);
            argmax_labels.push(sup.argmax.label);
            clustering_rows.push(
                match clustering_from_strong_markov(&ex.sigma, &ex.tri, &r, &cluster.x_a, &cluster.y_c) {
                    Ok(b) => json!(b),
                    Err(Error::SupportViolation(msg)) => json!({ "skipped": msg }),
                    Err(e) => return Err(e),
                },
            );
        }
        Ok(StageOutput::value(json!({
            "strong_markov_errs": per_k,
            "strong_markov_max": max_series,
            "sup_estimate": sup_series,
            "sup_argmax": argmax_labels,
            "estimator_kind": "lower_bound",
            "measurement": "computational_basis_on_a",
            "measurement_err": series.rows.iter().map(|r| r.measurement_err).collect::<Vec<_>>(),
            "trivialization_probe": format!("Z{}", a[0]),
            "clustering_from_strong_markov": clustering_rows,
            "support_tolerance": SUPPORT_TOL,
            "nonincreasing": trend_nonincreasing(&max_series, ex.tol.trend_slack),
        })))
    }
}

pub struct TomographyStage;

impl Named for TomographyStage {
    fn name(&self) -> &'static str {
        "tomography"
    }
}

/// Chi-squared test of independence of consecutive outcome pairs.
fn independence_test(outcomes: &[usize], k: usize) -> Value {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let mut table = vec![vec![0.0; k]; k];
    for w in outcomes.chunks_exact(2) {
        table[w[0]][w[1]] += 1.0;
    }
    let total: f64 = table.iter().flatten().sum();
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..k).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let used_rows = rows.iter().filter(|&&v| v > 0.0).count();
    let used_cols = cols.iter().filter(|&&v| v > 0.0).count();
    let mut chi2 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let e = rows[i] * cols[j] / total;
            if e > 0.0 {
                chi2 += (table[i][j] - e).powi(2) / e;
            }
        }
    }
    let dof = (used_rows.saturating_sub(1) * used_cols.saturating_sub(1)) as f64;
    let p_value = if dof > 0.0 {
        ChiSquared::new(dof).map(|d| 1.0 - d.cdf(chi2)).unwrap_or(1.0)
    } else {
        1.0
    };
    json!({"pairs": total, "chi2": chi2, "dof": dof, "p_value": p_value})
}

impl Stage for TomographyStage {
    fn run(&self, ex: &Experiment, _series: &mut Series) -> Result<StageOutput> {
        let p = &ex.config.protocol;
        let n = ex.n();
        let mc = MeasurementChannel::computational_basis(&ex.tri.a, n)?;
        let r = if p.perfect_oracle {
            RecoveryMap::perfect(&ex.sigma)
        } else {
            ex.recovery_at(ex.t_max())?
        };
        let seed = p.seed.unwrap_or_else(|| ex.derived_seed(3));
        let hoeffding = hoeffding_experiment(&ex.sigma, &mc, &r, 0, p.rounds, p.tau, p.runs, seed)?;
        let trace = run_measure_recover(&ex.sigma, &mc, &r, p.rounds, seed)?;

        let k = mc.len();
        let seq_rounds = (1..=p.sequence_rounds)
            .rev()
            .find(|&rr| (k as f64).powi(rr as i32) <= MAX_SEQUENCES.min(4096.0))
            .unwrap_or(1);
        let seq = sequence_distribution_exact(&ex.sigma, &mc, &r, seq_rounds)?;

        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Numerical(format!("csv: {e}"));
        w.write_record(["round", "outcome", "p_vector"]).map_err(csv_err)?;
        for (round, (o, pv)) in trace.outcomes.iter().zip(&trace.probabilities).enumerate() {
            let pv: Vec<String> = pv.iter().map(|v| format_float(*v)).collect();
            w.write_record([round.to_string(), o.to_string(), pv.join(";")])
                .map_err(csv_err)?;
        }
        let outcomes_csv = w.into_inner().map_err(|e| Error::Numerical(format!("csv: {e}")))?;

        let mut value = json!({
            "recovery": {"kind": r.kind, "t": r.t, "method": r.method},
            "hoeffding": hoeffding,
            "first_run": {
                "seed": trace.seed,
                "empirical_means": trace.empirical_means,
                "branch_trace_min": trace.branch_traces.iter().copied().fold(f64::INFINITY, f64::min),
            },
            "sequence_distributions": {
                "rounds": seq.rounds,
                "outcomes": seq.outcomes,
                "tv": seq.tv,
                "eps": seq.eps,
                "bound": seq.rounds as f64 * seq.eps,
                "bound_holds": seq.bound_holds,
                "first_round_gap": seq.first_round_gap,
            },
            "eps_note": "measured channel-specific error, not the supremum",
        });
        if p.perfect_oracle {
            value["independence"] = independence_test(&trace.outcomes, k);
        }
        Ok(StageOutput {
            value,
            files: vec![("outcomes.csv".into(), outcomes_csv)],
        })
    }
}

pub struct DistinguishStage;

impl Named for DistinguishStage {
    fn name(&self) -> &'static str {
        "distinguish"
    }
}

impl DistinguishStage {
    /// Second parameter set; defaults to a 20% larger field.
    pub fn second_params(ex: &Experiment) -> ModelParams {
        ex.config.protocol.second_params.clone().unwrap_or_else(|| {
            let mut p = ex.config.hamiltonian.params.clone();
            p.h = Some(1.2 * p.h.unwrap_or(1.0));
            p
        })
    }
}

impl Stage for DistinguishStage {
    fn run(&self, ex: &Experiment, _series: &mut Series) -> Result<StageOutput> {
        let p = &ex.config.protocol;
        let params2 = Self::second_params(ex);
        let spec2 = ex.config.hamiltonian.build(&params2)?;
        let sigma2 = gibbs_state(&spec2)?;
        let r = ex.recovery_at(ex.t_max())?;
        let seed = p.seed.unwrap_or_else(|| ex.derived_seed(4));
        let rep = distinguisher(&ex.sigma, &sigma2, &r, &ex.tri.a, p.trials, seed, p.max_rounds)?;
        Ok(StageOutput::value(json!({
            "second_params": params2,
            "recovery": {"kind": r.kind, "t": r.t, "method": r.method},
            "report": rep,
            "eps_note": "measured channel-specific error, not the supremum",
        })))
    }
}

pub struct ExtremalityStage;

impl Named for ExtremalityStage {
    fn name(&self) -> &'static str {
        "extremality"
    }
}

impl Stage for ExtremalityStage {
    fn run(&self, ex: &Experiment, _series: &mut Series) -> Result<StageOutput> {
        let s1 = sector_gibbs(&ex.spec, Sector::Positive)?;
        let s2 = sector_gibbs(&ex.spec, Sector::Negative)?;
        let r = ex.recovery_at(ex.t_max())?;
        let ensemble = ex.k_ensemble(ex.derived_seed(5))?;
        let rep = extremality_check(&s1, &s2, ex.config.protocol.mixture_p1, &r, &ex.tri.a, &ensemble)?;
        Ok(StageOutput::value(json!({
            "states": ["sector_gibbs:positive", "sector_gibbs:negative"],
            "recovery": {"kind": r.kind, "t": r.t, "method": r.method},
            "report": rep,
        })))
    }
}

pub fn stage_registry() -> Registry<dyn Stage> {
    let mut reg: Registry<dyn Stage> = Registry::new("subcommand");
    reg.register(Arc::new(BuildStage));
    reg.register(Arc::new(AdbStage));
    reg.register(Arc::new(ClusterStage));
    reg.register(Arc::new(MarkovStage));
    reg.register(Arc::new(StrongMarkovStage));
    reg.register(Arc::new(TomographyStage));
    reg.register(Arc::new(DistinguishStage));
    reg.register(Arc::new(ExtremalityStage));
    reg
}

// ---------------------------------------------------------------------------
// Running and writing
// ---------------------------------------------------------------------------

pub struct RunOutput {
    pub report: BTreeMap<String, Value>,
    pub series: Series,
    pub files: Vec<(String, Vec<u8>)>,
}

/// Runs one subcommand, or every stage for `"all"`.
pub fn run_stages(ex: &Experiment, subcommand: &str) -> Result<RunOutput> {
    let reg = stage_registry();
    let stages: Vec<Arc<dyn Stage>> = if subcommand == "all" {
        reg.iter().cloned().collect()
    } else {
        vec![reg.get(subcommand)?]
    };
    let mut series = Series::new(&ex.config.t_grid);
    let mut report = BTreeMap::new();
    let mut files = Vec::new();
    for stage in &stages {
        log::info!("running stage {}", stage.name());
        let out = stage.run(ex, &mut series)?;
        report.insert(stage.name().to_string(), out.value);
        files.extend(out.files);
    }
    if subcommand == "all" {
        report.insert("diagnostics".into(), json!(consolidated_diagnostics(ex, &report)?));
        report.insert("relations".into(), relations(&report));
    }
    report.insert("metadata".into(), json!(ex.metadata()));
    report.insert("subcommand".into(), json!(subcommand));
    Ok(RunOutput { report, series, files })
}

fn consolidated_diagnostics(ex: &Experiment, report: &BTreeMap<String, Value>) -> Result<DiagnosticsReport> {
    let get = |stage: &str, key: &str| report.get(stage).and_then(|v| v.get(key)).cloned();
    let adb_per_jump: BTreeMap<String, f64> =
        serde_json::from_value(get("adb", "adb_per_jump").unwrap_or(json!({})))?;
    let markov: Vec<f64> = serde_json::from_value(get("markov", "markov_err").unwrap_or(json!([])))?;
    let per_k: BTreeMap<String, Vec<f64>> =
        serde_json::from_value(get("strong-markov", "strong_markov_errs").unwrap_or(json!({})))?;
    let grid = &ex.config.t_grid;
    let markov_err = grid
        .iter()
        .zip(markov)
        .map(|(t, v)| (format_float(*t), v))
        .collect();
    let strong_markov_errs = per_k
        .into_iter()
        .filter_map(|(k, v)| v.last().map(|x| (k, *x)))
        .collect();
    let clustering = ClusterStage::compute(ex)?;
    Ok(DiagnosticsReport {
        adb_per_jump,
        clustering: Some(ClusteringCertificate::from(&clustering)),
        markov_err,
        strong_markov_errs,
        stationarity_residual: get("adb", "stationarity_residual")
            .and_then(|v| v.as_f64())
            .unwrap_or(f64::NAN),
        estimator_kind: "lower_bound",
        metadata: ex.metadata(),
    })
}

/// One boolean per implication in the chain of results the runner exercises.
fn relations(report: &BTreeMap<String, Value>) -> Value {
    let flag = |path: &[&str]| {
        let mut v = report.get(path[0]);
        for key in &path[1..] {
            v = v.and_then(|x| x.get(*key));
        }
        v.and_then(|x| x.as_bool())
    };
    let clustering_holds = report
        .get("strong-markov")
        .and_then(|v| v.get("clustering_from_strong_markov"))
        .and_then(|v| v.as_array())
        .map(|rows| {
            rows.iter()
                .all(|r| r.get("holds").and_then(|h| h.as_bool()).unwrap_or(true))
        });
    json!({
        "metastability_implies_markov": flag(&["markov", "nonincreasing"]),
        "clustering_and_metastability_imply_strong_markov_trend": flag(&["strong-markov", "nonincreasing"]),
        "strong_markov_implies_clustering": clustering_holds,
        "strong_markov_implies_tomography": flag(&["tomography", "hoeffding", "holds"]),
        "tv_bound": flag(&["tomography", "sequence_distributions", "bound_holds"]),
        "separation": flag(&["distinguish", "report", "holds"]),
        "extremality": flag(&["extremality", "report", "holds"]),
    })
}

/// Pretty JSON whose floats carry seventeen significant digits.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FloatFormatter::default());
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(out)
}

#[derive(Default)]
struct FloatFormatter {
    inner: serde_json::ser::PrettyFormatter<'static>,
}

impl serde_json::ser::Formatter for FloatFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> std::io::Result<()> {
        w.write_all(format_float(value).as_bytes())
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.inner.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.inner.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_object_value(w)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `report.json`, `series.csv`, `manifest.json` and stage files into `out`.
pub fn write_outputs(out_dir: &Path, run: &RunOutput, config_bytes: &[u8], subcommand: &str, seed: u64) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut files: Vec<(String, Vec<u8>)> = vec![
        ("report.json".into(), to_json_bytes(&run.report)?),
        ("series.csv".into(), run.series.to_csv()?),
    ];
    files.extend(run.files.iter().cloned());
    let mut hashes = BTreeMap::new();
    for (name, bytes) in &files {
        std::fs::write(out_dir.join(name), bytes)?;
        hashes.insert(name.clone(), sha256_hex(bytes));
    }
    let manifest = json!({
        "tool": "qmarkov",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": subcommand,
        "seed": seed,
        "config_sha256": sha256_hex(config_bytes),
        "files": hashes,
    });
    std::fs::write(out_dir.join("manifest.json"), to_json_bytes(&manifest)?)?;
    Ok(())
}

/// Loads, runs and writes one experiment; the output directory defaults to the config's.
pub fn run_experiment(config_path: &Path, subcommand: &str, out: Option<&Path>, opts: &RunOptions) -> Result<PathBuf> {
    let bytes = std::fs::read(config_path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Config(format!("config is not UTF-8: {e}")))?;
    let config = ExperimentConfig::from_json(text)?;
    let mut opts = opts.clone();
    if let Some(parent) = config_path.parent() {
        opts.base_dir = parent.to_path_buf();
    }
    let out_dir = match (out, &config.output_dir) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => opts.base_dir.join(o),
        (None, None) => return Err(Error::Config("no output directory: pass --out or set output_dir".into())),
    };
    let ex = Experiment::new(config, &opts)?;
    let run = run_stages(&ex, subcommand)?;
    write_outputs(&out_dir, &run, &bytes, subcommand, ex.seed)?;
    Ok(out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{
            "hamiltonian": {"model": "tfim", "n": 2, "beta": 1.0},
            "tripartition": {"a": [0], "b": [1], "c": []},
            "t_grid": [1.0, 10.0]
        }"#
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::from_json(minimal()).is_ok());
        let unknown = minimal().replace("\"t_grid\"", "\"bogus\": 1, \"t_grid\"");
        assert!(matches!(ExperimentConfig::from_json(&unknown), Err(Error::Config(_))));
        let descending = minimal().replace("[1.0, 10.0]", "[10.0, 1.0]");
        assert!(ExperimentConfig::from_json(&descending).is_err());
        let overlap = minimal().replace("\"b\": [1]", "\"b\": [0, 1]");
        let err = ExperimentConfig::from_json(&overlap).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("qubit 0"));
        let family = minimal().replace(
            "\"t_grid\"",
            "\"state_family\": {\"kind\": \"perturbed_gibbs\", \"p\": 0.1, \"extra\": 1}, \"t_grid\"",
        );
        assert!(ExperimentConfig::from_json(&family).is_err());
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02e23, 0.0] {
            let s = format_float(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
        let bytes = to_json_bytes(&json!({"x": 0.1, "y": [1.0, 2]})).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.contains("1.0000000000000001e-1"));
        let back: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back["x"].as_f64().unwrap(), 0.1);
    }

    #[test]
    fn minimal_diagnostics_run() {
        let cfg = ExperimentConfig::from_json(minimal()).unwrap();
        let ex = Experiment::new(cfg, &RunOptions::default()).unwrap();
        let run = run_stages(&ex, "adb").unwrap();
        assert!(run.report["adb"]["adb_max"].as_f64().unwrap() <= 1e-8);
        assert!(run_stages(&ex, "nope").is_err());
    }
}
