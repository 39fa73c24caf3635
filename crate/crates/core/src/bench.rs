//! Experiment orchestration: JSON configs, presets, seeded multi-run
//! experiments, and CSV/SVG outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::Error;
use crate::learning::{collect_data, diagnose, olsbpi, DataAccumulator, EvaluationMode, IterationRecord};
use crate::linalg::DEFAULT_RANK_TOL;
use crate::model::{CostWeights, PolicyGain, SystemModel};
use crate::sim::{estimate_stationary_moment, simulate, simulate_with, SimConfig};
use crate::solvers::{
    optimal_reference, riccati_oracle, robust_pi, standard_pi, DisturbanceMode, DisturbanceSpec, OptimalReference,
    PiOptions,
};

pub const SCHEMA_VERSION: u32 = 1;

const PENDULUM_AB: &str = include_str!("../data/triple_pendulum_ab.json");

/// The initial gain displayed for the triple inverted pendulum benchmark.
pub const PENDULUM_K1: [[f64; 6]; 2] = [
    [-9.44, -3.11, -1.2, -3.11, -1.31, -0.58],
    [-32.5, -11.51, -3.87, -10.72, -4.41, -2.01],
];

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("cannot parse config: {0}")]
    Parse(String),

    #[error("invalid config:\n{}", format_issues(.0))]
    Validation(Vec<ValidationIssue>),

    #[error("pendulum A/B data file not found: {}", .0.display())]
    MissingAbData(PathBuf),

    #[error("report has no rows")]
    EmptyReport,

    #[error(transparent)]
    Run(#[from] RunFailure),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BenchError {
    /// 2 for configuration problems, 3 for numerical failures and I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Parse(_) | BenchError::Validation(_) | BenchError::MissingAbData(_) => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub path: String,
    pub message: String,
}

fn format_issues(issues: &[ValidationIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  {}: {}", i.path, i.message))
        .collect::<Vec<_>>()
        .join("\n")
}

/// A numerical failure with the place it happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{module}::{operation} failed (seed {seed:?}, iteration {iteration:?}): {message}")]
pub struct RunFailure {
    pub module: String,
    pub operation: String,
    pub seed: Option<u64>,
    pub iteration: Option<usize>,
    pub message: String,
}

impl RunFailure {
    fn new(module: &str, operation: &str, seed: Option<u64>, err: &Error) -> Self {
        let iteration = match err {
            Error::AtIteration { iteration, .. } => Some(*iteration),
            _ => None,
        };
        RunFailure {
            module: module.into(),
            operation: operation.into(),
            seed,
            iteration,
            message: err.root().to_string(),
        }
    }
}

type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Solve,
    Learn,
    Robust,
    Simulate,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Solve => "solve",
            Algorithm::Learn => "learn",
            Algorithm::Robust => "robust",
            Algorithm::Simulate => "simulate",
        }
    }
}

/// Either `{"preset": name}` or inline row-major matrices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, rename = "A", skip_serializing_if = "Option::is_none")]
    pub a: Option<Matrix>,
    #[serde(default, rename = "B", skip_serializing_if = "Option::is_none")]
    pub b: Option<Matrix>,
    #[serde(default, rename = "D", skip_serializing_if = "Vec::is_empty")]
    pub d: Vec<Matrix>,
    #[serde(default, rename = "F", skip_serializing_if = "Vec::is_empty")]
    pub f: Vec<Matrix>,
    #[serde(default, rename = "C", skip_serializing_if = "Option::is_none")]
    pub c: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSpec {
    #[serde(rename = "Q")]
    pub q: Matrix,
    #[serde(rename = "R")]
    pub r: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OlsbpiConfig {
    /// `N`, the number of gains produced including `K̂₁`.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_s_f")]
    pub s_f: f64,
    #[serde(default)]
    pub mode: EvaluationMode,
    #[serde(default)]
    pub burn_in: f64,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
}

fn default_iterations() -> usize {
    10
}

fn default_s_f() -> f64 {
    100.0
}

fn default_rank_tol() -> f64 {
    DEFAULT_RANK_TOL
}

impl Default for OlsbpiConfig {
    fn default() -> Self {
        OlsbpiConfig {
            iterations: default_iterations(),
            s_f: default_s_f(),
            mode: EvaluationMode::Ode,
            burn_in: 0.0,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceConfig {
    pub mode: DisturbanceMode,
    /// One robust run per magnitude and seed.
    pub magnitudes: Vec<f64>,
    #[serde(default = "default_robust_iterations")]
    pub iterations: usize,
}

fn default_robust_iterations() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<Algorithm>,
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightsSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_gain: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub olsbpi: Option<OlsbpiConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disturbance: Option<DisturbanceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi: Option<PiOptions>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    /// Also render `fig1*.svg`.
    #[serde(default)]
    pub svg: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        serde_json::from_str(text).map_err(|e| BenchError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Reads and parses a config file. Validation is a separate step.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::Parse(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text)
}

/// The configuration `bench-pendulum` runs.
pub fn pendulum_bench_config(seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        algorithm: Some(Algorithm::Learn),
        model: ModelSpec {
            preset: Some("triple-pendulum".into()),
            ..ModelSpec::default()
        },
        weights: None,
        initial_gain: None,
        sim: Some(SimConfig::new(510.0, 100.0, 0)),
        olsbpi: Some(OlsbpiConfig::default()),
        disturbance: None,
        pi: None,
        seeds,
        output_dir: None,
        svg: true,
    }
}

#[derive(Deserialize)]
struct AbFile {
    #[serde(rename = "A")]
    a: Matrix,
    #[serde(rename = "B")]
    b: Matrix,
}

fn pendulum_from_ab(text: &str) -> Result<(SystemModel, CostWeights, PolicyGain), BenchError> {
    let ab: AbFile = serde_json::from_str(text).map_err(|e| BenchError::Parse(format!("pendulum A/B data: {e}")))?;
    let a = to_matrix(&ab.a).ok_or_else(|| BenchError::Parse("pendulum A is ragged".into()))?;
    let b = to_matrix(&ab.b).ok_or_else(|| BenchError::Parse("pendulum B is ragged".into()))?;
    let mut d1 = DMatrix::zeros(6, 6);
    d1[(5, 5)] = 0.01;
    let mut f1 = DMatrix::zeros(6, 2);
    f1[(3, 0)] = 0.01;
    let c = DMatrix::identity(6, 6) * 0.1;
    let model = SystemModel::new(a, b, vec![d1], vec![f1], c).map_err(|e| BenchError::Parse(e.to_string()))?;
    let k1 = PolicyGain::new(DMatrix::from_fn(2, 6, |i, j| PENDULUM_K1[i][j]));
    Ok((model, CostWeights::identity(6, 2), k1))
}

/// Triple inverted pendulum: bundled `A`, `B`; `C = 0.1·I₆`; one state-noise
/// matrix with entry (6,6) = 0.01; one input-noise matrix with entry
/// (4,1) = 0.01; `Q = I₆`, `R = I₂`; and the displayed `K̂₁`.
pub fn preset_triple_pendulum() -> (SystemModel, CostWeights, PolicyGain) {
    pendulum_from_ab(PENDULUM_AB).expect("bundled pendulum data is valid")
}

/// Same as [`preset_triple_pendulum`] with `A`, `B` read from `path`.
pub fn preset_triple_pendulum_from(path: &Path) -> Result<(SystemModel, CostWeights, PolicyGain), BenchError> {
    let text = std::fs::read_to_string(path).map_err(|_| BenchError::MissingAbData(path.to_path_buf()))?;
    pendulum_from_ab(&text)
}

/// `dx = (−x + u)dt + dw`, `Q = R = 1`, `K₁ = 0`.
pub fn preset_scalar() -> (SystemModel, CostWeights, PolicyGain) {
    let one = |x: f64| DMatrix::from_element(1, 1, x);
    let model = SystemModel::new(one(-1.0), one(1.0), vec![], vec![], one(1.0)).expect("valid scalar model");
    (model, CostWeights::identity(1, 1), PolicyGain::zeros(1, 1))
}

fn to_matrix(rows: &Matrix) -> Option<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return None;
    }
    Some(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn from_matrix(m: &DMatrix<f64>) -> Matrix {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// A validated experiment, ready to run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub algorithm: Algorithm,
    pub model: SystemModel,
    pub weights: CostWeights,
    pub k1: PolicyGain,
    pub sim: Option<SimConfig>,
    pub olsbpi: OlsbpiConfig,
    pub disturbance: Option<DisturbanceConfig>,
    pub pi: PiOptions,
    pub seeds: Vec<u64>,
    pub svg: bool,
}

struct Issues(Vec<ValidationIssue>);

impl Issues {
    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.0.push(ValidationIssue {
            path: path.into(),
            message: message.into(),
        });
    }

    fn matrix(&mut self, path: &str, rows: &Matrix, shape: Option<(usize, usize)>) -> Option<DMatrix<f64>> {
        let Some(m) = to_matrix(rows) else {
            self.push(path, "must be a non-empty rectangular array of rows");
            return None;
        };
        if let Some((r, c)) = shape {
            if m.shape() != (r, c) {
                self.push(path, format!("expected {r}x{c}, got {}x{}", m.nrows(), m.ncols()));
                return None;
            }
        }
        if m.iter().any(|v| !v.is_finite()) {
            self.push(path, "entries must be finite");
            return None;
        }
        Some(m)
    }
}

/// Checks every field and reports all problems at once.
///
/// `expected` is the subcommand; a config naming a different algorithm is
/// rejected.
pub fn validate(cfg: &ExperimentConfig, expected: Algorithm) -> Result<Experiment, BenchError> {
    let mut issues = Issues(Vec::new());
    if cfg.schema_version != SCHEMA_VERSION {
        issues.push(
            "schema_version",
            format!("unsupported version {}, expected {SCHEMA_VERSION}", cfg.schema_version),
        );
    }
    if let Some(alg) = cfg.algorithm {
        if alg != expected {
            issues.push(
                "algorithm",
                format!("config is for '{}' but '{}' was requested", alg.name(), expected.name()),
            );
        }
    }

    let mut preset = None;
    let spec = &cfg.model;
    let inline = spec.a.is_some() || spec.b.is_some() || spec.c.is_some() || !spec.d.is_empty() || !spec.f.is_empty();
    let mut model = None;
    match (&spec.preset, inline) {
        (Some(_), true) => issues.push("model", "give either a preset or inline matrices, not both"),
        (Some(name), false) => match name.as_str() {
            "triple-pendulum" => preset = Some(preset_triple_pendulum()),
            "scalar" => preset = Some(preset_scalar()),
            other => issues.push(
                "model.preset",
                format!("unknown preset '{other}' (known: triple-pendulum, scalar)"),
            ),
        },
        (None, false) => issues.push("model", "missing: give a preset or the matrices A, B, C"),
        (None, true) => model = validate_inline(spec, &mut issues),
    }
    if let Some((m, _, _)) = &preset {
        model = Some(m.clone());
    }

    let dims = model.as_ref().map(|m| (m.n(), m.m()));
    let weights = match (&cfg.weights, dims) {
        (Some(w), Some((n, m))) => {
            let q = issues.matrix("weights.Q", &w.q, Some((n, n)));
            let r = issues.matrix("weights.R", &w.r, Some((m, m)));
            let mut ok = true;
            if let Some(q) = &q {
                if let Err(e) = CostWeights::new(q.clone(), DMatrix::identity(m, m)) {
                    issues.push("weights.Q", e.to_string());
                    ok = false;
                }
            }
            if let Some(r) = &r {
                if let Err(e) = CostWeights::new(DMatrix::identity(n, n), r.clone()) {
                    issues.push("weights.R", e.to_string());
                    ok = false;
                }
            }
            match (q, r, ok) {
                (Some(q), Some(r), true) => CostWeights::new(q, r).ok(),
                _ => None,
            }
        }
        (None, Some((n, m))) => Some(
            preset
                .as_ref()
                .map_or_else(|| CostWeights::identity(n, m), |(_, w, _)| w.clone()),
        ),
        _ => None,
    };

    let k1 = match (&cfg.initial_gain, dims) {
        (Some(k), Some((n, m))) => issues.matrix("initial_gain", k, Some((m, n))).map(PolicyGain::new),
        (None, Some(_)) => match &preset {
            Some((_, _, k)) => Some(k.clone()),
            None => {
                issues.push("initial_gain", "required for inline models");
                None
            }
        },
        _ => None,
    };
    if let (Some(model), Some(k)) = (&model, &k1) {
        match model.is_admissible(k) {
            Ok(adm) if !adm.admissible => issues.push(
                "initial_gain",
                format!("not admissible (spectral abscissa {:.3e})", adm.abscissa),
            ),
            Err(e) => issues.push("initial_gain", e.to_string()),
            _ => {}
        }
    }

    let needs_sim = matches!(expected, Algorithm::Learn | Algorithm::Simulate);
    match (&cfg.sim, needs_sim) {
        (None, true) => issues.push("sim", "required for this algorithm"),
        (Some(sim), _) => {
            if let Err(e) = sim.steps() {
                issues.push("sim", e.to_string());
            }
            if !sim.sigma_u.is_finite() || sim.sigma_u < 0.0 {
                issues.push("sim.sigma_u", "must be finite and >= 0");
            }
            if !(sim.blowup > 0.0) {
                issues.push("sim.blowup", "must be positive");
            }
            if let (Some(x0), Some((n, _))) = (&sim.x0, dims) {
                if x0.len() != n {
                    issues.push("sim.x0", format!("expected length {n}, got {}", x0.len()));
                }
            }
            if let (Some(y0), Some((_, m))) = (&sim.y0, dims) {
                if y0.len() != m {
                    issues.push("sim.y0", format!("expected length {m}, got {}", y0.len()));
                }
            }
        }
        _ => {}
    }

    let olsbpi_cfg = cfg.olsbpi.clone().unwrap_or_default();
    if olsbpi_cfg.iterations < 2 {
        issues.push("olsbpi.iterations", "must be at least 2");
    }
    if !(olsbpi_cfg.s_f > 0.0) || !olsbpi_cfg.s_f.is_finite() {
        issues.push("olsbpi.s_f", "must be positive and finite");
    }
    if !(0.0..1.0).contains(&olsbpi_cfg.burn_in) {
        issues.push("olsbpi.burn_in", "must be in [0, 1)");
    }
    if !(olsbpi_cfg.rank_tol > 0.0 && olsbpi_cfg.rank_tol < 1.0) {
        issues.push("olsbpi.rank_tol", "must be in (0, 1)");
    }

    match (&cfg.disturbance, expected) {
        (None, Algorithm::Robust) => issues.push("disturbance", "required for robust runs"),
        (Some(d), _) => {
            if d.magnitudes.is_empty() {
                issues.push("disturbance.magnitudes", "must not be empty");
            }
            for (i, m) in d.magnitudes.iter().enumerate() {
                if !m.is_finite() || *m < 0.0 {
                    issues.push(format!("disturbance.magnitudes[{i}]"), "must be finite and >= 0");
                }
            }
            if d.iterations == 0 {
                issues.push("disturbance.iterations", "must be positive");
            }
        }
        _ => {}
    }

    let pi = cfg.pi.unwrap_or_default();
    if pi.max_iter == 0 {
        issues.push("pi.max_iter", "must be positive");
    }
    if !(pi.tol > 0.0) {
        issues.push("pi.tol", "must be positive");
    }

    if cfg.seeds.is_empty() && expected != Algorithm::Solve {
        issues.push("seeds", "at least one seed is required");
    }

    if !issues.0.is_empty() {
        return Err(BenchError::Validation(issues.0));
    }
    Ok(Experiment {
        algorithm: expected,
        model: model.expect("validated"),
        weights: weights.expect("validated"),
        k1: k1.expect("validated"),
        sim: cfg.sim.clone(),
        olsbpi: olsbpi_cfg,
        disturbance: cfg.disturbance.clone(),
        pi,
        seeds: cfg.seeds.clone(),
        svg: cfg.svg,
    })
}

fn validate_inline(spec: &ModelSpec, issues: &mut Issues) -> Option<SystemModel> {
    let a = match &spec.a {
        Some(a) => issues.matrix("model.A", a, None),
        None => {
            issues.push("model.A", "missing");
            None
        }
    };
    let n = a.as_ref().map(|a| a.nrows());
    if let Some(a) = &a {
        if !a.is_square() {
            issues.push("model.A", "must be square");
        }
    }
    let b = match &spec.b {
        Some(b) => issues.matrix("model.B", b, None),
        None => {
            issues.push("model.B", "missing");
            None
        }
    };
    if let (Some(b), Some(n)) = (&b, n) {
        if b.nrows() != n {
            issues.push("model.B", format!("expected {n} rows, got {}", b.nrows()));
        }
    }
    let m = b.as_ref().map(|b| b.ncols());
    let c = match &spec.c {
        Some(c) => issues.matrix("model.C", c, None),
        None => {
            issues.push("model.C", "missing");
            None
        }
    };
    if let (Some(c), Some(n)) = (&c, n) {
        if c.nrows() != n {
            issues.push("model.C", format!("expected {n} rows, got {}", c.nrows()));
        }
    }
    let d: Vec<Option<DMatrix<f64>>> = spec
        .d
        .iter()
        .enumerate()
        .map(|(i, dj)| issues.matrix(&format!("model.D[{i}]"), dj, n.map(|n| (n, n))))
        .collect();
    let f: Vec<Option<DMatrix<f64>>> = spec
        .f
        .iter()
        .enumerate()
        .map(|(i, fk)| issues.matrix(&format!("model.F[{i}]"), fk, n.zip(m)))
        .collect();
    let before = issues.0.len();
    let (Some(a), Some(b), Some(c)) = (a, b, c) else {
        return None;
    };
    let d: Option<Vec<_>> = d.into_iter().collect();
    let f: Option<Vec<_>> = f.into_iter().collect();
    let (Some(d), Some(f)) = (d, f) else {
        return None;
    };
    if issues.0.len() != before {
        return None;
    }
    match SystemModel::new(a, b, d, f, c) {
        Ok(model) => Some(model),
        Err(Error::NotPositiveDefinite { .. }) => {
            issues.push("model.C", "C Cᵀ must be positive definite (C needs full row rank)");
            None
        }
        Err(e) => {
            issues.push("model", e.to_string());
            None
        }
    }
}

/// One row of a convergence report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub seed: u64,
    pub iteration: usize,
    pub gain_error: Option<f64>,
    pub value_error: Option<f64>,
    pub cost_error: Option<f64>,
    pub rel_delta_g: Option<f64>,
    pub admissible: bool,
    pub ref_gain_error: Option<f64>,
    pub ref_value_error: Option<f64>,
    pub ref_cost_error: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceReport {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: &str = "seed,iteration,gain_error,value_error,cost_error,rel_delta_g,admissible,ref_gain_error,ref_value_error,ref_cost_error";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.16e}"))
}

impl ConvergenceReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{REPORT_HEADER}");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.seed,
                r.iteration,
                cell(r.gain_error),
                cell(r.value_error),
                cell(r.cost_error),
                cell(r.rel_delta_g),
                r.admissible,
                cell(r.ref_gain_error),
                cell(r.ref_value_error),
                cell(r.ref_cost_error),
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, BenchError> {
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(BenchError::Parse("report header does not match".into()));
        }
        let opt = |tok: &str| -> Result<Option<f64>, BenchError> {
            if tok.is_empty() {
                Ok(None)
            } else {
                tok.parse()
                    .map(Some)
                    .map_err(|_| BenchError::Parse(format!("bad number '{tok}'")))
            }
        };
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let t: Vec<&str> = line.split(',').collect();
            if t.len() != 10 {
                return Err(BenchError::Parse(format!("expected 10 columns in '{line}'")));
            }
            rows.push(ReportRow {
                seed: t[0].parse().map_err(|_| BenchError::Parse(format!("bad seed '{}'", t[0])))?,
                iteration: t[1]
                    .parse()
                    .map_err(|_| BenchError::Parse(format!("bad iteration '{}'", t[1])))?,
                gain_error: opt(t[2])?,
                value_error: opt(t[3])?,
                cost_error: opt(t[4])?,
                rel_delta_g: opt(t[5])?,
                admissible: t[6] == "true",
                ref_gain_error: opt(t[7])?,
                ref_value_error: opt(t[8])?,
                ref_cost_error: opt(t[9])?,
            });
        }
        Ok(ConvergenceReport { rows })
    }
}

/// Linear-interpolation percentile of an unsorted sample.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Names of the four plot files, without extension.
pub const FIGURES: [(&str, &str); 4] = [
    ("fig1a", "gain error"),
    ("fig1b", "value error"),
    ("fig1c", "cost error"),
    ("fig1d", "relative G error"),
];

/// Writes `fig1a.csv` … `fig1d.csv` (and SVG charts when `svg`), each with
/// columns `iteration,olsbpi_median,olsbpi_p10,olsbpi_p90,model_based_pi`.
pub fn emit_plot_data(report: &ConvergenceReport, out_dir: &Path, svg: bool) -> Result<(), BenchError> {
    if report.rows.is_empty() {
        return Err(BenchError::EmptyReport);
    }
    std::fs::create_dir_all(out_dir)?;
    let max_iter = report.rows.iter().map(|r| r.iteration).max().unwrap_or(0);
    let extract: [Pick; 4] = [
        |r| (r.gain_error, r.ref_gain_error),
        |r| (r.value_error, r.ref_value_error),
        |r| (r.cost_error, r.ref_cost_error),
        |r| (r.rel_delta_g, r.rel_delta_g.map(|_| 0.0)),
    ];
    for ((name, label), get) in FIGURES.iter().zip(extract) {
        let mut series = Vec::new();
        let mut s = String::from("iteration,olsbpi_median,olsbpi_p10,olsbpi_p90,model_based_pi\n");
        for i in 1..=max_iter {
            let rows: Vec<&ReportRow> = report.rows.iter().filter(|r| r.iteration == i).collect();
            let vals: Vec<f64> = rows.iter().filter_map(|r| get(r).0).filter(|v| v.is_finite()).collect();
            let reference = rows.iter().find_map(|r| get(r).1);
            let med = percentile(&vals, 0.5);
            let p10 = percentile(&vals, 0.1);
            let p90 = percentile(&vals, 0.9);
            let _ = writeln!(s, "{i},{},{},{},{}", cell(med), cell(p10), cell(p90), cell(reference));
            series.push((i, med, p10, p90, reference));
        }
        std::fs::write(out_dir.join(format!("{name}.csv")), s)?;
        if svg {
            std::fs::write(out_dir.join(format!("{name}.svg")), render_svg(label, &series))?;
        }
    }
    Ok(())
}

type Pick = fn(&ReportRow) -> (Option<f64>, Option<f64>);

type SeriesPoint = (usize, Option<f64>, Option<f64>, Option<f64>, Option<f64>);

fn render_svg(label: &str, series: &[SeriesPoint]) -> String {
    let (w, h, pad) = (640.0, 400.0, 60.0);
    let positive: Vec<f64> = series
        .iter()
        .flat_map(|p| [p.1, p.2, p.3, p.4])
        .flatten()
        .filter(|v| *v > 0.0 && v.is_finite())
        .collect();
    let lo = positive.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = positive.iter().cloned().fold(0.0, f64::max);
    let (lo, hi) = if positive.is_empty() {
        (1e-1, 1e1)
    } else {
        let (l, h) = (lo.log10().floor(), hi.log10().ceil());
        (10f64.powf(l), 10f64.powf(if h > l { h } else { l + 1.0 }))
    };
    let n = series.len().max(2) as f64;
    let x = |i: usize| pad + (i as f64 - 1.0) / (n - 1.0) * (w - 2.0 * pad);
    let y = |v: f64| {
        let v = v.max(lo);
        h - pad - (v.log10() - lo.log10()) / (hi.log10() - lo.log10()) * (h - 2.0 * pad)
    };
    let path = |pick: &dyn Fn(&SeriesPoint) -> Option<f64>| {
        let mut d = String::new();
        for p in series {
            if let Some(v) = pick(p).filter(|v| v.is_finite()) {
                let cmd = if d.is_empty() { 'M' } else { 'L' };
                let _ = write!(d, "{cmd}{:.2},{:.2} ", x(p.0), y(v));
            }
        }
        d
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{label}</text>"#,
        w / 2.0
    );
    let mut e = lo.log10() as i32;
    while e <= hi.log10() as i32 {
        let yy = y(10f64.powi(e));
        let _ = writeln!(
            s,
            r##"<line x1="{pad}" x2="{}" y1="{yy:.2}" y2="{yy:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">1e{e}</text>"##,
            w - pad,
            pad - 5.0,
            yy + 4.0
        );
        e += 1;
    }
    for p in series {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            x(p.0),
            h - pad + 18.0,
            p.0
        );
    }
    let _ = writeln!(
        s,
        r##"<text x="{}" y="{}" text-anchor="middle">iteration</text>"##,
        w / 2.0,
        h - 15.0
    );
    for (pick, colour, dash) in [
        (&(|p: &SeriesPoint| p.2) as &dyn Fn(&SeriesPoint) -> Option<f64>, "#9ecae1", "4 3"),
        (&|p: &SeriesPoint| p.3, "#9ecae1", "4 3"),
        (&|p: &SeriesPoint| p.1, "#08519c", ""),
        (&|p: &SeriesPoint| p.4, "#d94801", "8 4"),
    ] {
        let d = path(pick);
        if !d.is_empty() {
            let _ = writeln!(
                s,
                r#"<path d="{d}" fill="none" stroke="{colour}" stroke-width="2" stroke-dasharray="{dash}"/>"#
            );
        }
    }
    let _ = writeln!(
        s,
        r##"<text x="{}" y="40" fill="#08519c">OLSbPI median (p10/p90 dashed)</text><text x="{}" y="56" fill="#d94801">model-based PI</text>"##,
        pad + 10.0,
        pad + 10.0
    );
    s.push_str("</svg>\n");
    s
}

/// Runs `f` over `seeds` on worker threads and returns results in seed order.
fn run_per_seed<T: Send>(seeds: &[u64], f: impl Fn(u64) -> T + Sync) -> Vec<T> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(seeds.len())
        .max(1);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = seeds.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= seeds.len() {
                    break;
                }
                let out = f(seeds[i]);
                *slots[i].lock().expect("slot lock") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every seed ran"))
        .collect()
}

/// What an experiment produced; the files are already written.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Option<ConvergenceReport>,
    pub summary: serde_json::Value,
    pub failures: Vec<RunFailure>,
}

fn reference_rows(reference: &OptimalReference, iterations: usize) -> Vec<(f64, f64, f64)> {
    let trace = &reference.trace.iterations;
    (0..iterations)
        .map(|i| {
            let it = &trace[i.min(trace.len() - 1)];
            (
                it.gain.distance(&reference.gain),
                it.value.distance(&reference.value),
                (it.cost - reference.cost).abs(),
            )
        })
        .collect()
}

fn write_summary(out_dir: &Path, summary: &serde_json::Value) -> Result<(), BenchError> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(summary).expect("json") + "\n",
    )?;
    Ok(())
}

fn gain_json(k: &PolicyGain) -> serde_json::Value {
    json!(from_matrix(k.matrix()))
}

/// Runs a validated experiment and writes its artifacts to `out_dir`.
///
/// Numerical failures of individual seeds are recorded in `summary.json` and
/// returned in [`Outcome::failures`]; only failures that stop the whole
/// experiment are returned as errors (after `summary.json` is written).
pub fn run_experiment(exp: &Experiment, out_dir: &Path) -> Result<Outcome, BenchError> {
    std::fs::create_dir_all(out_dir)?;
    match exp.algorithm {
        Algorithm::Solve => run_solve(exp, out_dir),
        Algorithm::Learn => run_learn(exp, out_dir),
        Algorithm::Simulate => run_simulate(exp, out_dir),
        Algorithm::Robust => run_robust(exp, out_dir),
    }
}

fn fail_summary(out_dir: &Path, exp: &Experiment, failure: RunFailure) -> BenchError {
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "algorithm": exp.algorithm.name(),
        "seeds": exp.seeds,
        "failures": [failure],
    });
    match write_summary(out_dir, &summary) {
        Ok(()) => BenchError::Run(failure),
        Err(e) => e,
    }
}

fn run_solve(exp: &Experiment, out_dir: &Path) -> Result<Outcome, BenchError> {
    let start = Instant::now();
    let trace = standard_pi(&exp.model, &exp.weights, &exp.k1, &exp.pi)
        .map_err(|e| fail_summary(out_dir, exp, RunFailure::new("solvers", "standard_pi", None, &e)))?;
    let p = trace.final_value().expect("converged").clone();
    let k = exp
        .model
        .greedy_gain(&p, &exp.weights)
        .map_err(|e| fail_summary(out_dir, exp, RunFailure::new("model", "greedy_gain", None, &e)))?;
    let cost = crate::solvers::stationary_cost(&exp.model, &p);
    let oracle = riccati_oracle(&exp.model, &exp.weights, 1e-12);
    let oracle_gap = oracle.as_ref().ok().map(|o| o.distance(&p));

    let mut csv = String::from("iteration,gain_error,value_error,cost_error,residual\n");
    for it in &trace.iterations {
        let _ = writeln!(
            csv,
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            it.index,
            it.gain.distance(&k),
            it.value.distance(&p),
            (it.cost - cost).abs(),
            it.residual
        );
    }
    std::fs::write(out_dir.join("report.csv"), csv)?;
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "algorithm": "solve",
        "converged": trace.converged,
        "iterations": trace.iterations.len(),
        "final_residual": trace.final_residual,
        "monotonicity_violations": trace.monotonicity_violations,
        "optimal_cost": cost,
        "optimal_gain": gain_json(&k),
        "optimal_value": from_matrix(p.matrix()),
        "oracle_distance": oracle_gap,
        "oracle_error": oracle.err().map(|e| e.to_string()),
        "runtime_seconds": start.elapsed().as_secs_f64(),
    });
    write_summary(out_dir, &summary)?;
    Ok(Outcome {
        report: None,
        summary,
        failures: Vec::new(),
    })
}

struct LearnSeed {
    rows: Vec<ReportRow>,
    summary: serde_json::Value,
    failure: Option<RunFailure>,
}

fn learn_one(exp: &Experiment, reference: &OptimalReference, seed: u64) -> LearnSeed {
    let start = Instant::now();
    let mut sim = exp.sim.clone().expect("validated");
    sim.seed = seed;
    let failed = |f: RunFailure| LearnSeed {
        rows: Vec::new(),
        summary: json!({ "seed": seed, "error": f }),
        failure: Some(f),
    };
    let data = match collect_data_with_tol(exp, &sim) {
        Ok(d) => d,
        Err(e) => return failed(RunFailure::new("sde-sim", "simulate", Some(seed), &e)),
    };
    let cfg = &exp.olsbpi;
    let result = match olsbpi(&data, &exp.k1, cfg.iterations, cfg.s_f, cfg.mode) {
        Ok(r) => r,
        Err(e) => return failed(RunFailure::new("learning", "olsbpi", Some(seed), &e)),
    };
    let records = match diagnose(&result, &exp.model, &exp.weights, reference) {
        Ok(r) => r,
        Err(e) => return failed(RunFailure::new("learning", "diagnose", Some(seed), &e)),
    };
    let refs = reference_rows(reference, records.len());
    let rows: Vec<ReportRow> = records
        .iter()
        .zip(&refs)
        .map(|(rec, r)| ReportRow {
            seed,
            iteration: rec.index,
            gain_error: Some(rec.gain_error),
            value_error: rec.value_error,
            cost_error: rec.cost_error.map(f64::abs),
            rel_delta_g: rec.rel_delta_g,
            admissible: rec.admissible,
            ref_gain_error: Some(r.0),
            ref_value_error: Some(r.1),
            ref_cost_error: Some(r.2),
        })
        .collect();
    let last: &IterationRecord = records.last().expect("N >= 2");
    let k_star_norm = reference.gain.matrix().norm();
    let summary = json!({
        "seed": seed,
        "cond_psi": data.cond_psi(),
        "ill_conditioned": data.ill_conditioned(),
        "t_f": data.t_f(),
        "all_admissible": records.iter().all(|r| r.admissible),
        "initial_gain_error": records[0].gain_error,
        "final_gain_error": last.gain_error,
        "final_relative_gain_error": last.gain_error / k_star_norm,
        "final_value_error": last.value_error,
        "final_cost_error": last.cost_error.map(f64::abs),
        "final_gain": gain_json(&last.gain),
        "runtime_seconds": start.elapsed().as_secs_f64(),
        "error": null,
    });
    LearnSeed {
        rows,
        summary,
        failure: None,
    }
}

fn collect_data_with_tol(exp: &Experiment, sim: &SimConfig) -> crate::Result<crate::learning::DataMatrices> {
    let cfg = &exp.olsbpi;
    if cfg.rank_tol == DEFAULT_RANK_TOL {
        return collect_data(&exp.model, &exp.k1, sim, &exp.weights, cfg.burn_in);
    }
    let samples = sim.steps()? + 1;
    let skip = (cfg.burn_in * samples as f64).floor() as usize;
    let mut acc = DataAccumulator::new(exp.model.n(), exp.model.m(), sim.dt, &exp.weights, skip)?;
    simulate_with(&exp.model, &exp.k1, sim, |_, _, x, u, _| acc.push(x, u))?;
    acc.finish(cfg.rank_tol)
}

fn run_learn(exp: &Experiment, out_dir: &Path) -> Result<Outcome, BenchError> {
    let start = Instant::now();
    let reference = optimal_reference(&exp.model, &exp.weights, &exp.k1)
        .map_err(|e| fail_summary(out_dir, exp, RunFailure::new("solvers", "optimal_reference", None, &e)))?;
    let per_seed = run_per_seed(&exp.seeds, |seed| learn_one(exp, &reference, seed));
    let report = ConvergenceReport {
        rows: per_seed.iter().flat_map(|s| s.rows.iter().cloned()).collect(),
    };
    let failures: Vec<RunFailure> = per_seed.iter().filter_map(|s| s.failure.clone()).collect();
    std::fs::write(out_dir.join("report.csv"), report.to_csv())?;
    if !report.rows.is_empty() {
        emit_plot_data(&report, out_dir, exp.svg)?;
    }
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "algorithm": "learn",
        "seeds": exp.seeds,
        "olsbpi": exp.olsbpi,
        "sim": exp.sim,
        "optimal_cost": reference.cost,
        "optimal_gain": gain_json(&reference.gain),
        "model_based_pi_iterations": reference.trace.iterations.len(),
        "runs": per_seed.iter().map(|s| s.summary.clone()).collect::<Vec<_>>(),
        "failures": failures,
        "runtime_seconds": start.elapsed().as_secs_f64(),
    });
    write_summary(out_dir, &summary)?;
    Ok(Outcome {
        report: Some(report),
        summary,
        failures,
    })
}

fn run_simulate(exp: &Experiment, out_dir: &Path) -> Result<Outcome, BenchError> {
    let start = Instant::now();
    let results = run_per_seed(&exp.seeds, |seed| {
        let mut sim = exp.sim.clone().expect("validated");
        sim.seed = seed;
        let traj = simulate(&exp.model, &exp.k1, &sim).map_err(|e| RunFailure::new("sde-sim", "simulate", Some(seed), &e))?;
        let file = std::fs::File::create(out_dir.join(format!("trajectory_{seed}.csv"))).map_err(|e| RunFailure {
            module: "cli-bench".into(),
            operation: "write_trajectory".into(),
            seed: Some(seed),
            iteration: None,
            message: e.to_string(),
        })?;
        traj.write_csv(std::io::BufWriter::new(file)).map_err(|e| RunFailure {
            module: "cli-bench".into(),
            operation: "write_trajectory".into(),
            seed: Some(seed),
            iteration: None,
            message: e.to_string(),
        })?;
        let m2 = estimate_stationary_moment(&traj, 2, 0.1).ok();
        let m4 = estimate_stationary_moment(&traj, 4, 0.1).ok();
        Ok::<_, RunFailure>(json!({ "seed": seed, "samples": traj.len(), "moment2": m2, "moment4": m4 }))
    });
    let failures: Vec<RunFailure> = results.iter().filter_map(|r| r.as_ref().err().cloned()).collect();
    let runs: Vec<serde_json::Value> = results
        .into_iter()
        .map(|r| r.unwrap_or_else(|f| json!({ "seed": f.seed, "error": f })))
        .collect();
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "algorithm": "simulate",
        "seeds": exp.seeds,
        "sim": exp.sim,
        "runs": runs,
        "failures": failures,
        "runtime_seconds": start.elapsed().as_secs_f64(),
    });
    write_summary(out_dir, &summary)?;
    Ok(Outcome {
        report: None,
        summary,
        failures,
    })
}

fn run_robust(exp: &Experiment, out_dir: &Path) -> Result<Outcome, BenchError> {
    let start = Instant::now();
    let reference = optimal_reference(&exp.model, &exp.weights, &exp.k1)
        .map_err(|e| fail_summary(out_dir, exp, RunFailure::new("solvers", "optimal_reference", None, &e)))?;
    let dist = exp.disturbance.as_ref().expect("validated");
    let opts = PiOptions {
        max_iter: dist.iterations,
        ..exp.pi
    };
    let refs = reference_rows(&reference, dist.iterations);
    let mut sweeps = Vec::new();
    let mut all_failures = Vec::new();
    let mut all_rows = Vec::new();
    for (idx, &magnitude) in dist.magnitudes.iter().enumerate() {
        let per_seed = run_per_seed(&exp.seeds, |seed| {
            let spec = DisturbanceSpec {
                mode: dist.mode,
                magnitude,
                seed,
            };
            robust_pi(&exp.model, &exp.weights, &exp.k1, spec, &opts, Some(&reference.value))
                .map_err(|e| RunFailure::new("solvers", "robust_pi", Some(seed), &e))
        });
        let mut rows = Vec::new();
        let mut terminal = Vec::new();
        let mut breakdowns = Vec::new();
        for (seed, res) in exp.seeds.iter().zip(&per_seed) {
            match res {
                Ok(trace) => {
                    for it in &trace.iterations {
                        let r = refs[(it.index - 1).min(refs.len() - 1)];
                        rows.push(ReportRow {
                            seed: *seed,
                            iteration: it.index,
                            gain_error: Some(it.gain.distance(&reference.gain)),
                            value_error: it.value_error,
                            cost_error: Some((it.cost - reference.cost).abs()),
                            rel_delta_g: Some(it.disturbance_norm / it.g.matrix().norm()),
                            admissible: true,
                            ref_gain_error: Some(r.0),
                            ref_value_error: Some(r.1),
                            ref_cost_error: Some(r.2),
                        });
                    }
                    if let Some(b) = &trace.breakdown {
                        let r = refs[(b.iteration - 1).min(refs.len() - 1)];
                        rows.push(ReportRow {
                            seed: *seed,
                            iteration: b.iteration,
                            gain_error: None,
                            value_error: None,
                            cost_error: None,
                            rel_delta_g: None,
                            admissible: false,
                            ref_gain_error: Some(r.0),
                            ref_value_error: Some(r.1),
                            ref_cost_error: Some(r.2),
                        });
                        breakdowns.push(json!({ "seed": seed, "iteration": b.iteration, "message": b.message }));
                    } else if let Some(e) = trace.last().and_then(|it| it.value_error) {
                        terminal.push(e);
                    }
                }
                Err(f) => all_failures.push(f.clone()),
            }
        }
        let report = ConvergenceReport { rows };
        let sub = out_dir.join(format!("magnitude_{idx}"));
        std::fs::create_dir_all(&sub)?;
        std::fs::write(sub.join("report.csv"), report.to_csv())?;
        if !report.rows.is_empty() {
            emit_plot_data(&report, &sub, exp.svg)?;
        }
        let sweep = json!({
            "magnitude": magnitude,
            "directory": format!("magnitude_{idx}"),
            "median_terminal_value_error": percentile(&terminal, 0.5),
            "completed_runs": terminal.len(),
            "breakdowns": breakdowns,
        });
        write_summary(&sub, &sweep)?;
        sweeps.push(sweep);
        all_rows.extend(report.rows);
    }
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "algorithm": "robust",
        "mode": dist.mode,
        "seeds": exp.seeds,
        "optimal_cost": reference.cost,
        "sweep": sweeps,
        "failures": all_failures,
        "runtime_seconds": start.elapsed().as_secs_f64(),
    });
    write_summary(out_dir, &summary)?;
    Ok(Outcome {
        report: Some(ConvergenceReport { rows: all_rows }),
        summary,
        failures: all_failures,
    })
}
