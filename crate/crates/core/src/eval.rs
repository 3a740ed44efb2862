//! Alignment-aware scoring and multi-trial experiments.
//!
//! Distances fix a layout only up to translation, rotation and reflection,
//! so every recovered layout is first registered onto the ground truth with
//! an orthogonal Procrustes fit. All sensors are scored (no anchors).

use std::fmt;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edm::CoordinateMatrix;
use crate::error::{Error, Result};
use crate::formats::FORMAT_VERSION;
use crate::scene::{Scene, SceneSpec};
use crate::solver::{run_emdnl, run_mdnl, SolveResult, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "EMDNL")]
    Emdnl,
    #[serde(rename = "MDNL")]
    Mdnl,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Emdnl => f.write_str("EMDNL"),
            Method::Mdnl => f.write_str("MDNL"),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EMDNL" | "E-MDNL" => Ok(Method::Emdnl),
            "MDNL" => Ok(Method::Mdnl),
            other => Err(Error::config("method", format!("unknown method `{other}`"))),
        }
    }
}

impl Method {
    pub fn solve(
        self,
        scene: &Scene,
        config: &SolverConfig,
    ) -> Result<SolveResult> {
        match self {
            Method::Emdnl => run_emdnl(&scene.d_obs, &scene.mask, scene.k(), config),
            Method::Mdnl => run_mdnl(&scene.d_obs, &scene.mask, scene.k(), config),
        }
    }
}

fn check_same_shape(a: &CoordinateMatrix, b: &CoordinateMatrix) -> Result<()> {
    if a.n() != b.n() || a.k() != b.k() {
        return Err(Error::dims(
            "coordinate shapes",
            format!("{}x{}", b.n(), b.k()),
            format!("{}x{}", a.n(), a.k()),
        ));
    }
    Ok(())
}

/// Rigidly registers `x_hat` onto `x_ref`: returns `x_hat·Q + 1tᵀ` with
/// orthogonal `Q` (reflections allowed, no scaling) and translation `t`
/// minimising the summed squared residual.
pub fn procrustes_align(x_hat: &CoordinateMatrix, x_ref: &CoordinateMatrix) -> Result<CoordinateMatrix> {
    check_same_shape(x_hat, x_ref)?;
    let (n, k) = (x_hat.n(), x_hat.k());
    let mean_hat = x_hat.as_matrix().row_mean();
    let mean_ref = x_ref.as_matrix().row_mean();
    let centered_hat = DMatrix::from_fn(n, k, |i, j| x_hat.as_matrix()[(i, j)] - mean_hat[j]);
    let centered_ref = DMatrix::from_fn(n, k, |i, j| x_ref.as_matrix()[(i, j)] - mean_ref[j]);
    let cross = centered_hat.transpose() * &centered_ref;
    let svd = cross.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => unreachable!("SVD requested with both factors"),
    };
    let rotation = u * v_t;
    let mut aligned = centered_hat * rotation;
    for mut row in aligned.row_iter_mut() {
        row += &mean_ref;
    }
    CoordinateMatrix::new(aligned)
}

/// Mean Euclidean (not squared) error over `nodes`, or over every sensor
/// when `nodes` is `None`.
pub fn msle(x_aligned: &CoordinateMatrix, x_ref: &CoordinateMatrix, nodes: Option<&[usize]>) -> Result<f64> {
    check_same_shape(x_aligned, x_ref)?;
    let all: Vec<usize>;
    let nodes = match nodes {
        Some(nodes) => nodes,
        None => {
            all = (0..x_ref.n()).collect();
            &all
        }
    };
    if nodes.is_empty() {
        return Err(Error::config("nodes", "unknown-node set is empty"));
    }
    let mut total = 0.0;
    for &i in nodes {
        if i >= x_ref.n() {
            return Err(Error::dims("msle node index", format!("< {}", x_ref.n()), i));
        }
        total += (x_aligned.as_matrix().row(i) - x_ref.as_matrix().row(i)).norm();
    }
    Ok(total / nodes.len() as f64)
}

/// Aligns then scores over all sensors.
pub fn aligned_msle(x_hat: &CoordinateMatrix, x_ref: &CoordinateMatrix) -> Result<f64> {
    msle(&procrustes_align(x_hat, x_ref)?, x_ref, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Scene template; `outlier_ratio` and `seed` are set per cell and trial.
    #[serde(default)]
    pub scene: SceneSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    pub num_trials: usize,
    pub outlier_ratios: Vec<f64>,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub seed_base: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: FORMAT_VERSION,
            scene: SceneSpec::default(),
            solver: SolverConfig::default(),
            num_trials: 1000,
            outlier_ratios: vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3],
            methods: vec![Method::Emdnl, Method::Mdnl],
            seed_base: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Version {
                found: self.version,
                expected: FORMAT_VERSION,
            });
        }
        if self.num_trials == 0 {
            return Err(Error::config("num_trials", "must be at least 1"));
        }
        if self.outlier_ratios.is_empty() {
            return Err(Error::config("outlier_ratios", "need at least one ratio"));
        }
        if self.outlier_ratios.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
            return Err(Error::config("outlier_ratios", "must be strictly ascending"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods", "need at least one method"));
        }
        for &ratio in &self.outlier_ratios {
            self.trial_scene_spec(ratio, 0).validate()?;
        }
        self.solver.validate()
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed_base.wrapping_add(trial as u64)
    }

    pub fn trial_scene_spec(&self, ratio: f64, trial: usize) -> SceneSpec {
        SceneSpec {
            outlier_ratio: ratio,
            seed: self.trial_seed(trial),
            ..self.scene.clone()
        }
    }

    pub fn trial_solver_config(&self, trial: usize) -> SolverConfig {
        let seed = self.trial_seed(trial);
        let mut cfg = self.solver.clone();
        cfg.x_init_seed = cfg.x_init_seed.wrapping_add(seed);
        cfg.mlp.weight_init_seed = cfg.mlp.weight_init_seed.wrapping_add(seed);
        cfg
    }
}

/// One solved trial. `msle` is `None` when the solve failed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub method: Method,
    pub ratio: f64,
    pub trial: usize,
    pub msle: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub wall_ms: u128,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub method: Method,
    pub ratio: f64,
    pub mean_msle: f64,
    pub median_msle: f64,
    pub std_msle: f64,
    /// Trials attempted (successful plus failed).
    pub n_trials: usize,
    pub n_failed: usize,
    /// Successful per-trial scores, ordered by trial index.
    pub msles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub trials: Vec<TrialRecord>,
    pub cells: Vec<CellSummary>,
    pub total_wall_ms: u128,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, var.sqrt())
}

impl ExperimentReport {
    pub fn cell(&self, method: Method, ratio: f64) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.method == method && c.ratio == ratio)
    }

    fn from_trials(config: &ExperimentConfig, trials: Vec<TrialRecord>, total_wall_ms: u128) -> Self {
        let mut cells = Vec::new();
        for &ratio in &config.outlier_ratios {
            for &method in &config.methods {
                let in_cell: Vec<&TrialRecord> = trials
                    .iter()
                    .filter(|t| t.method == method && t.ratio == ratio)
                    .collect();
                let msles: Vec<f64> = in_cell.iter().filter_map(|t| t.msle).collect();
                let (mean_msle, std_msle) = mean_std(&msles);
                cells.push(CellSummary {
                    method,
                    ratio,
                    mean_msle,
                    median_msle: median(&msles),
                    std_msle,
                    n_trials: in_cell.len(),
                    n_failed: in_cell.len() - msles.len(),
                    msles,
                });
            }
        }
        Self {
            trials,
            cells,
            total_wall_ms,
        }
    }

    /// Per-trial CSV: `method,ratio,trial,msle,iterations,converged,wall_ms`.
    ///
    /// `wall_ms` is left empty unless `timing` is set, so that repeated runs
    /// produce identical bytes.
    pub fn trials_csv(&self, timing: bool) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "ratio", "trial", "msle", "iterations", "converged", "wall_ms"])?;
        for t in &self.trials {
            w.write_record([
                t.method.to_string(),
                t.ratio.to_string(),
                t.trial.to_string(),
                t.msle.map(|v| v.to_string()).unwrap_or_default(),
                t.iterations.to_string(),
                t.converged.to_string(),
                if timing { t.wall_ms.to_string() } else { String::new() },
            ])?;
        }
        finish_csv(w)
    }

    /// Aggregate CSV:
    /// `method,ratio,mean_msle,median_msle,std_msle,n_trials,n_failed`.
    pub fn aggregate_csv(&self) -> Result<String> {
        let fmt = |v: f64| if v.is_finite() { v.to_string() } else { String::new() };
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "method",
            "ratio",
            "mean_msle",
            "median_msle",
            "std_msle",
            "n_trials",
            "n_failed",
        ])?;
        for c in &self.cells {
            w.write_record([
                c.method.to_string(),
                c.ratio.to_string(),
                fmt(c.mean_msle),
                fmt(c.median_msle),
                fmt(c.std_msle),
                c.n_trials.to_string(),
                c.n_failed.to_string(),
            ])?;
        }
        finish_csv(w)
    }

    /// Ratio-by-method table of median MSLE for terminal output.
    pub fn median_table(&self, methods: &[Method], ratios: &[f64]) -> String {
        let mut out = format!("{:>8}", "ratio");
        for m in methods {
            out.push_str(&format!(" {:>12}", m.to_string()));
        }
        out.push('\n');
        for &r in ratios {
            out.push_str(&format!("{r:>8.3}"));
            for &m in methods {
                match self.cell(m, r) {
                    Some(c) if c.median_msle.is_finite() => {
                        out.push_str(&format!(" {:>12.6}", c.median_msle))
                    }
                    _ => out.push_str(&format!(" {:>12}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csvs(&self, dir: &Path, timing: bool) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let trials = dir.join("trials.csv");
        std::fs::write(&trials, self.trials_csv(timing)?).map_err(|e| Error::io(&trials, e))?;
        let agg = dir.join("aggregate.csv");
        std::fs::write(&agg, self.aggregate_csv()?).map_err(|e| Error::io(&agg, e))
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::from(csv::Error::from(e.into_error())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn run_one(config: &ExperimentConfig, method: Method, ratio: f64, trial: usize) -> TrialRecord {
    let start = Instant::now();
    let outcome = Scene::generate(&config.trial_scene_spec(ratio, trial)).and_then(|scene| {
        let result = method.solve(&scene, &config.trial_solver_config(trial))?;
        let score = aligned_msle(&result.x_hat, &scene.x_true)?;
        Ok((result, score))
    });
    let wall_ms = start.elapsed().as_millis();
    match outcome {
        Ok((result, score)) => TrialRecord {
            method,
            ratio,
            trial,
            msle: Some(score),
            iterations: result.iterations_run,
            converged: result.converged,
            wall_ms,
            error: None,
        },
        Err(e) => TrialRecord {
            method,
            ratio,
            trial,
            msle: None,
            iterations: 0,
            converged: false,
            wall_ms,
            error: Some(
                e.with_context(format!("method {method}, ratio {ratio}, trial {trial}"))
                    .to_string(),
            ),
        },
    }
}

/// Runs every `(ratio, method, trial)` job. Scenes use seed
/// `seed_base + trial`, so methods and ratios are paired per trial. Failed
/// solves are recorded and excluded from the aggregates.
///
/// `workers > 1` fans jobs out over a thread pool; results are ordered by
/// job index so the report does not depend on scheduling.
pub fn run_trials(config: &ExperimentConfig, workers: usize) -> Result<ExperimentReport> {
    config.validate()?;
    let jobs: Vec<(f64, Method, usize)> = config
        .outlier_ratios
        .iter()
        .flat_map(|&r| {
            config
                .methods
                .iter()
                .flat_map(move |&m| (0..config.num_trials).map(move |t| (r, m, t)))
        })
        .collect();
    let start = Instant::now();
    let trials: Vec<TrialRecord> = if workers <= 1 {
        jobs.iter().map(|&(r, m, t)| run_one(config, m, r, t)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::config("workers", e.to_string()))?;
        pool.install(|| {
            jobs.par_iter()
                .map(|&(r, m, t)| run_one(config, m, r, t))
                .collect()
        })
    };
    Ok(ExperimentReport::from_trials(
        config,
        trials,
        start.elapsed().as_millis(),
    ))
}

/// Outlier-ratio sweep: identical to [`run_trials`], but requires at least
/// one ratio and is the entry point for curve-style reports.
pub fn sweep_outlier_ratio(config: &ExperimentConfig, workers: usize) -> Result<ExperimentReport> {
    if config.outlier_ratios.is_empty() {
        return Err(Error::config("outlier_ratios", "need at least one ratio"));
    }
    run_trials(config, workers)
}
