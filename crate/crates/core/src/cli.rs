//! Command-line front end.
//!
//! Every command takes an optional JSON config (`--config`) carrying a
//! `version` field, layered with `--set key=value` overrides on dotted paths
//! and a `--seed` override. Unknown config keys are rejected.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::edm::apply_mask;
use crate::error::Error;
use crate::eval::{aligned_msle, sweep_outlier_ratio, ExperimentConfig, Method};
use crate::formats::{self, ResultFile, FORMAT_VERSION};
use crate::scene::{Scene, SceneSpec};
use crate::solver::{SolveResult, SolverConfig};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "edmloc", version, about = "Outlier-robust sensor localization from partial distance matrices")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON configuration file for the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory receiving output files.
    #[arg(long, global = true, default_value = ".")]
    pub output_dir: PathBuf,
    /// Seed override (scene seed, solver seeds, or sweep seed base).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for `sweep`.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Config override on a dotted key path, e.g. `solver.mlp.inner_iterations=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene and write `scene.json`.
    Generate,
    /// Solve a scene and write `result.json` plus trace CSVs.
    Solve {
        #[arg(long)]
        scene: PathBuf,
    },
    /// Align a result to a scene's ground truth and report MSLE.
    Evaluate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        result: PathBuf,
    },
    /// Run a multi-trial outlier-ratio sweep and write CSV reports.
    Sweep {
        /// Fill the `wall_ms` column (makes output run-dependent).
        #[arg(long)]
        timing: bool,
    },
    /// Check scene and result invariants.
    Validate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        result: Option<PathBuf>,
    },
}

/// An error paired with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: Error,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

fn classify(error: Error, default: i32) -> CliError {
    let code = match error.root() {
        Error::Io { .. } => EXIT_IO,
        Error::Diverged { .. } => EXIT_DIVERGED,
        _ => default,
    };
    CliError { code, error }
}

fn config_err(error: Error) -> CliError {
    classify(error, EXIT_CONFIG)
}

fn validation_err(error: Error) -> CliError {
    classify(error, EXIT_VALIDATION)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub version: u32,
    #[serde(default)]
    pub scene: SceneSpec,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            version: FORMAT_VERSION,
            scene: SceneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    pub version: u32,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn default_method() -> Method {
    Method::Emdnl
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            version: FORMAT_VERSION,
            method: default_method(),
            solver: SolverConfig::default(),
        }
    }
}

/// Sets `value` at a dotted `path`, creating intermediate objects.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), Error> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::config(path, "empty key segment"));
        }
        let obj = match cur {
            Value::Object(map) => map,
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().expect("just created")
            }
            _ => return Err(Error::config(path, format!("`{part}` is not inside an object"))),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

fn parse_override(raw: &str) -> Result<(String, Value), Error> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::config(raw, "override must look like key=value"))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Loads a command config: file (or defaults), then overrides, then a typed
/// decode that rejects unknown keys.
pub fn load_config<T>(path: Option<&Path>, overrides: &[String]) -> Result<T, Error>
where
    T: Serialize + DeserializeOwned + Default,
{
    let (mut value, origin) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| Error::Malformed {
                path: p.to_path_buf(),
                reason: e.to_string(),
            })?;
            (v, p.to_path_buf())
        }
        None => (
            serde_json::to_value(T::default()).expect("default config serialises"),
            PathBuf::from("<defaults>"),
        ),
    };
    for raw in overrides {
        let (key, v) = parse_override(raw)?;
        set_path(&mut value, &key, v)?;
    }
    formats::parse_versioned(&value.to_string(), &origin)
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| classify(Error::io(dir, e), EXIT_IO))
}

/// Runs a parsed command line, returning the text to print on success.
pub fn run(cli: Cli) -> Result<String, CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Generate => cmd_generate(g),
        Command::Solve { scene } => cmd_solve(g, scene),
        Command::Evaluate { scene, result } => cmd_evaluate(g, scene, result),
        Command::Sweep { timing } => cmd_sweep(g, *timing),
        Command::Validate { scene, result } => cmd_validate(scene, result.as_deref()),
    }
}

pub fn cmd_generate(g: &GlobalArgs) -> Result<String, CliError> {
    let mut cfg: GenerateConfig = load_config(g.config.as_deref(), &g.overrides).map_err(config_err)?;
    if let Some(seed) = g.seed {
        cfg.scene.seed = seed;
    }
    cfg.scene.validate().map_err(config_err)?;
    let scene = Scene::generate(&cfg.scene).map_err(config_err)?;
    ensure_dir(&g.output_dir)?;
    let path = g.output_dir.join("scene.json");
    scene.save(&path).map_err(|e| classify(e, EXIT_IO))?;
    Ok(format!(
        "wrote {}\nn = {}, k = {}, observed pairs = {}, outliers = {}\n",
        path.display(),
        scene.n(),
        scene.k(),
        scene.mask.upper_offdiag_pairs().len(),
        scene.outlier_count()
    ))
}

fn objective_csv(result: &SolveResult) -> Result<String, Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "objective", "constraint_violation"])?;
    for (i, (obj, viol)) in result
        .objective_trace
        .iter()
        .zip(&result.constraint_trace)
        .enumerate()
    {
        w.write_record([(i + 1).to_string(), obj.to_string(), viol.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::from(csv::Error::from(e.into_error())))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

fn inner_loss_csv(result: &SolveResult) -> Result<String, Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["outer", "step", "loss"])?;
    for (outer, trace) in result.inner_loss_traces.iter().enumerate() {
        for (step, loss) in trace.iter().enumerate() {
            w.write_record([(outer + 1).to_string(), step.to_string(), loss.to_string()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::from(csv::Error::from(e.into_error())))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

pub fn cmd_solve(g: &GlobalArgs, scene_path: &Path) -> Result<String, CliError> {
    let mut cfg: SolveConfig = load_config(g.config.as_deref(), &g.overrides).map_err(config_err)?;
    if let Some(seed) = g.seed {
        cfg.solver.x_init_seed = seed;
        cfg.solver.mlp.weight_init_seed = seed;
    }
    cfg.solver.validate().map_err(config_err)?;
    let scene = Scene::load(scene_path).map_err(validation_err)?;
    let result = cfg
        .method
        .solve(&scene, &cfg.solver)
        .map_err(|e| classify(e, EXIT_VALIDATION))?;

    ensure_dir(&g.output_dir)?;
    let out = |name: &str| g.output_dir.join(name);
    let io = |e: Error| classify(e, EXIT_IO);
    formats::write_json(&out("result.json"), &ResultFile::from_result(&cfg.method.to_string(), &result))
        .map_err(io)?;
    write_file(&out("objective_trace.csv"), &objective_csv(&result).map_err(io)?).map_err(io)?;
    write_file(&out("inner_loss.csv"), &inner_loss_csv(&result).map_err(io)?).map_err(io)?;

    let violation = result.constraint_trace.last().copied().unwrap_or_else(|| {
        let gap = result.d_hat.as_matrix() - (scene.d_obs.as_matrix() - result.l_hat.as_matrix());
        apply_mask(&gap, &scene.mask)
            .map(|m| crate::edm::frobenius_sq(&m))
            .unwrap_or(f64::NAN)
    });
    let mut text = format!(
        "method {}: {} outer iterations (converged: {}), tau = {}\n",
        cfg.method,
        result.iterations_run,
        result.converged,
        if result.tau.is_finite() { result.tau.to_string() } else { "inf".into() }
    );
    if let (Some(first), Some(last)) = (result.objective_trace.first(), result.objective_trace.last()) {
        text.push_str(&format!("objective: first {first:.6e}, last {last:.6e}\n"));
    }
    text.push_str(&format!(
        "outliers flagged: {}\nconstraint violation: {}\nwrote {}\n",
        result.l_hat.nnz() / 2,
        violation,
        out("result.json").display()
    ));
    Ok(text)
}

fn load_result(path: &Path) -> Result<ResultFile, Error> {
    formats::read_json(path)
}

pub fn cmd_evaluate(g: &GlobalArgs, scene_path: &Path, result_path: &Path) -> Result<String, CliError> {
    let scene = Scene::load(scene_path).map_err(validation_err)?;
    let result = load_result(result_path).map_err(validation_err)?;
    let x_hat = result.x_hat(result_path).map_err(validation_err)?;
    let score = aligned_msle(&x_hat, &scene.x_true).map_err(validation_err)?;

    ensure_dir(&g.output_dir)?;
    let csv_path = g.output_dir.join("evaluation.csv");
    let io = |e: std::io::Error| classify(Error::io(&csv_path, e), EXIT_IO);
    let fresh = !csv_path.exists();
    let mut file = OpenOptions::new().create(true).append(true).open(&csv_path).map_err(io)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let csv_err = |e: csv::Error| classify(Error::from(e), EXIT_IO);
    if fresh {
        w.write_record(["scene", "result", "method", "msle"]).map_err(csv_err)?;
    }
    w.write_record([
        scene_path.display().to_string(),
        result_path.display().to_string(),
        result.method.clone(),
        score.to_string(),
    ])
    .map_err(csv_err)?;
    let bytes = w.into_inner().map_err(|e| classify(Error::from(csv::Error::from(e.into_error())), EXIT_IO))?;
    file.write_all(&bytes).map_err(io)?;
    Ok(format!("MSLE {score}\n"))
}

pub fn cmd_sweep(g: &GlobalArgs, timing: bool) -> Result<String, CliError> {
    let mut cfg: ExperimentConfig = load_config(g.config.as_deref(), &g.overrides).map_err(config_err)?;
    if let Some(seed) = g.seed {
        cfg.seed_base = seed;
    }
    cfg.validate().map_err(config_err)?;
    let report = sweep_outlier_ratio(&cfg, g.workers).map_err(config_err)?;
    report
        .write_csvs(&g.output_dir, timing)
        .map_err(|e| classify(e, EXIT_IO))?;
    let mut text = report.median_table(&cfg.methods, &cfg.outlier_ratios);
    let failed: usize = report.cells.iter().map(|c| c.n_failed).sum();
    if failed > 0 {
        text.push_str(&format!("{failed} trial(s) failed:\n"));
        for t in report.trials.iter().filter(|t| t.error.is_some()) {
            text.push_str(&format!("  {}\n", t.error.as_deref().unwrap_or_default()));
        }
    }
    text.push_str(&format!(
        "wrote {} and {}\n",
        g.output_dir.join("trials.csv").display(),
        g.output_dir.join("aggregate.csv").display()
    ));
    Ok(text)
}

pub fn cmd_validate(scene_path: &Path, result_path: Option<&Path>) -> Result<String, CliError> {
    let scene = Scene::load(scene_path).map_err(validation_err)?;
    let mut text = format!("scene {}: ok\n", scene_path.display());
    if let Some(path) = result_path {
        validate_result(&scene, path).map_err(validation_err)?;
        text.push_str(&format!("result {}: ok\n", path.display()));
    }
    Ok(text)
}

fn validate_result(scene: &Scene, path: &Path) -> Result<(), Error> {
    let result = load_result(path)?;
    if result.n != scene.n() || result.k != scene.k() {
        return Err(Error::dims(
            "result vs scene",
            format!("{}x{}", scene.n(), scene.k()),
            format!("{}x{}", result.n, result.k),
        ));
    }
    result.x_hat(path)?;
    let d_hat = result.d_hat(path)?;
    let l_hat = result.l_hat(path)?;
    if !l_hat.is_symmetric() || (0..result.n).any(|i| l_hat.as_matrix()[(i, i)] != 0.0) {
        return Err(Error::InvariantViolation(
            "l_hat must be symmetric with a zero diagonal".into(),
        ));
    }
    let gap = d_hat.as_matrix() - (scene.d_obs.as_matrix() - l_hat.as_matrix());
    let violation = crate::edm::frobenius_sq(&apply_mask(&gap, &scene.mask)?);
    if violation != 0.0 {
        return Err(Error::InvariantViolation(format!(
            "observed entries of d_hat + l_hat differ from d_obs (squared gap {violation})"
        )));
    }
    if result.objective_trace.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvariantViolation("objective trace is not finite".into()));
    }
    if result.constraint_trace.iter().any(|v| *v != 0.0) {
        return Err(Error::InvariantViolation("constraint trace is nonzero".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_override_creates_nested_keys() {
        let mut v = serde_json::json!({"version": 1});
        set_path(&mut v, "solver.mlp.inner_iterations", Value::from(7)).unwrap();
        assert_eq!(v["solver"]["mlp"]["inner_iterations"], 7);
    }

    #[test]
    fn override_values_parse_as_json_or_string() {
        assert_eq!(parse_override("a=0.5").unwrap().1, Value::from(0.5));
        assert_eq!(parse_override("a=\"x\"").unwrap().1, Value::from("x"));
        assert_eq!(parse_override("a=infinite").unwrap().1, Value::from("infinite"));
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn unknown_override_key_is_rejected() {
        let err = load_config::<SolveConfig>(None, &["solver.mlp.widths=3".into()]).unwrap_err();
        assert!(err.to_string().contains("widths"), "{err}");
    }

    #[test]
    fn defaults_round_trip_through_overrides() {
        let cfg: SolveConfig = load_config(None, &["solver.outer_iterations=3".into()]).unwrap();
        assert_eq!(cfg.solver.outer_iterations, 3);
        assert_eq!(cfg.method, Method::Emdnl);
        let exp: ExperimentConfig = load_config(None, &[]).unwrap();
        assert_eq!(exp, ExperimentConfig::default());
    }
}
