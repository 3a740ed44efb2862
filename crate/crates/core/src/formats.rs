//! On-disk JSON documents for scenes and solver results.
//!
//! Matrices are stored dense and row-major next to their dimensions; masks
//! are stored as sorted upper-triangle pair lists (diagonal included), with
//! symmetry implied. See `FORMATS.md` at the repository root.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::edm::{CoordinateMatrix, ObservationMask, OutlierMatrix, SquaredDistanceMatrix};
use crate::error::{Error, Result};
use crate::scene::{Scene, SceneSpec};
use crate::solver::SolveResult;

pub const FORMAT_VERSION: u32 = 1;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a versioned JSON document, checking the `version` field before
/// decoding the rest.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_versioned(&text, path)
}

pub fn parse_versioned<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    match value.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Version {
                found: v as u32,
                expected: FORMAT_VERSION,
            })
        }
        None => return Err(malformed("missing integer field `version`".into())),
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let field = e.path().to_string();
        malformed(format!("field `{field}`: {}", e.into_inner()))
    })
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn matrix(path: &Path, name: &str, rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("`{name}` has {} values, expected {}", data.len(), rows * cols),
        });
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub version: u32,
    pub n: usize,
    pub k: usize,
    pub spec: SceneSpec,
    pub x_true: Vec<f64>,
    pub d_true: Vec<f64>,
    pub mask: Vec<[usize; 2]>,
    pub d_obs: Vec<f64>,
    pub l_true: Vec<f64>,
}

impl SceneFile {
    pub fn from_scene(scene: &Scene) -> Self {
        Self {
            version: FORMAT_VERSION,
            n: scene.n(),
            k: scene.k(),
            spec: scene.spec.clone(),
            x_true: scene.x_true.to_row_major(),
            d_true: row_major(scene.d_true.as_matrix()),
            mask: scene.mask.upper_pairs().into_iter().map(|(i, j)| [i, j]).collect(),
            d_obs: row_major(scene.d_obs.as_matrix()),
            l_true: row_major(scene.l_true.as_matrix()),
        }
    }

    /// Decodes and validates every scene invariant.
    pub fn into_scene(self, path: &Path) -> Result<Scene> {
        let (n, k) = (self.n, self.k);
        let ctx = |e: Error| e.with_context(format!("scene file {}", path.display()));
        let x_true = CoordinateMatrix::new(matrix(path, "x_true", n, k, &self.x_true)?).map_err(ctx)?;
        let d_true = SquaredDistanceMatrix::new(matrix(path, "d_true", n, n, &self.d_true)?).map_err(ctx)?;
        let pairs: Vec<(usize, usize)> = self.mask.iter().map(|p| (p[0], p[1])).collect();
        let mask = ObservationMask::from_upper_pairs(n, &pairs).map_err(ctx)?;
        let d_obs = SquaredDistanceMatrix::new(matrix(path, "d_obs", n, n, &self.d_obs)?).map_err(ctx)?;
        let l_true = OutlierMatrix::new(matrix(path, "l_true", n, n, &self.l_true)?).map_err(ctx)?;
        let scene = Scene {
            spec: self.spec,
            // Recomputed so that loaded scenes carry the certified flag.
            d_true: if d_true == SquaredDistanceMatrix::new(crate::edm::edm_from_coords(&x_true).into_inner()).map_err(ctx)? {
                crate::edm::edm_from_coords(&x_true)
            } else {
                d_true
            },
            x_true,
            mask,
            d_obs,
            l_true,
        };
        scene.validate().map_err(ctx)?;
        Ok(scene)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultFile {
    pub version: u32,
    pub method: String,
    pub n: usize,
    pub k: usize,
    pub x_hat: Vec<f64>,
    pub d_hat: Vec<f64>,
    pub l_hat: Vec<f64>,
    /// `null` when `τ` is infinite (baseline).
    pub tau: Option<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
    pub constraint_trace: Vec<f64>,
}

impl ResultFile {
    pub fn from_result(method: &str, result: &SolveResult) -> Self {
        Self {
            version: FORMAT_VERSION,
            method: method.to_string(),
            n: result.x_hat.n(),
            k: result.x_hat.k(),
            x_hat: result.x_hat.to_row_major(),
            d_hat: row_major(result.d_hat.as_matrix()),
            l_hat: row_major(result.l_hat.as_matrix()),
            tau: result.tau.is_finite().then_some(result.tau),
            iterations_run: result.iterations_run,
            converged: result.converged,
            objective_trace: result.objective_trace.clone(),
            constraint_trace: result.constraint_trace.clone(),
        }
    }

    pub fn x_hat(&self, path: &Path) -> Result<CoordinateMatrix> {
        CoordinateMatrix::new(matrix(path, "x_hat", self.n, self.k, &self.x_hat)?)
    }

    pub fn d_hat(&self, path: &Path) -> Result<SquaredDistanceMatrix> {
        SquaredDistanceMatrix::new(matrix(path, "d_hat", self.n, self.n, &self.d_hat)?)
    }

    pub fn l_hat(&self, path: &Path) -> Result<OutlierMatrix> {
        OutlierMatrix::new(matrix(path, "l_hat", self.n, self.n, &self.l_hat)?)
    }
}
