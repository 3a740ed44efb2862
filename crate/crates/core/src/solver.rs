//! Alternating recovery of coordinates, distances and outliers.
//!
//! Each outer iteration performs
//!
//! 1. a closed-form distance update that copies observations onto `E` and the
//!    current geometry onto `E^c`: `D̂ = P_E(D_o) + P_{E^c}(h(X̂)) − L`;
//! 2. a coordinate update that trains a fresh per-instance network against
//!    the current distance target;
//! 3. an entrywise soft-threshold update of the outlier matrix `L`.
//!
//! The baseline without outlier modelling ([`run_mdnl`]) is the same loop
//! with `L` frozen at zero.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edm::{
    apply_mask, edm_from_coords, frobenius_sq, CoordinateMatrix, ObservationMask, OutlierMatrix,
    SquaredDistanceMatrix,
};
use crate::error::{Error, Result};
use crate::nn::{train_x_update, MlpConfig, MlpParams};

const INIT_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LUpdateMode {
    /// The entrywise solution taken verbatim: `L` is driven only by the
    /// change of geometry on unobserved pairs, and the coordinates are fit
    /// to `D̂ + L`.
    PaperLiteral,
    /// `L = S_τ(D_o − h(X̂))` on observed pairs, zero elsewhere, with the
    /// coordinates fit to the outlier-free estimate `D̂`.
    ResidualProx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdConvention {
    /// Threshold at `τ`.
    PaperTau,
    /// Threshold at `τ/2`, the exact minimiser of `(a − l)² + τ|l|`.
    ExactProxHalfTau,
}

/// Regularisation weight `τ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauSetting {
    /// `multiplier × median |P_E(h(X̂₁) − D_o)|` over nonzero entries,
    /// computed once after the first coordinate update.
    Auto { multiplier: f64 },
    Fixed(f64),
    /// `τ = ∞`: `L` stays zero and the solver reduces to the baseline.
    Infinite,
}

impl Default for TauSetting {
    fn default() -> Self {
        TauSetting::Auto { multiplier: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tau: TauSetting,
    pub outer_iterations: usize,
    pub l_update_mode: LUpdateMode,
    pub threshold_convention: ThresholdConvention,
    pub mlp: MlpConfig,
    pub x_init_seed: u64,
    /// Stop once `‖D̂_i − D̂_{i−1}‖_F / ‖D̂_{i−1}‖_F` falls below this.
    pub stop_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tau: TauSetting::default(),
            outer_iterations: 10,
            l_update_mode: LUpdateMode::ResidualProx,
            threshold_convention: ThresholdConvention::PaperTau,
            mlp: MlpConfig::default(),
            x_init_seed: 0,
            stop_tol: 1e-6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        match self.tau {
            TauSetting::Auto { multiplier } if !(multiplier >= 0.0 && multiplier.is_finite()) => {
                return Err(Error::config("tau.auto.multiplier", "must be nonnegative and finite"));
            }
            TauSetting::Fixed(t) if t.is_nan() || t < 0.0 => {
                return Err(Error::config("tau", format!("must be nonnegative, got {t}")));
            }
            _ => {}
        }
        if self.stop_tol.is_nan() || self.stop_tol < 0.0 {
            return Err(Error::config("stop_tol", "must be nonnegative"));
        }
        self.mlp.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub x_hat: CoordinateMatrix,
    /// Distance estimate consistent with `l_hat`: `P_E(D̂ + L̂) = P_E(D_o)`.
    pub d_hat: SquaredDistanceMatrix,
    pub l_hat: OutlierMatrix,
    /// Objective after each outer iteration.
    pub objective_trace: Vec<f64>,
    /// `‖P_E(D̂ + L − D_o)‖_F²` after each outer iteration.
    pub constraint_trace: Vec<f64>,
    pub inner_loss_traces: Vec<Vec<f64>>,
    pub iterations_run: usize,
    pub converged: bool,
    /// Resolved `τ` (infinite for the baseline).
    pub tau: f64,
}

/// Objective value together with the observation-constraint residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub objective: f64,
    pub constraint_violation: f64,
}

fn l1_penalty(tau: f64, l: &OutlierMatrix) -> f64 {
    let norm = l.l1_norm();
    if norm == 0.0 {
        0.0
    } else {
        tau * norm
    }
}

fn check_square(context: &'static str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(Error::dims(
            context,
            format!("{n}x{n}"),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(())
}

fn constraint_violation(
    d: &DMatrix<f64>,
    l: &OutlierMatrix,
    d_obs: &SquaredDistanceMatrix,
    mask: &ObservationMask,
) -> Result<f64> {
    // Evaluated as D − (D_o − L), the order in which `update_d` writes
    // observed entries, so a faithful copy yields exactly zero.
    let gap = d - (d_obs.as_matrix() - l.as_matrix());
    Ok(frobenius_sq(&apply_mask(&gap, mask)?))
}

/// `‖h(XXᵀ) − (D + L)‖_F² + τ‖L‖₁` and the constraint residual.
pub fn objective(
    x: &CoordinateMatrix,
    d: &DMatrix<f64>,
    l: &OutlierMatrix,
    d_obs: &SquaredDistanceMatrix,
    mask: &ObservationMask,
    tau: f64,
) -> Result<ObjectiveValue> {
    let n = x.n();
    check_square("objective D", d, n)?;
    check_square("objective L", l.as_matrix(), n)?;
    check_square("objective D_obs", d_obs.as_matrix(), n)?;
    let h = edm_from_coords(x);
    let fit = frobenius_sq(&(h.as_matrix() - d - l.as_matrix()));
    Ok(ObjectiveValue {
        objective: fit + l1_penalty(tau, l),
        constraint_violation: constraint_violation(d, l, d_obs, mask)?,
    })
}

/// `‖h(XXᵀ) − D‖_F² + τ‖L‖₁`, the objective whose coordinate block is fit
/// to the outlier-free estimate `D` (used with [`LUpdateMode::ResidualProx`]).
pub fn clean_objective(
    x: &CoordinateMatrix,
    d: &DMatrix<f64>,
    l: &OutlierMatrix,
    d_obs: &SquaredDistanceMatrix,
    mask: &ObservationMask,
    tau: f64,
) -> Result<ObjectiveValue> {
    let n = x.n();
    check_square("objective D", d, n)?;
    check_square("objective L", l.as_matrix(), n)?;
    let h = edm_from_coords(x);
    let fit = frobenius_sq(&(h.as_matrix() - d));
    Ok(ObjectiveValue {
        objective: fit + l1_penalty(tau, l),
        constraint_violation: constraint_violation(d, l, d_obs, mask)?,
    })
}

/// `D̂ = P_E(D_o) + P_{E^c}(h(X̂_prev X̂_prevᵀ)) − L_prev`.
pub fn update_d(
    x_prev: &CoordinateMatrix,
    l_prev: &OutlierMatrix,
    d_obs: &SquaredDistanceMatrix,
    mask: &ObservationMask,
) -> Result<SquaredDistanceMatrix> {
    let n = x_prev.n();
    check_square("update_d L_prev", l_prev.as_matrix(), n)?;
    check_square("update_d D_obs", d_obs.as_matrix(), n)?;
    if mask.n() != n {
        return Err(Error::dims("update_d mask", n, mask.n()));
    }
    let h = edm_from_coords(x_prev);
    let l = l_prev.as_matrix();
    let d = DMatrix::from_fn(n, n, |i, j| {
        let base = if mask.contains(i, j) {
            d_obs.get(i, j)
        } else {
            h.get(i, j)
        };
        base - l[(i, j)]
    });
    SquaredDistanceMatrix::new(d)
}

/// Scalar shrinkage: `a − t` above `t`, `a + t` below `−t`, zero between,
/// with `t = τ` or `τ/2` depending on the convention.
pub fn soft_threshold(a: f64, tau: f64, convention: ThresholdConvention) -> f64 {
    let t = match convention {
        ThresholdConvention::PaperTau => tau,
        ThresholdConvention::ExactProxHalfTau => 0.5 * tau,
    };
    if a > t {
        a - t
    } else if a < -t {
        a + t
    } else {
        0.0
    }
}

/// Outlier update.
///
/// * [`LUpdateMode::PaperLiteral`]: with `c = P_{E^c}(h(X̂_cur) − h(X̂_prev))`,
///   every entry becomes `S_τ(c + L_prev)`.
/// * [`LUpdateMode::ResidualProx`]: observed entries become
///   `S_τ(D_o − h(X̂_cur))`, unobserved entries zero.
///
/// The diagonal is zeroed and the result symmetrised by averaging.
#[allow(clippy::too_many_arguments)]
pub fn update_l(
    x_curr: &CoordinateMatrix,
    x_prev: &CoordinateMatrix,
    d_curr: &SquaredDistanceMatrix,
    l_prev: &OutlierMatrix,
    d_obs: &SquaredDistanceMatrix,
    mask: &ObservationMask,
    tau: f64,
    mode: LUpdateMode,
    convention: ThresholdConvention,
) -> Result<OutlierMatrix> {
    let n = x_curr.n();
    if x_prev.n() != n || x_prev.k() != x_curr.k() {
        return Err(Error::dims(
            "update_l X_prev",
            format!("{}x{}", n, x_curr.k()),
            format!("{}x{}", x_prev.n(), x_prev.k()),
        ));
    }
    check_square("update_l D_curr", d_curr.as_matrix(), n)?;
    check_square("update_l L_prev", l_prev.as_matrix(), n)?;
    check_square("update_l D_obs", d_obs.as_matrix(), n)?;
    if mask.n() != n {
        return Err(Error::dims("update_l mask", n, mask.n()));
    }
    let h_curr = edm_from_coords(x_curr);
    let raw = match mode {
        LUpdateMode::PaperLiteral => {
            let h_prev = edm_from_coords(x_prev);
            let lp = l_prev.as_matrix();
            DMatrix::from_fn(n, n, |i, j| {
                let c = if mask.contains(i, j) {
                    0.0
                } else {
                    h_curr.get(i, j) - h_prev.get(i, j)
                };
                soft_threshold(c + lp[(i, j)], tau, convention)
            })
        }
        LUpdateMode::ResidualProx => DMatrix::from_fn(n, n, |i, j| {
            if mask.contains(i, j) {
                soft_threshold(d_obs.get(i, j) - h_curr.get(i, j), tau, convention)
            } else {
                0.0
            }
        }),
    };
    let l = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            0.5 * (raw[(i, j)] + raw[(j, i)])
        }
    });
    OutlierMatrix::new(l)
}

/// `multiplier × median |P_E(h(X) − D_o)|` over the nonzero entries.
pub fn auto_tau(
    x: &CoordinateMatrix,
    d_obs: &SquaredDistanceMatrix,
    mask: &ObservationMask,
    multiplier: f64,
) -> f64 {
    let h = edm_from_coords(x);
    let mut residuals: Vec<f64> = mask
        .upper_offdiag_pairs()
        .into_iter()
        .map(|(i, j)| (h.get(i, j) - d_obs.get(i, j)).abs())
        .filter(|v| *v != 0.0)
        .collect();
    if residuals.is_empty() {
        return 0.0;
    }
    residuals.sort_by(f64::total_cmp);
    let m = residuals.len();
    let median = if m % 2 == 1 {
        residuals[m / 2]
    } else {
        0.5 * (residuals[m / 2 - 1] + residuals[m / 2])
    };
    multiplier * median
}

/// Random start `X̂₀ ~ Uniform[0, 1)^{n×k}`.
pub fn initial_coords(n: usize, k: usize, seed: u64) -> CoordinateMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let data: Vec<f64> = (0..n * k).map(|_| rng.random::<f64>()).collect();
    CoordinateMatrix::new(DMatrix::from_row_slice(n, k, &data))
        .expect("uniform samples are finite")
}

/// Outlier-aware alternating solver.
pub fn run_emdnl(
    d_obs: &SquaredDistanceMatrix,
    mask: &ObservationMask,
    k: usize,
    config: &SolverConfig,
) -> Result<SolveResult> {
    solve(d_obs, mask, k, config, true)
}

/// Baseline: the same loop with `L ≡ 0`.
pub fn run_mdnl(
    d_obs: &SquaredDistanceMatrix,
    mask: &ObservationMask,
    k: usize,
    config: &SolverConfig,
) -> Result<SolveResult> {
    solve(d_obs, mask, k, config, false)
}

fn relative_change(new: &DMatrix<f64>, old: &DMatrix<f64>) -> f64 {
    let diff = frobenius_sq(&(new - old)).sqrt();
    let base = frobenius_sq(old).sqrt();
    if base > 0.0 {
        diff / base
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn solve(
    d_obs: &SquaredDistanceMatrix,
    mask: &ObservationMask,
    k: usize,
    config: &SolverConfig,
    outlier_aware: bool,
) -> Result<SolveResult> {
    config.validate()?;
    let n = d_obs.n();
    if mask.n() != n {
        return Err(Error::dims("solver mask", n, mask.n()));
    }
    if k == 0 {
        return Err(Error::config("k", "must be at least 1"));
    }
    let mode = config.l_update_mode;
    let mut tau = match (outlier_aware, config.tau) {
        (false, _) | (true, TauSetting::Infinite) => f64::INFINITY,
        (true, TauSetting::Fixed(t)) => t,
        // resolved after the first coordinate update
        (true, TauSetting::Auto { .. }) => f64::NAN,
    };

    let mut x = initial_coords(n, k, config.x_init_seed);
    let mut l = OutlierMatrix::zeros(n);
    let mut d_prev: Option<SquaredDistanceMatrix> = None;
    let mut params: Option<MlpParams> = None;
    let mut objective_trace = Vec::new();
    let mut constraint_trace = Vec::new();
    let mut inner_loss_traces = Vec::new();
    let mut iterations_run = 0;
    let mut converged = false;

    for outer in 0..config.outer_iterations {
        let d_hat = update_d(&x, &l, d_obs, mask)?;
        let target = match mode {
            LUpdateMode::PaperLiteral => d_hat.as_matrix() + l.as_matrix(),
            LUpdateMode::ResidualProx => d_hat.as_matrix().clone(),
        };
        let mut mlp = config.mlp.clone();
        mlp.weight_init_seed = mlp.weight_init_seed.wrapping_add(outer as u64);
        let initial = if mlp.warm_start { params.take() } else { None };
        let trained = train_x_update(&x, &target, &mlp, initial)
            .map_err(|e| e.with_context(format!("outer iteration {}", outer + 1)))?;
        if tau.is_nan() {
            if let TauSetting::Auto { multiplier } = config.tau {
                tau = auto_tau(&trained.x, d_obs, mask, multiplier);
            }
        }
        if outlier_aware {
            l = update_l(
                &trained.x,
                &x,
                &d_hat,
                &l,
                d_obs,
                mask,
                tau,
                mode,
                config.threshold_convention,
            )?;
        }
        x = trained.x;
        params = Some(trained.params);
        inner_loss_traces.push(trained.loss_trace);
        iterations_run = outer + 1;

        let synced = update_d(&x, &l, d_obs, mask)?;
        let value = match mode {
            LUpdateMode::PaperLiteral => objective(&x, synced.as_matrix(), &l, d_obs, mask, tau)?,
            LUpdateMode::ResidualProx => {
                clean_objective(&x, synced.as_matrix(), &l, d_obs, mask, tau)?
            }
        };
        objective_trace.push(value.objective);
        constraint_trace.push(value.constraint_violation);

        let change = d_prev
            .as_ref()
            .map(|prev| relative_change(d_hat.as_matrix(), prev.as_matrix()));
        d_prev = Some(d_hat);
        if matches!(change, Some(c) if c < config.stop_tol) {
            converged = true;
            break;
        }
    }

    let d_hat = update_d(&x, &l, d_obs, mask)?;
    if tau.is_nan() {
        // no iterations ran; resolve against the initial guess
        if let TauSetting::Auto { multiplier } = config.tau {
            tau = auto_tau(&x, d_obs, mask, multiplier);
        }
    }
    Ok(SolveResult {
        x_hat: x,
        d_hat,
        l_hat: l,
        objective_trace,
        constraint_trace,
        inner_loss_traces,
        iterations_run,
        converged,
        tau,
    })
}
