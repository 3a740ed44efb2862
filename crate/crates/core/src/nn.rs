//! Per-instance multilayer perceptron used for the coordinate update.
//!
//! The network maps `vec(X_prev)` (length `n·k`) to a new `vec(X)` through
//! `m − 1` ReLU layers and one linear output layer. It is trained from scratch
//! on a single target matrix `M` by minimising `‖h(XXᵀ) − M‖_F²`; nothing is
//! meant to generalise beyond that one instance.
//!
//! `vec` is column-major: the first `n` entries are the first coordinate of
//! every sensor.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::edm::{squared_distances, CoordinateMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adagrad,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    /// Total fully connected layers `m` (hidden layers plus the output layer).
    pub num_fc_layers: usize,
    /// Widths of the `m − 1` hidden layers; `None` sets every width to `n·k`.
    pub hidden_widths: Option<Vec<usize>>,
    pub activation: Activation,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub adagrad_epsilon: f64,
    /// Training iterations `T` per coordinate update.
    pub inner_iterations: usize,
    pub weight_init_seed: u64,
    /// Reuse the previous outer iteration's parameters instead of a fresh
    /// network.
    pub warm_start: bool,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            num_fc_layers: 5,
            hidden_widths: None,
            activation: Activation::Relu,
            optimizer: OptimizerKind::Adagrad,
            learning_rate: 0.01,
            adagrad_epsilon: 1e-8,
            inner_iterations: 5000,
            weight_init_seed: 0,
            warm_start: false,
        }
    }
}

impl MlpConfig {
    /// Hidden widths resolved against the problem size.
    pub fn widths(&self, n: usize, k: usize) -> Result<Vec<usize>> {
        if self.num_fc_layers == 0 {
            return Err(Error::config("mlp.num_fc_layers", "must be at least 1"));
        }
        let widths = match &self.hidden_widths {
            Some(w) => {
                if w.len() != self.num_fc_layers - 1 {
                    return Err(Error::config(
                        "mlp.hidden_widths",
                        format!(
                            "expected {} widths for {} layers, got {}",
                            self.num_fc_layers - 1,
                            self.num_fc_layers,
                            w.len()
                        ),
                    ));
                }
                if w.contains(&0) {
                    return Err(Error::config("mlp.hidden_widths", "widths must be positive"));
                }
                w.clone()
            }
            None => vec![n * k; self.num_fc_layers - 1],
        };
        Ok(widths)
    }

    pub fn validate(&self) -> Result<()> {
        self.widths(1, 1)?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("mlp.learning_rate", "must be positive and finite"));
        }
        if self.adagrad_epsilon.is_nan() || self.adagrad_epsilon <= 0.0 {
            return Err(Error::config("mlp.adagrad_epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// Weight matrix and bias of one fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    fn zeros_like(other: &Dense) -> Self {
        Self {
            weight: DMatrix::zeros(other.weight.nrows(), other.weight.ncols()),
            bias: DVector::zeros(other.bias.len()),
        }
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Network parameters; the last layer is the linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

impl MlpParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.nrows()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }
}

/// Gradients with the same layout as [`MlpParams`].
pub type ParamGrads = MlpParams;

/// Layer inputs and pre-activations recorded by [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[ℓ]` is the input to layer `ℓ`; `inputs[0]` is the network input.
    inputs: Vec<DVector<f64>>,
    /// Pre-activations of the hidden layers.
    pre_activations: Vec<DVector<f64>>,
}

/// Running sum of squared gradients, one tensor per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdagradState {
    pub accum: MlpParams,
}

impl AdagradState {
    pub fn new(params: &MlpParams) -> Self {
        Self {
            accum: params.zeros_like(),
        }
    }
}

/// He-style initialisation: weights `N(0, 2 / fan_in)`, zero biases.
pub fn init_mlp(config: &MlpConfig, n: usize, k: usize) -> Result<MlpParams> {
    let widths = config.widths(n, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.weight_init_seed);
    let mut dims = Vec::with_capacity(widths.len() + 2);
    dims.push(n * k);
    dims.extend_from_slice(&widths);
    dims.push(n * k);
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                std * z
            });
            Dense {
                weight,
                bias: DVector::zeros(fan_out),
            }
        })
        .collect();
    Ok(MlpParams { layers })
}

/// Forward pass: hidden `h_ℓ = relu(W_ℓ h_{ℓ−1} + b_ℓ)`, output
/// `W_z h_{m−1} + b_z`.
pub fn forward(params: &MlpParams, input: &DVector<f64>) -> (DVector<f64>, ForwardCache) {
    let depth = params.layers.len();
    let mut inputs = Vec::with_capacity(depth);
    let mut pre_activations = Vec::with_capacity(depth - 1);
    let mut h = input.clone();
    for (idx, layer) in params.layers.iter().enumerate() {
        let mut z = layer.bias.clone();
        z.gemv(1.0, &layer.weight, &h, 1.0);
        inputs.push(h);
        if idx + 1 == depth {
            return (
                z,
                ForwardCache {
                    inputs,
                    pre_activations,
                },
            );
        }
        h = z.map(relu);
        pre_activations.push(z);
    }
    unreachable!("network has at least one layer")
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Gradients of `⟨grad_out, forward(params, input)⟩` with respect to every
/// weight and bias. The ReLU derivative at exactly zero is taken as zero.
pub fn backward(
    params: &MlpParams,
    cache: &ForwardCache,
    grad_out: &DVector<f64>,
) -> Result<ParamGrads> {
    let mut grads = params.zeros_like();
    backward_into(params, cache, grad_out, &mut grads)?;
    Ok(grads)
}

fn backward_into(
    params: &MlpParams,
    cache: &ForwardCache,
    grad_out: &DVector<f64>,
    grads: &mut ParamGrads,
) -> Result<()> {
    let depth = params.layers.len();
    if cache.inputs.len() != depth || cache.pre_activations.len() + 1 != depth {
        return Err(Error::dims("backward cache layers", depth, cache.inputs.len()));
    }
    if grad_out.len() != params.output_dim() {
        return Err(Error::dims("backward grad_out", params.output_dim(), grad_out.len()));
    }
    let mut delta = grad_out.clone();
    for idx in (0..depth).rev() {
        let layer = &params.layers[idx];
        let input = &cache.inputs[idx];
        if input.len() != layer.weight.ncols() {
            return Err(Error::dims("backward cache input", layer.weight.ncols(), input.len()));
        }
        let g = &mut grads.layers[idx];
        g.weight.ger(1.0, &delta, input, 0.0);
        g.bias.copy_from(&delta);
        if idx > 0 {
            let mut upstream = layer.weight.tr_mul(&delta);
            let pre = &cache.pre_activations[idx - 1];
            upstream.zip_apply(pre, |u, z| {
                if z <= 0.0 {
                    *u = 0.0;
                }
            });
            delta = upstream;
        }
    }
    Ok(())
}

/// Adagrad: `state += g²`, `θ −= lr · g / (√state + eps)`.
pub fn adagrad_step(
    params: &mut MlpParams,
    state: &mut AdagradState,
    grads: &ParamGrads,
    lr: f64,
    eps: f64,
) {
    for ((p, s), g) in params
        .layers
        .iter_mut()
        .zip(state.accum.layers.iter_mut())
        .zip(grads.layers.iter())
    {
        adagrad_slice(p.weight.as_mut_slice(), s.weight.as_mut_slice(), g.weight.as_slice(), lr, eps);
        adagrad_slice(p.bias.as_mut_slice(), s.bias.as_mut_slice(), g.bias.as_slice(), lr, eps);
    }
}

#[inline]
fn adagrad_slice(p: &mut [f64], s: &mut [f64], g: &[f64], lr: f64, eps: f64) {
    for ((p, s), g) in p.iter_mut().zip(s.iter_mut()).zip(g) {
        *s += g * g;
        *p -= lr * g / (s.sqrt() + eps);
    }
}

pub fn sgd_step(params: &mut MlpParams, grads: &ParamGrads, lr: f64) {
    for (p, g) in params.layers.iter_mut().zip(grads.layers.iter()) {
        p.weight.zip_apply(&g.weight, |w, gw| *w -= lr * gw);
        p.bias.zip_apply(&g.bias, |b, gb| *b -= lr * gb);
    }
}

/// `‖h(XXᵀ) − M‖_F²`.
pub fn loss_x(x: &CoordinateMatrix, target: &DMatrix<f64>) -> f64 {
    loss_from_matrix(x.as_matrix(), target)
}

fn loss_from_matrix(x: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
    let d = squared_distances(x);
    d.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Analytic gradient `8 (Diag(R·1) − R) X` with `R = h(XXᵀ) − M`.
///
/// `target` must be symmetric.
pub fn grad_loss_wrt_x(x: &CoordinateMatrix, target: &DMatrix<f64>) -> DMatrix<f64> {
    grad_from_matrix(x.as_matrix(), target)
}

fn grad_from_matrix(x: &DMatrix<f64>, target: &DMatrix<f64>) -> DMatrix<f64> {
    let residual = squared_distances(x) - target;
    let row_sums = residual.column_sum();
    let mut grad = -(&residual * x);
    for c in 0..x.ncols() {
        for i in 0..x.nrows() {
            grad[(i, c)] += row_sums[i] * x[(i, c)];
        }
    }
    grad * 8.0
}

/// Result of one coordinate update.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub x: CoordinateMatrix,
    /// Loss before each optimiser step, followed by the loss of the returned
    /// coordinates (`T + 1` entries).
    pub loss_trace: Vec<f64>,
    pub params: MlpParams,
}

/// Trains a network for `T` iterations so that `reshape(f(vec(X_prev)))`
/// fits `target`, then returns that output.
///
/// `initial` supplies warm-start parameters; otherwise a fresh network is
/// drawn from `config.weight_init_seed`.
pub fn train_x_update(
    x_prev: &CoordinateMatrix,
    target: &DMatrix<f64>,
    config: &MlpConfig,
    initial: Option<MlpParams>,
) -> Result<TrainOutcome> {
    let (n, k) = (x_prev.n(), x_prev.k());
    if target.shape() != (n, n) {
        return Err(Error::dims(
            "train_x_update target",
            format!("{n}x{n}"),
            format!("{}x{}", target.nrows(), target.ncols()),
        ));
    }
    let mut params = match initial {
        Some(p) => {
            if p.input_dim() != n * k || p.output_dim() != n * k {
                return Err(Error::dims("warm-start parameters", n * k, p.input_dim()));
            }
            p
        }
        None => init_mlp(config, n, k)?,
    };
    let input = DVector::from_column_slice(x_prev.as_matrix().as_slice());
    let mut state = AdagradState::new(&params);
    let mut grads = params.zeros_like();
    let mut loss_trace = Vec::with_capacity(config.inner_iterations + 1);

    for iteration in 0..config.inner_iterations {
        let (out, cache) = forward(&params, &input);
        let x = DMatrix::from_column_slice(n, k, out.as_slice());
        let loss = loss_from_matrix(&x, target);
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration, loss });
        }
        loss_trace.push(loss);
        let grad_x = grad_from_matrix(&x, target);
        let grad_out = DVector::from_column_slice(grad_x.as_slice());
        backward_into(&params, &cache, &grad_out, &mut grads)?;
        match config.optimizer {
            OptimizerKind::Adagrad => adagrad_step(
                &mut params,
                &mut state,
                &grads,
                config.learning_rate,
                config.adagrad_epsilon,
            ),
            OptimizerKind::Sgd => sgd_step(&mut params, &grads, config.learning_rate),
        }
    }

    let (out, _) = forward(&params, &input);
    let x = DMatrix::from_column_slice(n, k, out.as_slice());
    let loss = loss_from_matrix(&x, target);
    if !loss.is_finite() || !params.is_finite() {
        return Err(Error::Diverged {
            iteration: config.inner_iterations,
            loss,
        });
    }
    loss_trace.push(loss);
    Ok(TrainOutcome {
        x: CoordinateMatrix::new(x)?,
        loss_trace,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = random_matrix(n, n, rng);
        (&a + a.transpose()) * 0.5
    }

    fn config(layers: usize, widths: Vec<usize>) -> MlpConfig {
        MlpConfig {
            num_fc_layers: layers,
            hidden_widths: Some(widths),
            ..MlpConfig::default()
        }
    }

    /// Independent straight-line forward pass used as an oracle.
    #[allow(clippy::needless_range_loop)]
    fn reference_forward(params: &MlpParams, input: &[f64]) -> Vec<f64> {
        let mut h = input.to_vec();
        let depth = params.layers.len();
        for (idx, layer) in params.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.weight.nrows()];
            for r in 0..layer.weight.nrows() {
                let mut acc = layer.bias[r];
                for c in 0..layer.weight.ncols() {
                    acc += layer.weight[(r, c)] * h[c];
                }
                next[r] = if idx + 1 < depth { acc.max(0.0) } else { acc };
            }
            h = next;
        }
        h
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = config(3, vec![8, 8]);
        let a = init_mlp(&cfg, 4, 3).unwrap();
        assert_eq!(a, init_mlp(&cfg, 4, 3).unwrap());
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|b| *b == 0.0)));
        assert_eq!(a.input_dim(), 12);
        assert_eq!(a.output_dim(), 12);
    }

    #[test]
    fn init_variance_matches_fan_in() {
        let cfg = config(3, vec![300, 300]);
        let params = init_mlp(&cfg, 100, 3).unwrap();
        for layer in &params.layers {
            let fan_in = layer.weight.ncols() as f64;
            let mean = layer.weight.mean();
            let var = layer.weight.iter().map(|w| (w - mean).powi(2)).sum::<f64>()
                / (layer.weight.len() - 1) as f64;
            let expected = 2.0 / fan_in;
            assert!((var / expected - 1.0).abs() < 0.2, "var {var} vs {expected}");
        }
    }

    #[test]
    fn default_widths_are_n_times_k() {
        let cfg = MlpConfig::default();
        assert_eq!(cfg.widths(20, 3).unwrap(), vec![60; 4]);
        assert!(config(3, vec![4]).widths(2, 2).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut params = init_mlp(&config(3, vec![5, 5]), 2, 2).unwrap();
        for l in &mut params.layers {
            l.weight.fill(0.0);
        }
        let (out, _) = forward(&params, &DVector::from_element(4, 0.7));
        assert_eq!(out, DVector::zeros(4));
    }

    #[test]
    fn identity_output_layer_passes_input_through() {
        let mut params = init_mlp(&config(1, vec![]), 2, 3).unwrap();
        params.layers[0].weight = DMatrix::identity(6, 6);
        let input = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]);
        assert_eq!(forward(&params, &input).0, input);
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut params = init_mlp(&config(4, vec![7, 9, 5]), 2, 3).unwrap();
        for l in &mut params.layers {
            l.bias = DVector::from_fn(l.bias.len(), |_, _| rng.random_range(-0.5..0.5));
        }
        let input = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let (out, _) = forward(&params, &input);
        let expected = reference_forward(&params, input.as_slice());
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let x = CoordinateMatrix::from_rows(2, 3, &[0., 0., 0., 1., 0., 0.]).unwrap();
        assert_eq!(loss_x(&x, &DMatrix::zeros(2, 2)), 2.0);
        let d = crate::edm::edm_from_coords(&x);
        assert_eq!(loss_x(&x, d.as_matrix()), 0.0);
    }

    #[test]
    fn loss_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xm = random_matrix(5, 3, &mut rng);
        let target = random_symmetric(5, &mut rng);
        let mut expected = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                let mut d = 0.0;
                for c in 0..3 {
                    d += (xm[(i, c)] - xm[(j, c)]).powi(2);
                }
                expected += (d - target[(i, j)]).powi(2);
            }
        }
        let got = loss_x(&CoordinateMatrix::new(xm).unwrap(), &target);
        assert!((got - expected).abs() < 1e-12 * expected.max(1.0));
    }

    #[test]
    fn gradient_vanishes_in_trivial_cases() {
        let single = CoordinateMatrix::from_rows(1, 3, &[0.3, 0.1, 0.2]).unwrap();
        assert_eq!(grad_loss_wrt_x(&single, &DMatrix::zeros(1, 1)), DMatrix::zeros(1, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = CoordinateMatrix::new(random_matrix(6, 3, &mut rng)).unwrap();
        let d = crate::edm::edm_from_coords(&x);
        assert!(grad_loss_wrt_x(&x, d.as_matrix()).amax() < 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xm = random_matrix(5, 3, &mut rng);
        let target = random_symmetric(5, &mut rng);
        let analytic = grad_loss_wrt_x(&CoordinateMatrix::new(xm.clone()).unwrap(), &target);
        let h = 1e-5;
        for idx in 0..xm.len() {
            let mut plus = xm.clone();
            plus[idx] += h;
            let mut minus = xm.clone();
            minus[idx] -= h;
            let fd = (loss_from_matrix(&plus, &target) - loss_from_matrix(&minus, &target)) / (2.0 * h);
            let denom = fd.abs().max(analytic[idx].abs()).max(1e-8);
            assert!((fd - analytic[idx]).abs() / denom < 1e-5, "entry {idx}: {fd} vs {}", analytic[idx]);
        }
    }

    #[test]
    fn backward_with_zero_upstream_is_zero() {
        let params = init_mlp(&config(3, vec![6, 6]), 2, 2).unwrap();
        let (_, cache) = forward(&params, &DVector::from_element(4, 0.5));
        let grads = backward(&params, &cache, &DVector::zeros(4)).unwrap();
        assert!(grads.layers.iter().all(|l| l.weight.amax() == 0.0 && l.bias.amax() == 0.0));
    }

    #[test]
    fn backward_single_layer_closed_form() {
        let params = init_mlp(&config(1, vec![]), 2, 2).unwrap();
        let input = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let grad_out = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let (_, cache) = forward(&params, &input);
        let grads = backward(&params, &cache, &grad_out).unwrap();
        assert_eq!(grads.layers[0].weight, &grad_out * input.transpose());
        assert_eq!(grads.layers[0].bias, grad_out);
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let small = init_mlp(&config(2, vec![3]), 2, 2).unwrap();
        let big = init_mlp(&config(3, vec![3, 3]), 2, 2).unwrap();
        let (_, cache) = forward(&small, &DVector::zeros(4));
        assert!(backward(&big, &cache, &DVector::zeros(4)).is_err());
    }

    #[test]
    fn adagrad_zero_gradient_is_noop() {
        let mut params = init_mlp(&config(2, vec![3]), 2, 2).unwrap();
        let before = params.clone();
        let mut state = AdagradState::new(&params);
        let zeros = params.zeros_like();
        adagrad_step(&mut params, &mut state, &zeros, 0.1, 1e-8);
        assert_eq!(params, before);
        assert_eq!(state, AdagradState::new(&before));
    }

    #[test]
    fn adagrad_scalar_arithmetic() {
        let (mut p, mut s) = ([0.0], [0.0]);
        adagrad_slice(&mut p, &mut s, &[1.0], 1.0, 0.0);
        assert_eq!(p[0], -1.0);
        adagrad_slice(&mut p, &mut s, &[1.0], 1.0, 0.0);
        assert!((p[0] - (-1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn adagrad_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut params = init_mlp(&config(2, vec![4]), 2, 2).unwrap();
        let mut state = AdagradState::new(&params);
        for _ in 0..3 {
            let mut grads = params.zeros_like();
            for l in &mut grads.layers {
                l.weight.apply(|v| *v = rng.random_range(-1.0..1.0));
                l.bias.apply(|v| *v = rng.random_range(-1.0..1.0));
            }
            let mut expected_p = Vec::new();
            let mut expected_s = Vec::new();
            for ((p, s), g) in params.layers.iter().zip(&state.accum.layers).zip(&grads.layers) {
                let flat = |d: &Dense| d.weight.iter().chain(d.bias.iter()).copied().collect::<Vec<_>>();
                for ((pv, sv), gv) in flat(p).into_iter().zip(flat(s)).zip(flat(g)) {
                    let s_new = sv + gv * gv;
                    expected_s.push(s_new);
                    expected_p.push(pv - 0.05 * gv / (s_new.sqrt() + 1e-8));
                }
            }
            let before_state = state.clone();
            adagrad_step(&mut params, &mut state, &grads, 0.05, 1e-8);
            let flat_all = |m: &MlpParams| {
                m.layers
                    .iter()
                    .flat_map(|d| d.weight.iter().chain(d.bias.iter()).copied().collect::<Vec<_>>())
                    .collect::<Vec<_>>()
            };
            for (a, b) in flat_all(&params).iter().zip(&expected_p) {
                assert!((a - b).abs() < 1e-12);
            }
            for ((a, b), old) in flat_all(&state.accum)
                .iter()
                .zip(&expected_s)
                .zip(flat_all(&before_state.accum))
            {
                assert!((a - b).abs() < 1e-12);
                assert!(*a >= old);
            }
        }
    }

    #[test]
    fn zero_iterations_return_untrained_output() {
        let cfg = MlpConfig {
            inner_iterations: 0,
            hidden_widths: Some(vec![6, 6]),
            num_fc_layers: 3,
            ..MlpConfig::default()
        };
        let x_prev = CoordinateMatrix::from_rows(2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let out = train_x_update(&x_prev, &DMatrix::zeros(2, 2), &cfg, None).unwrap();
        let params = init_mlp(&cfg, 2, 3).unwrap();
        let (expected, _) = forward(&params, &DVector::from_column_slice(x_prev.as_matrix().as_slice()));
        assert_eq!(out.x.as_matrix().as_slice(), expected.as_slice());
        assert_eq!(out.loss_trace.len(), 1);
    }

    #[test]
    fn training_on_feasible_target_does_not_increase_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x_prev = CoordinateMatrix::new(DMatrix::from_fn(6, 3, |_, _| rng.random::<f64>())).unwrap();
        let target = crate::edm::edm_from_coords(&x_prev).into_inner();
        let cfg = MlpConfig {
            inner_iterations: 300,
            ..MlpConfig::default()
        };
        let out = train_x_update(&x_prev, &target, &cfg, None).unwrap();
        assert!(out.loss_trace.last().unwrap() <= &out.loss_trace[0]);
        assert!(out.loss_trace.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn training_is_deterministic() {
        let x_prev = crate::scene::generate_coords(8, 3, 1);
        let target = crate::edm::edm_from_coords(&crate::scene::generate_coords(8, 3, 2)).into_inner();
        let cfg = MlpConfig {
            inner_iterations: 50,
            ..MlpConfig::default()
        };
        let a = train_x_update(&x_prev, &target, &cfg, None).unwrap();
        let b = train_x_update(&x_prev, &target, &cfg, None).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn divergence_is_reported_with_iteration() {
        let x_prev = crate::scene::generate_coords(6, 3, 1);
        let target = crate::edm::edm_from_coords(&crate::scene::generate_coords(6, 3, 2)).into_inner();
        let cfg = MlpConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e6,
            inner_iterations: 200,
            ..MlpConfig::default()
        };
        let err = train_x_update(&x_prev, &target, &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }
}
