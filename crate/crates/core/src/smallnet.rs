//! Minimal differentiable models with hand-written reverse-mode gradients.
//!
//! Two fixed architectures cover every experiment: a ReLU multilayer
//! perceptron whose head is softmax for `classes >= 2` and identity for
//! `classes == 1`, and a residual scalar map `f(x) = x + g(x)` with tanh
//! hidden units, initialized to the exact identity (tanh rather than ReLU:
//! the zero-output initialization leaves ReLU hidden layers without gradient
//! or movable kinks, a saddle the optimizer never escapes). Backward passes
//! are pure vector-Jacobian products: the
//! caller seeds them with the loss gradient at the outputs, including any
//! batch-size normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::densities::{kde_on_grid, kernel_weights_into, effective_bandwidth, Grid, GridDensity};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Floor applied to probabilities inside training losses before taking logs.
/// Certificates and reported information values never clamp.
pub const LOG_FLOOR: f64 = 1e-12;

/// Architecture tag. `Mlp` ends in softmax over `classes` outputs when
/// `classes >= 2` and in a bare linear (identity) output when `classes == 1`;
/// `ResidualScalar` computes `x + g(x)` for a scalar tanh net `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum Arch {
    Mlp { classes: usize },
    ResidualScalar,
}

/// One dense layer: `weights` is `in_dim x out_dim` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros_like(other: &Layer) -> Layer {
        Layer {
            weights: Matrix::zeros(other.weights.rows(), other.weights.cols()),
            biases: vec![0.0; other.biases.len()],
        }
    }
}

/// Model parameters plus the seed they were initialized from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    #[serde(flatten)]
    pub arch: Arch,
    pub layers: Vec<Layer>,
    pub seed: u64,
}

/// Parameter-shaped gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl ModelParams {
    /// ReLU MLP through the given widths; `dims` runs input to output, so the
    /// class count is the final width. Weights are He-initialized, biases 0.
    pub fn init_mlp(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!(
                "mlp needs at least input and output widths, all positive, got {dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| random_layer(w[0], w[1], (2.0 / w[0] as f64).sqrt(), &mut rng))
            .collect();
        Ok(ModelParams { arch: Arch::Mlp { classes: *dims.last().unwrap() }, layers, seed })
    }

    /// Residual scalar net `f(x) = x + g(x)`: the hidden layer draws from
    /// N(0, 0.01^2) and the output layer starts at exactly zero, so the map
    /// is exactly the identity at initialization.
    pub fn init_residual_scalar(width: usize, seed: u64) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidInput("residual net needs a positive width".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = random_layer(1, width, 0.01, &mut rng);
        let output = Layer { weights: Matrix::zeros(width, 1), biases: vec![0.0] };
        Ok(ModelParams { arch: Arch::ResidualScalar, layers: vec![hidden, output], seed })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weights.cols()
    }

    /// Zero gradients (or moments) shaped like these parameters.
    pub fn zeros_like(&self) -> Gradients {
        Gradients { layers: self.layers.iter().map(Layer::zeros_like).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.is_finite() && l.biases.iter().all(|b| b.is_finite()))
    }

    pub fn validate(&self) -> Result<()> {
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].weights.cols() != pair[1].weights.rows() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} outputs {} features but layer {} expects {}",
                    pair[0].weights.cols(),
                    i + 1,
                    pair[1].weights.rows()
                )));
            }
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.biases.len() != layer.weights.cols() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} has {} biases for {} outputs",
                    layer.biases.len(),
                    layer.weights.cols()
                )));
            }
        }
        match self.arch {
            Arch::Mlp { classes } => {
                if self.output_dim() != classes {
                    return Err(Error::ShapeMismatch(format!(
                        "mlp declares {classes} classes but the last layer outputs {}",
                        self.output_dim()
                    )));
                }
            }
            Arch::ResidualScalar => {
                if self.input_dim() != 1 || self.output_dim() != 1 {
                    return Err(Error::ShapeMismatch(
                        "residual scalar net must map 1 -> 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn random_layer(rows: usize, cols: usize, sd: f64, rng: &mut ChaCha8Rng) -> Layer {
    let normal = Normal::new(0.0, sd).expect("valid normal");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Layer {
        weights: Matrix::from_vec(rows, cols, data).expect("sized to fit"),
        biases: vec![0.0; cols],
    }
}

/// Per-layer pre-activations and activations for one batch; consumed by
/// [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Matrix,
    pre_activations: Vec<Matrix>,
    activations: Vec<Matrix>,
}

/// Runs the model on a batch (rows are examples). For softmax heads each
/// output row is a probability vector; for `ResidualScalar` the output is
/// `x + g(x)`.
pub fn forward(params: &ModelParams, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
    params.validate()?;
    if inputs.cols() != params.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "inputs have {} features but the model expects {}",
            inputs.cols(),
            params.input_dim()
        )));
    }
    if !inputs.is_finite() {
        return Err(Error::InvalidInput("model inputs must be finite".into()));
    }
    let depth = params.layers.len();
    let mut pre_activations = Vec::with_capacity(depth);
    let mut activations = Vec::with_capacity(depth);
    let mut current = inputs.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = current.matmul(&layer.weights)?;
        for r in 0..z.rows() {
            for (c, &b) in layer.biases.iter().enumerate() {
                z.add_at(r, c, b);
            }
        }
        pre_activations.push(z.clone());
        let last = i + 1 == depth;
        current = if last {
            match params.arch {
                Arch::Mlp { classes } if classes >= 2 => softmax_rows(&z),
                Arch::Mlp { .. } => z,
                Arch::ResidualScalar => {
                    let mut out = z;
                    for r in 0..out.rows() {
                        out.add_at(r, 0, inputs.get(r, 0));
                    }
                    out
                }
            }
        } else {
            // Hidden activation: ReLU for classifier heads, tanh for the
            // residual scalar map. The residual net initializes its output
            // layer to exact zero, and ReLU units there start with every
            // kink at the origin and no gradient signal to move them, a
            // saddle gradient descent does not leave; tanh has no such trap
            // and keeps the map smooth.
            let mut a = z;
            match params.arch {
                Arch::Mlp { .. } => {
                    a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                }
                Arch::ResidualScalar => {
                    a.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
                }
            }
            a
        };
        activations.push(current.clone());
    }
    Ok((current.clone(), ForwardCache { inputs: inputs.clone(), pre_activations, activations }))
}

fn softmax_rows(z: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for r in 0..z.rows() {
        let row = z.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (c, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out.set(r, c, e);
            denom += e;
        }
        for c in 0..z.cols() {
            out.set(r, c, out.get(r, c) / denom);
        }
    }
    out
}

/// Exact reverse-mode gradients. `output_gradient` is the derivative of the
/// scalar loss with respect to the forward outputs (after softmax for
/// softmax heads), so this is a pure vector-Jacobian product: any batch
/// normalization belongs in the seed.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    output_gradient: &Matrix,
) -> Result<Gradients> {
    let depth = params.layers.len();
    let outputs = &cache.activations[depth - 1];
    if output_gradient.rows() != outputs.rows() || output_gradient.cols() != outputs.cols() {
        return Err(Error::ShapeMismatch(format!(
            "output gradient is {}x{} but outputs are {}x{}",
            output_gradient.rows(),
            output_gradient.cols(),
            outputs.rows(),
            outputs.cols()
        )));
    }
    // Delta at the last pre-activation.
    let mut delta = match params.arch {
        Arch::Mlp { classes } if classes >= 2 => {
            // Softmax VJP: dL/dz_i = p_i * (g_i - sum_j p_j g_j).
            let p = outputs;
            let mut d = Matrix::zeros(p.rows(), p.cols());
            for r in 0..p.rows() {
                let dot: f64 =
                    p.row(r).iter().zip(output_gradient.row(r)).map(|(&pi, &gi)| pi * gi).sum();
                for c in 0..p.cols() {
                    d.set(r, c, p.get(r, c) * (output_gradient.get(r, c) - dot));
                }
            }
            d
        }
        // Identity head and the residual output: dL/dz = dL/dout. The skip
        // connection only feeds the input gradient, which no caller needs.
        _ => output_gradient.clone(),
    };
    let mut grads = params.zeros_like();
    for i in (0..depth).rev() {
        let upstream_activation =
            if i == 0 { &cache.inputs } else { &cache.activations[i - 1] };
        grads.layers[i].weights = upstream_activation.transposed().matmul(&delta)?;
        for c in 0..delta.cols() {
            grads.layers[i].biases[c] = (0..delta.rows()).map(|r| delta.get(r, c)).sum();
        }
        if i > 0 {
            let mut next = delta.matmul(&params.layers[i].weights.transposed())?;
            match params.arch {
                Arch::Mlp { .. } => {
                    let z = &cache.pre_activations[i - 1];
                    for r in 0..next.rows() {
                        for c in 0..next.cols() {
                            if z.get(r, c) <= 0.0 {
                                next.set(r, c, 0.0);
                            }
                        }
                    }
                }
                Arch::ResidualScalar => {
                    // tanh'(z) = 1 - a^2 with a the cached activation.
                    let a = &cache.activations[i - 1];
                    for r in 0..next.rows() {
                        for c in 0..next.cols() {
                            let ai = a.get(r, c);
                            next.set(r, c, next.get(r, c) * (1.0 - ai * ai));
                        }
                    }
                }
            }
            delta = next;
        }
    }
    Ok(grads)
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    first_moment: Vec<Layer>,
    second_moment: Vec<Layer>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    /// Fresh state with the experiment defaults: lr 1e-3, betas (0.9, 0.999),
    /// eps 1e-8, weight decay 1e-4.
    pub fn new(params: &ModelParams) -> Self {
        Self::with_hyperparams(params, 1e-3, 1e-4)
    }

    pub fn with_hyperparams(params: &ModelParams, lr: f64, weight_decay: f64) -> Self {
        OptimizerState {
            first_moment: params.layers.iter().map(Layer::zeros_like).collect(),
            second_moment: params.layers.iter().map(Layer::zeros_like).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            weight_decay,
        }
    }
}

/// One bias-corrected AdamW update, in place. Errors on a non-finite
/// gradient, naming the offending layer.
pub fn adam_step(
    state: &mut OptimizerState,
    params: &mut ModelParams,
    grads: &Gradients,
) -> Result<()> {
    if grads.layers.len() != params.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} layers but the model has {}",
            grads.layers.len(),
            params.layers.len()
        )));
    }
    for (i, g) in grads.layers.iter().enumerate() {
        if !g.weights.is_finite() || g.biases.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFiniteGradient { layer: i });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.layers.len() {
        let layer = &mut params.layers[i];
        let g = &grads.layers[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let n = layer.weights.as_slice().len();
        for j in 0..n {
            let grad = g.weights.as_slice()[j];
            let mj = &mut m.weights.as_mut_slice()[j];
            let vj = &mut v.weights.as_mut_slice()[j];
            *mj = state.beta1 * *mj + (1.0 - state.beta1) * grad;
            *vj = state.beta2 * *vj + (1.0 - state.beta2) * grad * grad;
            let p = &mut layer.weights.as_mut_slice()[j];
            *p -= state.lr * ((*mj / bc1) / ((*vj / bc2).sqrt() + state.eps_adam)
                + state.weight_decay * *p);
        }
        for j in 0..layer.biases.len() {
            let grad = g.biases[j];
            let mj = &mut m.biases[j];
            let vj = &mut v.biases[j];
            *mj = state.beta1 * *mj + (1.0 - state.beta1) * grad;
            *vj = state.beta2 * *vj + (1.0 - state.beta2) * grad * grad;
            // Decoupled decay applies to weights only; biases are not decayed.
            layer.biases[j] -=
                state.lr * (*mj / bc1) / ((*vj / bc2).sqrt() + state.eps_adam);
        }
    }
    Ok(())
}

/// Grid losses differentiated through the KDE.
#[derive(Debug, Clone)]
pub enum KdeLoss {
    /// `-sum target_k * ln(max(p_k, LOG_FLOOR)) * dx` with `p` the KDE of the
    /// samples.
    CrossEntropy { target: GridDensity },
    /// `KL(reference || p)` with the gradient flowing through `p`.
    KlFrom { reference: GridDensity },
    /// Mutual information of the mixture `prior * p + (1 - prior) * partner`,
    /// with `p` in the prior-weighted slot and `partner` held fixed.
    MiMixture { partner: GridDensity, prior: f64 },
}

/// Clamped loss value for the given samples.
pub fn kde_loss_value(
    samples: &[f64],
    grid: &Grid,
    bandwidth: f64,
    loss: &KdeLoss,
) -> Result<f64> {
    let p = kde_on_grid(samples, grid, bandwidth)?;
    let dx = grid.dx();
    match loss {
        KdeLoss::CrossEntropy { target } => {
            crate::densities::check_same_support(&p, target)?;
            Ok(-dx
                * target
                    .values()
                    .iter()
                    .zip(p.values())
                    .map(|(&t, &pk)| t * pk.max(LOG_FLOOR).ln())
                    .sum::<f64>())
        }
        KdeLoss::KlFrom { reference } => {
            crate::densities::check_same_support(&p, reference)?;
            Ok(dx
                * reference
                    .values()
                    .iter()
                    .zip(p.values())
                    .map(|(&r, &pk)| {
                        if r > 0.0 {
                            r * (r.max(LOG_FLOOR).ln() - pk.max(LOG_FLOOR).ln())
                        } else {
                            0.0
                        }
                    })
                    .sum::<f64>())
        }
        KdeLoss::MiMixture { partner, prior } => {
            crate::densities::check_same_support(&p, partner)?;
            if !(0.0..=1.0).contains(prior) {
                return Err(Error::InvalidInput(format!("prior must lie in [0, 1], got {prior}")));
            }
            let mut total = 0.0;
            for (&pk, &qk) in p.values().iter().zip(partner.values()) {
                let mk = prior * pk + (1.0 - prior) * qk;
                let ln_m = mk.max(LOG_FLOOR).ln();
                if pk > 0.0 {
                    total += prior * pk * (pk.max(LOG_FLOOR).ln() - ln_m);
                }
                if qk > 0.0 {
                    total += (1.0 - prior) * qk * (qk.max(LOG_FLOOR).ln() - ln_m);
                }
            }
            Ok(total * dx)
        }
    }
}

/// Analytic gradient of the clamped grid loss with respect to each sample.
pub fn kde_loss_gradient(
    samples: &[f64],
    grid: &Grid,
    bandwidth: f64,
    loss: &KdeLoss,
) -> Result<Vec<f64>> {
    let p = kde_on_grid(samples, grid, bandwidth)?;
    let dx = grid.dx();
    // dL/dp_k of the clamped loss; the indicator terms are the exact
    // derivatives of the max(., LOG_FLOOR) clamps, so finite differences of
    // the clamped value agree wherever the floor binds.
    let upstream: Vec<f64> = match loss {
        KdeLoss::CrossEntropy { target } => {
            crate::densities::check_same_support(&p, target)?;
            target
                .values()
                .iter()
                .zip(p.values())
                .map(|(&t, &pk)| {
                    if pk > LOG_FLOOR {
                        -t / pk * dx
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        KdeLoss::KlFrom { reference } => {
            crate::densities::check_same_support(&p, reference)?;
            reference
                .values()
                .iter()
                .zip(p.values())
                .map(|(&r, &pk)| {
                    if r > 0.0 && pk > LOG_FLOOR {
                        -r / pk * dx
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        KdeLoss::MiMixture { partner, prior } => {
            crate::densities::check_same_support(&p, partner)?;
            if !(0.0..=1.0).contains(prior) {
                return Err(Error::InvalidInput(format!("prior must lie in [0, 1], got {prior}")));
            }
            p.values()
                .iter()
                .zip(partner.values())
                .map(|(&pk, &qk)| {
                    let mk = prior * pk + (1.0 - prior) * qk;
                    let ind_p = if pk > LOG_FLOOR { 1.0 } else { 0.0 };
                    let ind_m = if mk > LOG_FLOOR { 1.0 } else { 0.0 };
                    prior
                        * dx
                        * ((pk.max(LOG_FLOOR).ln() - mk.max(LOG_FLOOR).ln()) + ind_p - ind_m)
                })
                .collect()
        }
    };
    kde_value_adjoint(samples, grid, bandwidth, &upstream)
}

/// Pulls a gradient on the KDE grid values back to the samples:
/// given `upstream_k = dL/dp_k`, returns `dL/ds_l`.
pub fn kde_value_adjoint(
    samples: &[f64],
    grid: &Grid,
    bandwidth: f64,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    if upstream.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!(
            "upstream has {} entries for a {}-point grid",
            upstream.len(),
            grid.len()
        )));
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput("kde needs at least one sample".into()));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("kde samples must be finite".into()));
    }
    if !bandwidth.is_finite() || bandwidth <= 0.0 {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let h = effective_bandwidth(grid, bandwidth);
    let m = samples.len() as f64;
    let dx = grid.dx();
    let scale = 1.0 / (m * dx * h * h);
    let mut weights = vec![0.0; grid.len()];
    let mut out = Vec::with_capacity(samples.len());
    for &s in samples {
        kernel_weights_into(s, grid, h, &mut weights);
        // d w_k / d s = w_k * ((x_k - s) - sum_j w_j (x_j - s)) / h^2.
        let mut weighted_upstream = 0.0;
        let mut weighted_upstream_dist = 0.0;
        let mut mean_dist = 0.0;
        for (k, &w) in weights.iter().enumerate() {
            let d = grid.point(k) - s;
            weighted_upstream += upstream[k] * w;
            weighted_upstream_dist += upstream[k] * w * d;
            mean_dist += w * d;
        }
        out.push(scale * (weighted_upstream_dist - weighted_upstream * mean_dist));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
    }

    /// Central finite differences of `f` at `x`, step scaled per coordinate.
    fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let mut grad = Vec::with_capacity(x.len());
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            let h = 1e-5 * x[i].abs().max(1.0);
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            grad.push((plus - minus) / (2.0 * h));
        }
        grad
    }

    fn params_to_vec(p: &ModelParams) -> Vec<f64> {
        let mut v = Vec::new();
        for l in &p.layers {
            v.extend_from_slice(l.weights.as_slice());
            v.extend_from_slice(&l.biases);
        }
        v
    }

    fn vec_to_params(template: &ModelParams, v: &[f64]) -> ModelParams {
        let mut p = template.clone();
        let mut it = v.iter();
        for l in &mut p.layers {
            for w in l.weights.as_mut_slice() {
                *w = *it.next().unwrap();
            }
            for b in &mut l.biases {
                *b = *it.next().unwrap();
            }
        }
        p
    }

    fn grads_to_vec(g: &Gradients) -> Vec<f64> {
        let mut v = Vec::new();
        for l in &g.layers {
            v.extend_from_slice(l.weights.as_slice());
            v.extend_from_slice(&l.biases);
        }
        v
    }

    #[test]
    fn residual_identity_at_init_is_exact() {
        let p = ModelParams::init_residual_scalar(32, 7).unwrap();
        let x = Matrix::from_rows(&[vec![-3.0], vec![0.7], vec![100.0], vec![0.0]]).unwrap();
        let (out, _) = forward(&p, &x).unwrap();
        assert_eq!(out.as_slice(), x.as_slice());
    }

    #[test]
    fn zero_final_layer_gives_uniform_softmax() {
        let mut p = ModelParams::init_mlp(&[2, 3], 1).unwrap();
        p.layers[0].weights = Matrix::zeros(2, 3);
        p.layers[0].biases = vec![0.0; 3];
        let x = Matrix::from_rows(&[vec![0.4, -1.2], vec![5.0, 2.0]]).unwrap();
        let (out, _) = forward(&p, &x).unwrap();
        for r in 0..out.rows() {
            for c in 0..3 {
                assert_relative_eq!(out.get(r, c), 1.0 / 3.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        // 2 -> 2 -> 2 MLP recomputed by hand.
        let mut p = ModelParams::init_mlp(&[2, 2, 2], 0).unwrap();
        p.layers[0].weights = Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 1.5]).unwrap();
        p.layers[0].biases = vec![0.1, -0.3];
        p.layers[1].weights = Matrix::from_vec(2, 2, vec![2.0, 1.0, -1.0, 0.5]).unwrap();
        p.layers[1].biases = vec![0.0, 0.2];
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        // z1 = [1*1 + 2*0.5 + 0.1, 1*(-2) + 2*1.5 - 0.3] = [2.1, 0.7]
        // a1 = relu(z1) = [2.1, 0.7]
        // z2 = [2.1*2 + 0.7*(-1), 2.1*1 + 0.7*0.5 + 0.2] = [3.5, 2.65]
        let (out, _) = forward(&p, &x).unwrap();
        let (e0, e1) = (3.5f64.exp(), 2.65f64.exp());
        assert_relative_eq!(out.get(0, 0), e0 / (e0 + e1), epsilon = 1e-12);
        assert_relative_eq!(out.get(0, 1), e1 / (e0 + e1), epsilon = 1e-12);
    }

    #[test]
    fn softmax_rows_are_probabilities() {
        let p = ModelParams::init_mlp(&[3, 4, 3], 11).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, -0.7, 2.0], vec![-4.0, 0.0, 1.0]]).unwrap();
        let (out, _) = forward(&p, &x).unwrap();
        for r in 0..out.rows() {
            let row_sum: f64 = out.row(r).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-9);
            assert!(out.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_grads() {
        let p = ModelParams::init_mlp(&[2, 3, 2], 3).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let (out, cache) = forward(&p, &x).unwrap();
        let g = backward(&p, &cache, &Matrix::zeros(out.rows(), out.cols())).unwrap();
        assert!(grads_to_vec(&g).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_model_squared_loss_matches_closed_form() {
        // classes == 1 gives an identity head, so a single layer is X W + b.
        let mut p = ModelParams::init_mlp(&[3, 1], 5).unwrap();
        p.layers[0].biases = vec![0.25];
        let x = Matrix::from_rows(&[
            vec![1.0, 0.5, -0.5],
            vec![0.0, 2.0, 1.0],
            vec![-1.0, 1.0, 0.0],
            vec![0.3, -0.2, 0.9],
        ])
        .unwrap();
        let y = [0.5, -1.0, 0.25, 2.0];
        let n = x.rows() as f64;
        let (out, cache) = forward(&p, &x).unwrap();
        // L = (1/2n) sum (out - y)^2, so dL/dout_i = (out_i - y_i) / n.
        let residuals: Vec<f64> = (0..x.rows()).map(|i| out.get(i, 0) - y[i]).collect();
        let seed = Matrix::from_vec(4, 1, residuals.iter().map(|r| r / n).collect()).unwrap();
        let g = backward(&p, &cache, &seed).unwrap();
        let expected = x.transposed().matmul(&seed).unwrap();
        for j in 0..3 {
            assert_relative_eq!(g.layers[0].weights.get(j, 0), expected.get(j, 0), epsilon = 1e-12);
        }
        assert_relative_eq!(
            g.layers[0].biases[0],
            residuals.iter().sum::<f64>() / n,
            epsilon = 1e-12
        );
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        // 2 -> 2 -> 2 MLP with cross-entropy against fixed labels.
        let template = ModelParams::init_mlp(&[2, 2, 2], 9).unwrap();
        let x = Matrix::from_rows(&[vec![0.8, -0.3], vec![-1.1, 0.4], vec![0.2, 0.9]]).unwrap();
        let labels = [0usize, 1, 0];
        let loss = |p: &ModelParams| -> f64 {
            let (out, _) = forward(p, &x).unwrap();
            -(0..x.rows())
                .map(|i| out.get(i, labels[i]).max(LOG_FLOOR).ln())
                .sum::<f64>()
                / x.rows() as f64
        };
        let (out, cache) = forward(&template, &x).unwrap();
        let mut seed = Matrix::zeros(out.rows(), out.cols());
        for (i, &label) in labels.iter().enumerate() {
            seed.set(i, label, -1.0 / (out.get(i, label) * x.rows() as f64));
        }
        let analytic = grads_to_vec(&backward(&template, &cache, &seed).unwrap());
        let x0 = params_to_vec(&template);
        let mut f = |v: &[f64]| loss(&vec_to_params(&template, v));
        let numeric = finite_diff(&mut f, &x0);
        for (a, b) in analytic.iter().zip(&numeric) {
            assert!(relative_error(*a, *b) < 1e-5, "analytic {a} vs numeric {b}");
        }
    }

    #[test]
    fn residual_backward_matches_finite_differences() {
        let mut template = ModelParams::init_residual_scalar(3, 21).unwrap();
        // Leave the identity initialization so the hidden path carries
        // gradient; otherwise the zero output layer makes the check vacuous.
        for (i, v) in template.layers[1].weights.as_mut_slice().iter_mut().enumerate() {
            *v = 0.3 + 0.2 * i as f64;
        }
        template.layers[0].biases = vec![-0.4, 0.1, 0.7];
        let x = Matrix::from_rows(&[vec![0.5], vec![-1.2], vec![2.0]]).unwrap();
        let y = [1.0, -1.0, 1.5];
        let loss = |p: &ModelParams| -> f64 {
            let (out, _) = forward(p, &x).unwrap();
            (0..x.rows()).map(|i| (out.get(i, 0) - y[i]).powi(2)).sum::<f64>()
                / (2.0 * x.rows() as f64)
        };
        let (out, cache) = forward(&template, &x).unwrap();
        let seed = Matrix::from_vec(
            3,
            1,
            (0..3).map(|i| (out.get(i, 0) - y[i]) / 3.0).collect(),
        )
        .unwrap();
        let analytic = grads_to_vec(&backward(&template, &cache, &seed).unwrap());
        let x0 = params_to_vec(&template);
        let mut f = |v: &[f64]| loss(&vec_to_params(&template, v));
        let numeric = finite_diff(&mut f, &x0);
        for (a, b) in analytic.iter().zip(&numeric) {
            assert!(relative_error(*a, *b) < 1e-5, "analytic {a} vs numeric {b}");
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = ModelParams::init_mlp(&[2, 2], 1).unwrap();
        let before = p.clone();
        let mut state = OptimizerState::with_hyperparams(&p, 1e-3, 0.0);
        let zeros = p.zeros_like();
        adam_step(&mut state, &mut p, &zeros).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_constant_gradient_approaches_lr_steps() {
        let mut p = ModelParams::init_mlp(&[1, 1], 2).unwrap();
        let mut state = OptimizerState::with_hyperparams(&p, 1e-3, 0.0);
        let mut g = p.zeros_like();
        g.layers[0].weights.set(0, 0, 0.37);
        let mut prev = p.layers[0].weights.get(0, 0);
        for _ in 0..600 {
            adam_step(&mut state, &mut p, &g).unwrap();
            prev = p.layers[0].weights.get(0, 0);
        }
        adam_step(&mut state, &mut p, &g).unwrap();
        let step = prev - p.layers[0].weights.get(0, 0);
        // With a constant gradient the bias-corrected update tends to
        // lr * sign(g).
        assert_relative_eq!(step, state.lr, max_relative = 1e-3);
    }

    #[test]
    fn adam_quadratic_converges_fast() {
        let mut p = ModelParams::init_mlp(&[1, 1], 3).unwrap();
        p.layers[0].weights.set(0, 0, 0.0);
        p.layers[0].biases[0] = 0.0;
        let mut state = OptimizerState::with_hyperparams(&p, 0.1, 0.0);
        let target = 3.0;
        let loss = |w: f64| (w - target) * (w - target);
        let initial = loss(p.layers[0].weights.get(0, 0));
        for _ in 0..200 {
            let w = p.layers[0].weights.get(0, 0);
            let mut g = p.zeros_like();
            g.layers[0].weights.set(0, 0, 2.0 * (w - target));
            adam_step(&mut state, &mut p, &g).unwrap();
        }
        let final_loss = loss(p.layers[0].weights.get(0, 0));
        assert!(
            final_loss * 100.0 <= initial,
            "loss only went {initial} -> {final_loss} in 200 steps"
        );
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = ModelParams::init_mlp(&[2, 3, 2], 4).unwrap();
        let mut state = OptimizerState::new(&p);
        let mut g = p.zeros_like();
        g.layers[1].weights.set(0, 0, f64::NAN);
        match adam_step(&mut state, &mut p, &g) {
            Err(Error::NonFiniteGradient { layer }) => assert_eq!(layer, 1),
            other => panic!("expected non-finite gradient error, got {other:?}"),
        }
    }

    #[test]
    fn model_json_round_trip_keeps_seed() {
        let p = ModelParams::init_mlp(&[2, 4, 3], 77).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["arch"], "mlp");
        assert_eq!(v["classes"], 3);
        assert_eq!(v["seed"], 77);
        let back: ModelParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn kde_self_cross_entropy_is_grid_entropy() {
        let grid = Grid::new(-2.0, 2.0, 31).unwrap();
        let samples = [0.3, -0.8, 1.1, 0.0, -1.5];
        let h = 0.4;
        let p = kde_on_grid(&samples, &grid, h).unwrap();
        let ce = kde_loss_value(&samples, &grid, h, &KdeLoss::CrossEntropy { target: p.clone() })
            .unwrap();
        let entropy: f64 =
            -grid.dx() * p.values().iter().map(|&v| v * v.max(LOG_FLOOR).ln()).sum::<f64>();
        assert_relative_eq!(ce, entropy, epsilon = 1e-12);
        // In adjoint space the identity splits into the two partials: the
        // gradient seeded with the entropy upstream equals the sum of the
        // gradients seeded with each slot's partial upstream.
        let dx = grid.dx();
        let upstream_entropy: Vec<f64> = p
            .values()
            .iter()
            .map(|&v| {
                let ind = if v > LOG_FLOOR { 1.0 } else { 0.0 };
                -(v.max(LOG_FLOOR).ln() + ind) * dx
            })
            .collect();
        let upstream_estimate: Vec<f64> = p
            .values()
            .iter()
            .map(|&v| if v > LOG_FLOOR { -dx } else { 0.0 })
            .collect();
        let upstream_target: Vec<f64> =
            p.values().iter().map(|&v| -v.max(LOG_FLOOR).ln() * dx).collect();
        let g_entropy = kde_value_adjoint(&samples, &grid, h, &upstream_entropy).unwrap();
        let g_estimate = kde_value_adjoint(&samples, &grid, h, &upstream_estimate).unwrap();
        let g_target = kde_value_adjoint(&samples, &grid, h, &upstream_target).unwrap();
        for i in 0..samples.len() {
            assert_relative_eq!(g_entropy[i], g_estimate[i] + g_target[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn symmetric_target_gradient_vanishes_at_center() {
        let grid = Grid::new(-1.0, 1.0, 41).unwrap();
        let target = kde_on_grid(&[0.0], &grid, 0.3).unwrap();
        let g = kde_loss_gradient(&[0.0], &grid, 0.25, &KdeLoss::CrossEntropy { target })
            .unwrap();
        assert!(g[0].abs() < 1e-12, "gradient {} should vanish by symmetry", g[0]);
    }

    #[test]
    fn kde_loss_gradients_match_finite_differences() {
        let grid = Grid::new(-2.0, 2.0, 25).unwrap();
        let samples = [0.3, -0.8, 1.1, 0.05, -1.4];
        let h = 0.35;
        let target = kde_on_grid(&[0.5, -0.2], &grid, 0.5).unwrap();
        let losses = [
            KdeLoss::CrossEntropy { target: target.clone() },
            KdeLoss::KlFrom { reference: target.clone() },
            KdeLoss::MiMixture { partner: target, prior: 0.5 },
        ];
        for loss in &losses {
            let analytic = kde_loss_gradient(&samples, &grid, h, loss).unwrap();
            let mut f = |s: &[f64]| kde_loss_value(s, &grid, h, loss).unwrap();
            let numeric = finite_diff(&mut f, &samples);
            for (a, b) in analytic.iter().zip(&numeric) {
                assert!(relative_error(*a, *b) < 1e-5, "analytic {a} vs numeric {b}");
            }
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init_mlp(&[3, 5, 2], 42).unwrap();
        let b = ModelParams::init_mlp(&[3, 5, 2], 42).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init_mlp(&[3, 5, 2], 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn residual_hidden_units_are_tanh() {
        let mut p = ModelParams::init_residual_scalar(1, 0).unwrap();
        p.layers[0].weights.set(0, 0, 1.0);
        p.layers[0].biases[0] = 0.5;
        p.layers[1].weights.set(0, 0, 2.0);
        p.layers[1].biases[0] = 0.25;
        let x = Matrix::from_rows(&[vec![-2.0], vec![0.0], vec![1.5]]).unwrap();
        let (out, _) = forward(&p, &x).unwrap();
        for i in 0..3 {
            let xi = x.get(i, 0);
            assert_eq!(out.get(i, 0), xi + 2.0 * (xi + 0.5).tanh() + 0.25);
        }
    }

    proptest! {
        #[test]
        fn residual_forward_is_identity_for_any_init_seed(
            seed in 0u64..1000,
            xs in proptest::collection::vec(-50.0f64..50.0, 1..6),
        ) {
            let p = ModelParams::init_residual_scalar(8, seed).unwrap();
            let x = Matrix::from_vec(xs.len(), 1, xs.clone()).unwrap();
            let (out, _) = forward(&p, &x).unwrap();
            prop_assert_eq!(out.as_slice(), x.as_slice());
        }

        #[test]
        fn softmax_outputs_always_normalized(
            seed in 0u64..1000,
            xs in proptest::collection::vec(-5.0f64..5.0, 4),
        ) {
            let p = ModelParams::init_mlp(&[2, 3, 4], seed).unwrap();
            let x = Matrix::from_vec(2, 2, xs).unwrap();
            let (out, _) = forward(&p, &x).unwrap();
            for r in 0..out.rows() {
                let s: f64 = out.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}
