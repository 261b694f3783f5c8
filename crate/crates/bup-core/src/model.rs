//! The two-channel network: mean messages propagated with the normalized
//! kernel, and per-dimension variances propagated by conditioning each node
//! on its neighbors.
//!
//! The variance channel treats, per dimension, a node and its neighbors as
//! jointly Gaussian with covariance `cov(i,j) = cor(i,j) sqrt(var_i var_j)`
//! and `cor(i,j) = 1/sqrt(lambda d_i d_j)` (degrees include the self-loop).
//! Conditioning node `i` on its neighbors reduces its variance by the Schur
//! complement, which collapses to a per-node scaling factor because the
//! neighbor block is diagonal.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, PropagationKernel};
use crate::linalg;

/// Per-node Gaussian message at some layer: row `i` of `mean` and the
/// matching row of `variance` are the mean vector and diagonal covariance
/// of node `i`'s message.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMessageField {
    pub mean: Array2<f64>,
    pub variance: Array2<f64>,
}

impl GaussianMessageField {
    pub fn new(mean: Array2<f64>, variance: Array2<f64>) -> Result<GaussianMessageField> {
        if mean.dim() != variance.dim() {
            return Err(Error::input(format!(
                "mean shape {:?} does not match variance shape {:?}",
                mean.dim(),
                variance.dim()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::invariant("message mean contains non-finite values"));
        }
        if variance.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invariant(
                "message variance must be strictly positive and finite",
            ));
        }
        Ok(GaussianMessageField { mean, variance })
    }

    pub fn num_nodes(&self) -> usize {
        self.mean.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }
}

/// Weights of the two channels. `mean_weights[l]` and `var_weights[l]` have
/// identical shapes chaining `F -> hidden... -> C`; `var_input_bias` feeds
/// the initial raw variance and has the width of the first hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BupParameters {
    pub mean_weights: Vec<Array2<f64>>,
    pub var_weights: Vec<Array2<f64>>,
    pub var_input_bias: Array1<f64>,
    pub lambda: f64,
}

/// `softplus(x) = ln(1 + e^x)`, computed without overflow on either side.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`]; used to pick biases hitting a target variance.
pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0, "softplus is positive");
    // ln(e^y - 1) = y + ln(1 - e^-y)
    y + (-(-y).exp_m1()).ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl BupParameters {
    /// Glorot-uniform initialization over the width chain `dims`
    /// (e.g. `[F, 16, C]`). The variance-input bias starts at
    /// `softplus^-1(1)` so initial variances sit near 1.
    pub fn init(dims: &[usize], lambda: f64, seed: u64) -> Result<BupParameters> {
        if dims.len() < 2 {
            return Err(Error::input("need at least input and output widths"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::input("layer widths must be positive"));
        }
        if lambda < 1.0 {
            return Err(Error::input(format!(
                "lambda must be >= 1 for positive conditional variance, got {lambda}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |rows: usize, cols: usize| -> Array2<f64> {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| {
                (2.0 * rng.random::<f64>() - 1.0) * limit
            })
        };
        let mean_weights: Vec<Array2<f64>> = dims
            .windows(2)
            .map(|w| glorot(w[0], w[1]))
            .collect();
        let var_weights: Vec<Array2<f64>> = dims
            .windows(2)
            .map(|w| glorot(w[0], w[1]))
            .collect();
        let var_input_bias = Array1::from_elem(dims[1], softplus_inverse(1.0));
        Ok(BupParameters {
            mean_weights,
            var_weights,
            var_input_bias,
            lambda,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.mean_weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.mean_weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.mean_weights.last().expect("at least one layer").ncols()
    }

    /// Width chain `[F, hidden..., C]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.mean_weights.iter().map(|w| w.ncols()));
        dims
    }
}

/// Cached mean-channel forward pass. `pre_activations[l]` holds
/// `K (input_l W_l)` and `activations[l]` its activation; the last entry of
/// `activations` is the final mean (the last layer is linear).
#[derive(Debug, Clone)]
pub struct MeanForward {
    pub pre_activations: Vec<Array2<f64>>,
    pub activations: Vec<Array2<f64>>,
}

impl MeanForward {
    pub fn mean(&self) -> &Array2<f64> {
        self.activations.last().expect("at least one layer")
    }
}

/// Runs a mean channel over an explicit weight stack: each layer propagates
/// with the kernel, multiplies by the layer weight, and applies ReLU on
/// hidden layers; the final layer is linear. Shared by the full model and
/// the plain-GCN baseline.
pub fn forward_mean_channel(
    weights: &[Array2<f64>],
    kernel: &PropagationKernel,
    x: ArrayView2<f64>,
) -> Result<MeanForward> {
    let layers = weights.len();
    if layers == 0 {
        return Err(Error::input("mean channel needs at least one layer"));
    }
    let mut pre_activations = Vec::with_capacity(layers);
    let mut activations = Vec::with_capacity(layers);
    let mut current = x.to_owned();
    for (l, w) in weights.iter().enumerate() {
        if current.ncols() != w.nrows() {
            return Err(Error::input(format!(
                "mean layer {l}: input width {} does not match weight rows {}",
                current.ncols(),
                w.nrows()
            )));
        }
        let projected = current.dot(w);
        let z = kernel.propagate(projected.view())?;
        let a = if l + 1 < layers {
            z.mapv(|v| v.max(0.0))
        } else {
            z.clone()
        };
        pre_activations.push(z);
        activations.push(a.clone());
        current = a;
    }
    Ok(MeanForward {
        pre_activations,
        activations,
    })
}

/// Mean channel of the full model: ReLU hidden layers, linear output; the
/// output rows are the per-node message means.
pub fn forward_mean(
    params: &BupParameters,
    kernel: &PropagationKernel,
    x: ArrayView2<f64>,
) -> Result<MeanForward> {
    forward_mean_channel(&params.mean_weights, kernel, x)
}

/// Per-node factor `1 - (1/(lambda d_i)) sum_{j in N(i)} 1/d_j` applied to a
/// node's variance when conditioning on its neighbors. With `lambda >= 1`
/// the factor is strictly positive (neighbors have `d_j >= 2`).
pub fn conditional_variance_factors(g: &Graph, lambda: f64) -> Vec<f64> {
    (0..g.num_nodes())
        .map(|i| {
            let d_i = g.degree_hat(i) as f64;
            let neighbor_sum: f64 = g
                .neighbors(i)
                .iter()
                .map(|&j| 1.0 / g.degree_hat(j) as f64)
                .sum();
            1.0 - neighbor_sum / (lambda * d_i)
        })
        .collect()
}

/// Conditional variance of every node given its neighbors (closed form).
pub fn conditional_variance(
    var: ArrayView2<f64>,
    g: &Graph,
    lambda: f64,
) -> Result<Array2<f64>> {
    check_conditional_inputs(var, g, lambda)?;
    let factors = conditional_variance_factors(g, lambda);
    let mut out = var.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let f = factors[i];
        row.mapv_inplace(|v| v * f);
    }
    Ok(out)
}

/// The block covariance matrix of node `i` and its neighbors for one message
/// dimension: `var(i)` in the corner, `cov(i, j)` along the first row and
/// column, neighbor variances on the diagonal, zeros elsewhere.
pub fn neighborhood_covariance(
    var: ArrayView2<f64>,
    g: &Graph,
    node: usize,
    dim: usize,
    lambda: f64,
) -> Array2<f64> {
    let neighbors = g.neighbors(node);
    let k = neighbors.len();
    let d_i = g.degree_hat(node) as f64;
    let v_i = var[[node, dim]];
    let mut m = Array2::<f64>::zeros((k + 1, k + 1));
    m[[0, 0]] = v_i;
    for (a, &j) in neighbors.iter().enumerate() {
        let d_j = g.degree_hat(j) as f64;
        let v_j = var[[j, dim]];
        let cov = (v_i * v_j).sqrt() / (lambda * d_i * d_j).sqrt();
        m[[0, a + 1]] = cov;
        m[[a + 1, 0]] = cov;
        m[[a + 1, a + 1]] = v_j;
    }
    m
}

/// Conditional variance via the literal block-matrix route: build the dense
/// neighborhood covariance and subtract the Schur complement `C B^-1 C^T`.
/// Exists to cross-check [`conditional_variance`]; the two must agree.
pub fn conditional_variance_dense(
    var: ArrayView2<f64>,
    g: &Graph,
    lambda: f64,
) -> Result<Array2<f64>> {
    check_conditional_inputs(var, g, lambda)?;
    let (n, d) = var.dim();
    let mut out = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        let k = g.neighbors(i).len();
        for c in 0..d {
            if k == 0 {
                out[[i, c]] = var[[i, c]];
                continue;
            }
            let m = neighborhood_covariance(var, g, i, c, lambda);
            let b = m.slice(ndarray::s![1.., 1..]).to_owned();
            let cross = m.slice(ndarray::s![0, 1..]).to_owned();
            let solved = linalg::solve_spd(b.view(), cross.view()).ok_or_else(|| {
                Error::invariant(format!(
                    "neighborhood covariance of node {i} is not positive definite"
                ))
            })?;
            out[[i, c]] = var[[i, c]] - cross.dot(&solved);
        }
    }
    Ok(out)
}

fn check_conditional_inputs(var: ArrayView2<f64>, g: &Graph, lambda: f64) -> Result<()> {
    if var.nrows() != g.num_nodes() {
        return Err(Error::input(format!(
            "variance has {} rows but graph has {} nodes",
            var.nrows(),
            g.num_nodes()
        )));
    }
    if lambda < 1.0 {
        return Err(Error::input(format!(
            "lambda must be >= 1, got {lambda}"
        )));
    }
    if var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::invariant(
            "conditional variance requires strictly positive input variance",
        ));
    }
    Ok(())
}

/// Cached variance-channel forward pass. Layer 0 is the feature-driven
/// input `softplus(X Wv_0 + bias)`; every later layer conditions on
/// neighbors, multiplies by its weight, and applies softplus.
#[derive(Debug, Clone)]
pub struct VarForward {
    /// Pre-softplus values of each layer.
    pub pre_activations: Vec<Array2<f64>>,
    /// `factor * activation` inputs fed into layers `1..L`.
    pub conditioned: Vec<Array2<f64>>,
    /// Post-softplus variances of each layer; the last is the output.
    pub activations: Vec<Array2<f64>>,
}

impl VarForward {
    pub fn variance(&self) -> &Array2<f64> {
        self.activations.last().expect("at least one layer")
    }
}

/// Runs the variance channel over the graph.
pub fn forward_variance(
    params: &BupParameters,
    g: &Graph,
    x: ArrayView2<f64>,
) -> Result<VarForward> {
    if x.ncols() != params.input_dim() {
        return Err(Error::input(format!(
            "feature dim {} does not match first weight rows {}",
            x.ncols(),
            params.input_dim()
        )));
    }
    if x.nrows() != g.num_nodes() {
        return Err(Error::input(format!(
            "feature matrix has {} rows but graph has {} nodes",
            x.nrows(),
            g.num_nodes()
        )));
    }
    let layers = params.num_layers();
    let factors = conditional_variance_factors(g, params.lambda);
    let mut pre_activations = Vec::with_capacity(layers);
    let mut conditioned = Vec::with_capacity(layers.saturating_sub(1));
    let mut activations: Vec<Array2<f64>> = Vec::with_capacity(layers);

    let mut s0 = x.dot(&params.var_weights[0]);
    for mut row in s0.rows_mut() {
        row += &params.var_input_bias;
    }
    let v0 = s0.mapv(softplus);
    pre_activations.push(s0);
    activations.push(v0);

    for l in 1..layers {
        let prev = activations.last().expect("previous layer exists");
        let mut cond = prev.clone();
        for (i, mut row) in cond.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v * factors[i]);
        }
        let s = cond.dot(&params.var_weights[l]);
        let v = s.mapv(softplus);
        conditioned.push(cond);
        pre_activations.push(s);
        activations.push(v);
    }
    Ok(VarForward {
        pre_activations,
        conditioned,
        activations,
    })
}

/// Full forward pass producing the final Gaussian message field.
pub fn forward(
    params: &BupParameters,
    kernel: &PropagationKernel,
    g: &Graph,
    x: ArrayView2<f64>,
) -> Result<GaussianMessageField> {
    let mean = forward_mean(params, kernel, x)?;
    let var = forward_variance(params, g, x)?;
    GaussianMessageField::new(
        mean.activations.last().expect("layers").clone(),
        var.activations.last().expect("layers").clone(),
    )
}

/// Row-wise softmax of a logit matrix (max-subtracted for stability).
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let (n, c) = logits.dim();
    let mut out = Array2::<f64>::zeros((n, c));
    let mut buf = vec![0.0f64; c];
    for i in 0..n {
        let row: Vec<f64> = logits.row(i).to_vec();
        softmax_row_into(&row, &mut buf);
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&buf[..]));
    }
    out
}

fn softmax_row_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits.iter()) {
        let e = (z - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Monte Carlo estimate of the predictive probabilities: draws
/// `num_samples` messages from each node's Gaussian and averages their
/// softmax. Rows sum to 1 up to floating-point rounding.
pub fn predict_probability(
    field: &GaussianMessageField,
    num_samples: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if num_samples == 0 {
        return Err(Error::input("num_samples must be at least 1"));
    }
    let (n, c) = field.mean.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut probs = Array2::<f64>::zeros((n, c));
    let mut draw = vec![0.0f64; c];
    let mut soft = vec![0.0f64; c];
    for i in 0..n {
        let mean = field.mean.row(i);
        let std: Vec<f64> = field.variance.row(i).iter().map(|v| v.sqrt()).collect();
        let mut acc = probs.row_mut(i);
        for _ in 0..num_samples {
            for k in 0..c {
                let xi: f64 = normal.sample(&mut rng);
                draw[k] = mean[k] + std[k] * xi;
            }
            softmax_row_into(&draw, &mut soft);
            for (a, &p) in acc.iter_mut().zip(soft.iter()) {
                *a += p;
            }
        }
        let inv = 1.0 / num_samples as f64;
        acc.mapv_inplace(|v| v * inv);
    }
    Ok(probs)
}

/// Per-node summaries of message uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyScore {
    /// Mean over dimensions of the per-dimension standard deviation.
    pub avg_std: Array1<f64>,
    /// Differential entropy of the diagonal Gaussian:
    /// `0.5 * sum_c ln(2 pi e sigma_c^2)`.
    pub gaussian_entropy: Array1<f64>,
}

pub fn uncertainty_scores(field: &GaussianMessageField) -> UncertaintyScore {
    let avg_std = field
        .variance
        .map_axis(Axis(1), |row| row.iter().map(|v| v.sqrt()).sum::<f64>() / row.len() as f64);
    let log_2pi_e = (2.0 * std::f64::consts::PI).ln() + 1.0;
    let gaussian_entropy = field
        .variance
        .map_axis(Axis(1), |row| {
            0.5 * row.iter().map(|v| log_2pi_e + v.ln()).sum::<f64>()
        });
    UncertaintyScore {
        avg_std,
        gaussian_entropy,
    }
}
