//! Full-batch training: manual reverse-mode gradients, Adam with decoupled
//! bookkeeping per tensor, validation-based early stopping, and the
//! plain-GCN cross-entropy baseline.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{remap_labels_for_ood, Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::{Graph, PropagationKernel};
use crate::loss;
use crate::model::{
    self, conditional_variance_factors, forward_mean_channel, forward_variance, BupParameters,
    MeanForward, VarForward,
};

/// Hyperparameters for a full training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// L2 penalty added to the mean-channel weight gradients only;
    /// penalizing the variance weights biases the model toward
    /// overconfidence.
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without validation-NLL improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub lambda: f64,
    pub hidden_width: usize,
    pub num_layers: usize,
    /// Monte Carlo samples used when evaluating predictive probabilities.
    pub mc_samples_eval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 5e-4,
            max_epochs: 400,
            patience: 50,
            seed: 0,
            lambda: 1.0,
            hidden_width: 16,
            num_layers: 2,
            mc_samples_eval: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.adam_beta1 <= 0.0
            || self.adam_beta2 <= 0.0
            || self.adam_eps <= 0.0
        {
            return Err(Error::input("all optimizer rates must be positive"));
        }
        if self.adam_beta1 >= 1.0 || self.adam_beta2 >= 1.0 {
            return Err(Error::input("adam betas must be below 1"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::input("weight decay must be nonnegative"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::input("patience must not exceed max_epochs"));
        }
        if self.num_layers < 1 || self.hidden_width == 0 {
            return Err(Error::input("need at least one layer of positive width"));
        }
        if self.lambda < 1.0 {
            return Err(Error::input("lambda must be >= 1"));
        }
        if self.mc_samples_eval == 0 {
            return Err(Error::input("mc_samples_eval must be at least 1"));
        }
        Ok(())
    }

    /// Width chain `[F, hidden..., C]` for this configuration.
    pub fn dims(&self, num_features: usize, num_classes: usize) -> Vec<usize> {
        let mut dims = vec![num_features];
        dims.extend(std::iter::repeat(self.hidden_width).take(self.num_layers - 1));
        dims.push(num_classes);
        dims
    }
}

/// Per-epoch history of a run. Equality ignores wall-clock time so the
/// determinism contract (same seed, same trace) stays checkable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainTrace {
    pub train_nll: Vec<f64>,
    pub val_nll: Vec<f64>,
    pub val_acc: Vec<f64>,
    pub best_epoch: usize,
    pub wall_clock_secs: f64,
}

impl PartialEq for TrainTrace {
    fn eq(&self, other: &Self) -> bool {
        self.train_nll == other.train_nll
            && self.val_nll == other.val_nll
            && self.val_acc == other.val_acc
            && self.best_epoch == other.best_epoch
    }
}

impl TrainTrace {
    pub fn epochs_run(&self) -> usize {
        self.train_nll.len()
    }

    /// CSV dump: `epoch,train_nll,val_nll,val_acc` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_nll,val_nll,val_acc\n");
        for e in 0..self.epochs_run() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e, self.train_nll[e], self.val_nll[e], self.val_acc[e]
            ));
        }
        out
    }
}

/// Gradients of the training loss with respect to every parameter tensor.
#[derive(Debug, Clone)]
pub struct BupGradients {
    pub mean_weights: Vec<Array2<f64>>,
    pub var_weights: Vec<Array2<f64>>,
    pub var_input_bias: Array1<f64>,
}

/// Gradients of the mean NLL over `train_idx` with respect to all weights,
/// via hand-written reverse mode.
///
/// The conditioning step multiplies each node's variance row by a constant
/// factor, so its backward rule is the same per-node scaling applied to the
/// incoming gradient. ReLU and softplus contribute their usual masks
/// (`z > 0` and `sigmoid`).
pub fn backward(
    params: &BupParameters,
    graph: &Graph,
    kernel: &PropagationKernel,
    x: ArrayView2<f64>,
    labels: &[usize],
    train_idx: &[usize],
) -> Result<(f64, BupGradients)> {
    let mean_fwd = model::forward_mean(params, kernel, x)?;
    let var_fwd = forward_variance(params, graph, x)?;
    let mean = mean_fwd.mean();
    let variance = var_fwd.variance();
    let (n, c) = mean.dim();

    let mut g_mean = Array2::<f64>::zeros((n, c));
    let mut g_var = Array2::<f64>::zeros((n, c));
    let mut total_nll = 0.0;
    if !train_idx.is_empty() {
        let scale = 1.0 / train_idx.len() as f64;
        for &i in train_idx {
            let (nll, d_m, d_v) =
                loss::loss_and_grad(mean.row(i), variance.row(i), labels[i])?;
            total_nll += nll * scale;
            g_mean.row_mut(i).assign(&(d_m * scale));
            g_var.row_mut(i).assign(&(d_v * scale));
        }
    }

    let d_mean_weights = backward_mean_channel(&params.mean_weights, kernel, x, &mean_fwd, g_mean)?;
    let (d_var_weights, d_bias) =
        backward_variance_channel(params, graph, x, &var_fwd, g_var)?;

    let grads = BupGradients {
        mean_weights: d_mean_weights,
        var_weights: d_var_weights,
        var_input_bias: d_bias,
    };
    check_finite_gradients(&grads)?;
    Ok((total_nll, grads))
}

/// Reverse pass through the shared mean channel. `g_output` is the loss
/// gradient at the final (linear) layer output.
fn backward_mean_channel(
    weights: &[Array2<f64>],
    kernel: &PropagationKernel,
    x: ArrayView2<f64>,
    fwd: &MeanForward,
    g_output: Array2<f64>,
) -> Result<Vec<Array2<f64>>> {
    let layers = weights.len();
    let mut d_weights = vec![Array2::<f64>::zeros((0, 0)); layers];
    let mut g_act = g_output;
    for l in (0..layers).rev() {
        let g_z = if l + 1 < layers {
            // ReLU mask from the cached pre-activation.
            let mut g = g_act;
            g.zip_mut_with(&fwd.pre_activations[l], |gv, &z| {
                if z <= 0.0 {
                    *gv = 0.0;
                }
            });
            g
        } else {
            g_act
        };
        // K is symmetric, so the adjoint of propagation is propagation.
        let g_projected = kernel.propagate(g_z.view())?;
        let input = if l == 0 {
            x
        } else {
            fwd.activations[l - 1].view()
        };
        d_weights[l] = input.t().dot(&g_projected);
        g_act = if l > 0 {
            g_projected.dot(&weights[l].t())
        } else {
            Array2::zeros((0, 0))
        };
    }
    Ok(d_weights)
}

/// Reverse pass through the variance channel.
fn backward_variance_channel(
    params: &BupParameters,
    graph: &Graph,
    x: ArrayView2<f64>,
    fwd: &VarForward,
    g_output: Array2<f64>,
) -> Result<(Vec<Array2<f64>>, Array1<f64>)> {
    let layers = params.var_weights.len();
    let factors = conditional_variance_factors(graph, params.lambda);
    let mut d_weights = vec![Array2::<f64>::zeros((0, 0)); layers];
    let mut g_act = g_output;
    for l in (1..layers).rev() {
        let mut g_s = g_act;
        g_s.zip_mut_with(&fwd.pre_activations[l], |gv, &s| {
            *gv *= model::sigmoid(s);
        });
        d_weights[l] = fwd.conditioned[l - 1].t().dot(&g_s);
        let mut g_cond = g_s.dot(&params.var_weights[l].t());
        for (i, mut row) in g_cond.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v * factors[i]);
        }
        g_act = g_cond;
    }
    let mut g_s0 = g_act;
    g_s0.zip_mut_with(&fwd.pre_activations[0], |gv, &s| {
        *gv *= model::sigmoid(s);
    });
    d_weights[0] = x.t().dot(&g_s0);
    let d_bias = g_s0.sum_axis(Axis(0));
    Ok((d_weights, d_bias))
}

fn check_finite_gradients(grads: &BupGradients) -> Result<()> {
    for (l, w) in grads.mean_weights.iter().enumerate() {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::invariant(format!(
                "non-finite gradient in mean weight {l}"
            )));
        }
    }
    for (l, w) in grads.var_weights.iter().enumerate() {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::invariant(format!(
                "non-finite gradient in variance weight {l}"
            )));
        }
    }
    if grads.var_input_bias.iter().any(|v| !v.is_finite()) {
        return Err(Error::invariant(
            "non-finite gradient in variance input bias",
        ));
    }
    Ok(())
}

/// First/second moment buffers for one tensor.
#[derive(Debug, Clone)]
struct Moments<D: ndarray::Dimension> {
    m: ndarray::Array<f64, D>,
    v: ndarray::Array<f64, D>,
}

impl<D: ndarray::Dimension> Moments<D> {
    fn like(shape: &ndarray::Array<f64, D>) -> Self {
        Moments {
            m: ndarray::Array::zeros(shape.raw_dim()),
            v: ndarray::Array::zeros(shape.raw_dim()),
        }
    }

    fn step(
        &mut self,
        param: &mut ndarray::Array<f64, D>,
        grad: &ndarray::Array<f64, D>,
        lr_t: f64,
        cfg: &TrainConfig,
    ) {
        let b1 = cfg.adam_beta1;
        let b2 = cfg.adam_beta2;
        ndarray::Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr_t * *m / (v.sqrt() + cfg.adam_eps);
            });
    }
}

struct BupOptimizer {
    mean: Vec<Moments<ndarray::Ix2>>,
    var: Vec<Moments<ndarray::Ix2>>,
    bias: Moments<ndarray::Ix1>,
    t: usize,
}

impl BupOptimizer {
    fn new(params: &BupParameters) -> Self {
        BupOptimizer {
            mean: params.mean_weights.iter().map(Moments::like).collect(),
            var: params.var_weights.iter().map(Moments::like).collect(),
            bias: Moments::like(&params.var_input_bias),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut BupParameters, grads: &BupGradients, cfg: &TrainConfig) {
        self.t += 1;
        let t = self.t as i32;
        let lr_t = cfg.learning_rate * (1.0 - cfg.adam_beta2.powi(t)).sqrt()
            / (1.0 - cfg.adam_beta1.powi(t));
        for (l, moments) in self.mean.iter_mut().enumerate() {
            let g = if cfg.weight_decay > 0.0 {
                &grads.mean_weights[l] + &(cfg.weight_decay * &params.mean_weights[l])
            } else {
                grads.mean_weights[l].clone()
            };
            moments.step(&mut params.mean_weights[l], &g, lr_t, cfg);
        }
        for (l, moments) in self.var.iter_mut().enumerate() {
            moments.step(&mut params.var_weights[l], &grads.var_weights[l], lr_t, cfg);
        }
        self.bias
            .step(&mut params.var_input_bias, &grads.var_input_bias, lr_t, cfg);
    }
}

/// Labels and class count actually used for optimization: the OOD class, if
/// any, is removed and the remaining labels are compacted.
pub fn effective_labels(ds: &Dataset, split: &Split) -> (Vec<usize>, usize) {
    match split.ood_class {
        Some(c) => (remap_labels_for_ood(&ds.labels, c), ds.num_classes - 1),
        None => (ds.labels.clone(), ds.num_classes),
    }
}

fn mean_argmax_accuracy(mean: &Array2<f64>, labels: &[usize], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return f64::NAN;
    }
    let mut correct = 0usize;
    for &i in idx {
        let row = mean.row(i);
        let mut best = 0usize;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / idx.len() as f64
}

/// Trains the two-channel model with Adam and early stopping on validation
/// NLL; returns the best-validation parameters and the full trace.
pub fn train(config: &TrainConfig, ds: &Dataset, split: &Split) -> Result<(BupParameters, TrainTrace)> {
    config.validate()?;
    let start = Instant::now();
    let (labels, num_classes) = effective_labels(ds, split);
    if num_classes < 2 {
        return Err(Error::input("training needs at least two classes"));
    }
    let dims = config.dims(ds.num_features(), num_classes);
    let mut params = BupParameters::init(&dims, config.lambda, config.seed)?;
    let kernel = PropagationKernel::from_graph(&ds.graph);
    let x = ds.features.view();

    let mut optimizer = BupOptimizer::new(&params);
    let mut trace = TrainTrace {
        train_nll: Vec::new(),
        val_nll: Vec::new(),
        val_acc: Vec::new(),
        best_epoch: 0,
        wall_clock_secs: 0.0,
    };
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut epochs_since_best = 0usize;

    for epoch in 0..config.max_epochs {
        let (train_nll, grads) = backward(&params, &ds.graph, &kernel, x, &labels, &split.train)
            .map_err(|e| wrap_training(e, epoch))?;
        if !train_nll.is_finite() {
            return Err(Error::Training {
                epoch,
                message: "training NLL is not finite".into(),
            });
        }
        optimizer.step(&mut params, &grads, config);

        let mean_fwd =
            model::forward_mean(&params, &kernel, x).map_err(|e| wrap_training(e, epoch))?;
        let var_fwd =
            forward_variance(&params, &ds.graph, x).map_err(|e| wrap_training(e, epoch))?;
        let mean = mean_fwd.mean();
        let variance = var_fwd.variance();
        let mut val_nll = 0.0;
        for &i in &split.val {
            let (nll, _) = loss::loss_diag_approx(mean.row(i), variance.row(i), labels[i])
                .map_err(|e| wrap_training(e, epoch))?;
            val_nll += nll;
        }
        val_nll /= split.val.len().max(1) as f64;
        let val_acc = mean_argmax_accuracy(mean, &labels, &split.val);

        trace.train_nll.push(train_nll);
        trace.val_nll.push(val_nll);
        trace.val_acc.push(val_acc);

        if val_nll < best_val {
            best_val = val_nll;
            best_params = params.clone();
            trace.best_epoch = epoch;
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= config.patience {
                break;
            }
        }
    }

    trace.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((best_params, trace))
}

fn wrap_training(e: Error, epoch: usize) -> Error {
    match e {
        Error::Invariant(msg) => Error::Training { epoch, message: msg },
        other => other,
    }
}

/// Plain graph-convolutional baseline: the same mean channel trained with
/// cross entropy, no variance channel.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParameters {
    pub weights: Vec<Array2<f64>>,
}

impl GcnParameters {
    pub fn init(dims: &[usize], seed: u64) -> Result<GcnParameters> {
        let full = BupParameters::init(dims, 1.0, seed)?;
        Ok(GcnParameters {
            weights: full.mean_weights,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("at least one layer").ncols()
    }
}

/// Cross-entropy loss and weight gradients for the baseline.
pub fn backward_gcn(
    weights: &[Array2<f64>],
    kernel: &PropagationKernel,
    x: ArrayView2<f64>,
    labels: &[usize],
    train_idx: &[usize],
) -> Result<(f64, Vec<Array2<f64>>)> {
    let fwd = forward_mean_channel(weights, kernel, x)?;
    let logits = fwd.mean();
    let (n, c) = logits.dim();
    let mut g_logits = Array2::<f64>::zeros((n, c));
    let mut total = 0.0;
    if !train_idx.is_empty() {
        let scale = 1.0 / train_idx.len() as f64;
        for &i in train_idx {
            let (l, g) = loss::cross_entropy_loss(logits.row(i), labels[i])?;
            total += l * scale;
            g_logits.row_mut(i).assign(&(g * scale));
        }
    }
    let d_weights = backward_mean_channel(weights, kernel, x, &fwd, g_logits)?;
    for (l, w) in d_weights.iter().enumerate() {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::invariant(format!(
                "non-finite gradient in GCN weight {l}"
            )));
        }
    }
    Ok((total, d_weights))
}

/// Trains the GCN baseline with the same optimizer settings, early stopping
/// on validation cross entropy.
pub fn train_gcn_baseline(
    config: &TrainConfig,
    ds: &Dataset,
    split: &Split,
) -> Result<(GcnParameters, TrainTrace)> {
    config.validate()?;
    let start = Instant::now();
    let (labels, num_classes) = effective_labels(ds, split);
    if num_classes < 2 {
        return Err(Error::input("training needs at least two classes"));
    }
    let dims = config.dims(ds.num_features(), num_classes);
    let mut params = GcnParameters::init(&dims, config.seed)?;
    let kernel = PropagationKernel::from_graph(&ds.graph);
    let x = ds.features.view();

    let mut moments: Vec<Moments<ndarray::Ix2>> =
        params.weights.iter().map(Moments::like).collect();
    let mut t = 0usize;
    let mut trace = TrainTrace {
        train_nll: Vec::new(),
        val_nll: Vec::new(),
        val_acc: Vec::new(),
        best_epoch: 0,
        wall_clock_secs: 0.0,
    };
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut epochs_since_best = 0usize;

    for epoch in 0..config.max_epochs {
        let (train_loss, grads) = backward_gcn(&params.weights, &kernel, x, &labels, &split.train)
            .map_err(|e| wrap_training(e, epoch))?;
        if !train_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                message: "training loss is not finite".into(),
            });
        }
        t += 1;
        let lr_t = config.learning_rate * (1.0 - config.adam_beta2.powi(t as i32)).sqrt()
            / (1.0 - config.adam_beta1.powi(t as i32));
        for (l, m) in moments.iter_mut().enumerate() {
            let g = if config.weight_decay > 0.0 {
                &grads[l] + &(config.weight_decay * &params.weights[l])
            } else {
                grads[l].clone()
            };
            m.step(&mut params.weights[l], &g, lr_t, config);
        }

        let fwd = forward_mean_channel(&params.weights, &kernel, x)
            .map_err(|e| wrap_training(e, epoch))?;
        let logits = fwd.mean();
        let mut val_loss = 0.0;
        for &i in &split.val {
            let (l, _) = loss::cross_entropy_loss(logits.row(i), labels[i])
                .map_err(|e| wrap_training(e, epoch))?;
            val_loss += l;
        }
        val_loss /= split.val.len().max(1) as f64;
        let val_acc = mean_argmax_accuracy(logits, &labels, &split.val);

        trace.train_nll.push(train_loss);
        trace.val_nll.push(val_loss);
        trace.val_acc.push(val_acc);

        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.clone();
            trace.best_epoch = epoch;
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= config.patience {
                break;
            }
        }
    }

    trace.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((best_params, trace))
}
