//! Dense feed-forward networks with hand-written reverse-mode gradients,
//! SGD/Adam optimizers and learning-rate schedules.
//!
//! Batches are row-major: one sample per row. Layer `l` holds a weight matrix
//! of shape `(layer_dims[l + 1], layer_dims[l])`, so a layer computes
//! `Z = A · Wᵀ + b`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Linear,
    Softmax2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layer_dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    head: Head,
}

/// Activations retained by a forward pass for use by [`DenseNet::backward`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// Layer inputs: `layers[0]` is the batch input, `layers[l]` the ReLU
    /// output feeding layer `l`.
    layers: Vec<Array2<f64>>,
    /// Pre-head affine output of the last layer.
    pub logits: Array2<f64>,
    /// Head output: equal to `logits` for a linear head, softmax rows otherwise.
    pub output: Array2<f64>,
}

impl Forward {
    /// Hidden-layer activations (post-ReLU), first hidden layer first.
    pub fn hidden(&self) -> &[Array2<f64>] {
        &self.layers[1..]
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.layers[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            weights: net
                .weights
                .iter()
                .map(|w| Array2::zeros(w.raw_dim()))
                .collect(),
            biases: net
                .biases
                .iter()
                .map(|b| Array1::zeros(b.raw_dim()))
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|w| *w *= factor);
        self.biases.iter_mut().for_each(|b| *b *= factor);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    /// All entries, layer by layer, weights (row-major) before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().iter().fold(0.0_f64, |m, g| m.max(g.abs()))
    }
}

impl DenseNet {
    /// He-uniform weights (`U(±sqrt(6 / fan_in))`), zero biases.
    pub fn he_uniform(layer_dims: &[usize], head: Head, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, head)?;
        for w in &mut net.weights {
            let bound = (6.0 / w.ncols() as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        Ok(net)
    }

    pub fn zeros(layer_dims: &[usize], head: Head) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::shape(format!("invalid layer dims {layer_dims:?}")));
        }
        if head == Head::Softmax2 && *layer_dims.last().unwrap() != 2 {
            return Err(Error::shape("softmax2 head needs output dim 2"));
        }
        let weights = layer_dims
            .windows(2)
            .map(|d| Array2::zeros((d[1], d[0])))
            .collect();
        let biases = layer_dims[1..].iter().map(|&d| Array1::zeros(d)).collect();
        Ok(DenseNet {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            head,
        })
    }

    pub fn from_parts(
        layer_dims: Vec<usize>,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        head: Head,
    ) -> Result<Self> {
        let template = Self::zeros(&layer_dims, head)?;
        let ok = weights.len() == template.weights.len()
            && biases.len() == template.biases.len()
            && weights
                .iter()
                .zip(&template.weights)
                .all(|(a, b)| a.dim() == b.dim())
            && biases
                .iter()
                .zip(&template.biases)
                .all(|(a, b)| a.len() == b.len());
        if !ok {
            return Err(Error::shape("parameter shapes do not match layer dims"));
        }
        Ok(DenseNet {
            layer_dims,
            weights,
            biases,
            head,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims.windows(2).map(|d| d[0] * d[1] + d[1]).sum()
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        let batch =
            ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::shape(e.to_string()))?;
        self.forward_batch(batch)
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Forward> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has {} columns, net expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let n_layers = self.weights.len();
        let mut layers = Vec::with_capacity(n_layers);
        layers.push(x.to_owned());
        let mut logits = Array2::zeros((0, 0));
        for l in 0..n_layers {
            let mut z = layers[l].dot(&self.weights[l].t());
            z += &self.biases[l];
            if l + 1 < n_layers {
                z.mapv_inplace(relu);
                layers.push(z);
            } else {
                logits = z;
            }
        }
        let output = match self.head {
            Head::Linear => logits.clone(),
            Head::Softmax2 => softmax_rows(&logits),
        };
        Ok(Forward {
            layers,
            logits,
            output,
        })
    }

    /// Forward pass without retaining intermediate activations.
    pub fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has {} columns, net expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let n_layers = self.weights.len();
        let mut a = x.dot(&self.weights[0].t());
        a += &self.biases[0];
        for l in 1..n_layers {
            a.mapv_inplace(relu);
            let mut z = a.dot(&self.weights[l].t());
            z += &self.biases[l];
            a = z;
        }
        if self.head == Head::Softmax2 {
            a = softmax_rows(&a);
        }
        Ok(a)
    }

    /// Backpropagates a gradient taken with respect to the head output.
    ///
    /// Returns parameter gradients and the gradient with respect to the input
    /// batch.
    pub fn backward(
        &self,
        fwd: &Forward,
        output_grad: ArrayView2<'_, f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        self.check_cache(fwd, output_grad.dim())?;
        let logit_grad = match self.head {
            Head::Linear => output_grad.to_owned(),
            Head::Softmax2 => {
                // dz_k = p_k (g_k - sum_j g_j p_j)
                let p = &fwd.output;
                let dot = (&output_grad * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                p * &(&output_grad - &dot)
            }
        };
        self.backward_from_logits(fwd, logit_grad)
    }

    /// Backpropagates a gradient taken with respect to the pre-head logits.
    pub fn backward_logits(
        &self,
        fwd: &Forward,
        logit_grad: ArrayView2<'_, f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        self.check_cache(fwd, logit_grad.dim())?;
        self.backward_from_logits(fwd, logit_grad.to_owned())
    }

    fn check_cache(&self, fwd: &Forward, grad_dim: (usize, usize)) -> Result<()> {
        let layers_ok = fwd.layers.len() == self.weights.len()
            && fwd
                .layers
                .iter()
                .zip(&self.layer_dims)
                .all(|(a, &d)| a.ncols() == d);
        if !layers_ok || fwd.logits.ncols() != self.output_dim() {
            return Err(Error::usage("forward cache was not produced by this net"));
        }
        if grad_dim != fwd.logits.dim() {
            return Err(Error::shape(format!(
                "output gradient {grad_dim:?} does not match output {:?}",
                fwd.logits.dim()
            )));
        }
        Ok(())
    }

    fn backward_from_logits(
        &self,
        fwd: &Forward,
        mut dz: Array2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        let n_layers = self.weights.len();
        let mut gw = Vec::with_capacity(n_layers);
        let mut gb = Vec::with_capacity(n_layers);
        let mut input_grad = Array2::zeros((0, 0));
        for l in (0..n_layers).rev() {
            let a_prev = &fwd.layers[l];
            gw.push(dz.t().dot(a_prev));
            gb.push(dz.sum_axis(Axis(0)));
            let mut da = dz.dot(&self.weights[l]);
            if l > 0 {
                // ReLU subgradient is 0 at exactly 0.
                Zip::from(&mut da).and(a_prev).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                dz = da;
            } else {
                input_grad = da;
            }
        }
        gw.reverse();
        gb.reverse();
        Ok((
            Gradients {
                weights: gw,
                biases: gb,
            },
            input_grad,
        ))
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
struct AdamMoments {
    m: Gradients,
    v: Gradients,
    t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    adam: Option<AdamMoments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, net: &DenseNet) -> Self {
        let adam = match kind {
            OptimizerKind::Sgd => None,
            OptimizerKind::Adam => Some(AdamMoments {
                m: Gradients::zeros_like(net),
                v: Gradients::zeros_like(net),
                t: 0,
            }),
        };
        Optimizer {
            kind,
            learning_rate,
            adam,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    /// Adam step counter; 0 for SGD.
    pub fn steps(&self) -> u64 {
        self.adam.as_ref().map_or(0, |a| a.t)
    }

    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        let shapes_ok = grads.weights.len() == net.weights.len()
            && grads.biases.len() == net.biases.len()
            && grads
                .weights
                .iter()
                .zip(&net.weights)
                .all(|(g, w)| g.dim() == w.dim())
            && grads
                .biases
                .iter()
                .zip(&net.biases)
                .all(|(g, b)| g.len() == b.len());
        if !shapes_ok {
            return Err(Error::shape("gradients do not match parameter shapes"));
        }
        let lr = self.learning_rate;
        match &mut self.adam {
            None => {
                for (w, g) in net.weights.iter_mut().zip(&grads.weights) {
                    w.scaled_add(-lr, g);
                }
                for (b, g) in net.biases.iter_mut().zip(&grads.biases) {
                    b.scaled_add(-lr, g);
                }
            }
            Some(state) => {
                if state.m.weights.len() != net.weights.len()
                    || state
                        .m
                        .weights
                        .iter()
                        .zip(&net.weights)
                        .any(|(m, w)| m.dim() != w.dim())
                {
                    return Err(Error::shape("adam moments do not match parameter shapes"));
                }
                state.t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
                let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                };
                for l in 0..net.weights.len() {
                    Zip::from(&mut net.weights[l])
                        .and(&mut state.m.weights[l])
                        .and(&mut state.v.weights[l])
                        .and(&grads.weights[l])
                        .for_each(|p, m, v, &g| update(p, m, v, g));
                    Zip::from(&mut net.biases[l])
                        .and(&mut state.m.biases[l])
                        .and(&mut state.v.biases[l])
                        .and(&grads.biases[l])
                        .for_each(|p, m, v, &g| update(p, m, v, g));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant {
        base_lr: f64,
    },
    StepDecay {
        base_lr: f64,
        decay_factor: f64,
        decay_every: u32,
    },
    Cosine {
        base_lr: f64,
        total_epochs: u32,
    },
}

impl LrSchedule {
    pub fn base_lr(&self) -> f64 {
        match *self {
            LrSchedule::Constant { base_lr }
            | LrSchedule::StepDecay { base_lr, .. }
            | LrSchedule::Cosine { base_lr, .. } => base_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let base = self.base_lr();
        if !(base > 0.0 && base.is_finite()) {
            return Err(Error::config("base_lr must be positive"));
        }
        match *self {
            LrSchedule::StepDecay {
                decay_factor,
                decay_every,
                ..
            } => {
                if !(decay_factor > 0.0 && decay_factor <= 1.0) {
                    return Err(Error::config("decay_factor must be in (0, 1]"));
                }
                if decay_every == 0 {
                    return Err(Error::config("decay_every must be positive"));
                }
            }
            LrSchedule::Cosine { total_epochs, .. } if total_epochs == 0 => {
                return Err(Error::config("total_epochs must be positive"));
            }
            _ => {}
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch. Cosine epochs past the end are
    /// clamped to the last epoch so the rate stays positive.
    pub fn lr_at(&self, epoch: u32) -> f64 {
        match *self {
            LrSchedule::Constant { base_lr } => base_lr,
            LrSchedule::StepDecay {
                base_lr,
                decay_factor,
                decay_every,
            } => base_lr * decay_factor.powi((epoch / decay_every.max(1)) as i32),
            LrSchedule::Cosine {
                base_lr,
                total_epochs,
            } => {
                let total = total_epochs.max(1);
                let e = epoch.min(total - 1) as f64;
                base_lr * 0.5 * (1.0 + (std::f64::consts::PI * e / total as f64).cos())
            }
        }
    }
}
