//! Feed-forward classifier with a two-way softmax head trained on
//! cross-entropy. Serves as the uncertainty-sampling baseline on raw features
//! and as the classifier on top of CADE embeddings.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{to_dense, Sample};
use crate::error::{Error, Result};
use crate::hcc::{ce_loss, predicted_label};
use crate::ndcore::{DenseNet, Gradients, Head, Optimizer, OptimizerKind};
use crate::par::{self, Exec};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub warm_lr: f64,
    pub warm_epochs: u32,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: vec![100, 100],
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            epochs: 25,
            batch_size: 32,
            warm_lr: 1e-4,
            warm_epochs: 10,
        }
    }
}

impl MlpConfig {
    /// Settings for the classifier trained on CADE embeddings.
    pub fn on_embeddings() -> Self {
        MlpConfig {
            epochs: 50,
            batch_size: 1024,
            warm_epochs: 25,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::config("MLP hidden widths must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("MLP batch_size must be positive"));
        }
        for (name, lr) in [("lr", self.lr), ("warm_lr", self.warm_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("MLP {name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Row source for training: dense matrices or sparse samples densified per batch.
pub trait Rows: Sync {
    fn n_rows(&self) -> usize;
    fn n_cols(&self) -> usize;
    fn gather(&self, idx: &[usize]) -> Array2<f64>;
}

impl Rows for ArrayView2<'_, f64> {
    fn n_rows(&self) -> usize {
        self.nrows()
    }
    fn n_cols(&self) -> usize {
        self.ncols()
    }
    fn gather(&self, idx: &[usize]) -> Array2<f64> {
        self.select(Axis(0), idx)
    }
}

/// Sparse samples with their input dimension.
pub struct SampleRows<'a> {
    pub samples: &'a [Sample],
    pub dim: usize,
}

impl Rows for SampleRows<'_> {
    fn n_rows(&self) -> usize {
        self.samples.len()
    }
    fn n_cols(&self) -> usize {
        self.dim
    }
    fn gather(&self, idx: &[usize]) -> Array2<f64> {
        to_dense(idx.iter().map(|&i| &self.samples[i]), self.dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub net: DenseNet,
    pub trained_epochs: u32,
    pub version: u64,
}

impl Mlp {
    pub fn init(input_dim: usize, hidden: &[usize], rng: &mut seed::Rng) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend(hidden);
        dims.push(2);
        Ok(Mlp {
            net: DenseNet::he_uniform(&dims, Head::Softmax2, rng)?,
            trained_epochs: 0,
            version: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Malicious probability per row.
    pub fn prob(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(self.net.predict_batch(x)?.column(1).to_vec())
    }

    pub fn prob_rows<R: Rows>(&self, rows: &R, exec: Exec) -> Result<Vec<f64>> {
        let chunks = par::map_chunks(exec, rows.n_rows(), 256, |r| {
            let idx: Vec<usize> = r.collect();
            self.prob(rows.gather(&idx).view())
        });
        let mut out = Vec::with_capacity(rows.n_rows());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    pub fn prob_samples(&self, samples: &[Sample], exec: Exec) -> Result<Vec<f64>> {
        self.prob_rows(
            &SampleRows {
                samples,
                dim: self.input_dim(),
            },
            exec,
        )
    }

    pub fn predict_samples(&self, samples: &[Sample], exec: Exec) -> Result<Vec<u8>> {
        Ok(self
            .prob_samples(samples, exec)?
            .into_iter()
            .map(predicted_label)
            .collect())
    }
}

/// Mean cross-entropy of a batch and its parameter gradient (taken through
/// the logits, `dL/dz_1 = (f - y)/B`).
pub fn mean_ce_and_grad(
    net: &DenseNet,
    x: ArrayView2<'_, f64>,
    y: &[u8],
) -> Result<(f64, Gradients)> {
    if x.nrows() != y.len() {
        return Err(Error::shape(format!(
            "{} rows but {} labels",
            x.nrows(),
            y.len()
        )));
    }
    let fwd = net.forward_batch(x)?;
    let probs = fwd.output.column(1).to_vec();
    let b = y.len().max(1) as f64;
    let value = ce_loss(&probs, y).value / b;
    let mut logit_grad = Array2::zeros((y.len(), 2));
    for (r, (&f, &t)) in probs.iter().zip(y).enumerate() {
        let g = (f - f64::from(t)) / b;
        logit_grad[[r, 1]] = g;
        logit_grad[[r, 0]] = -g;
    }
    let (grads, _) = net.backward_logits(&fwd, logit_grad.view())?;
    Ok((value, grads))
}

fn check_inputs<R: Rows>(rows: &R, y: &[u8], input_dim: usize) -> Result<()> {
    if rows.n_rows() == 0 {
        return Err(Error::data("cannot train an MLP on an empty pool"));
    }
    if rows.n_rows() != y.len() {
        return Err(Error::shape(format!(
            "{} rows but {} labels",
            rows.n_rows(),
            y.len()
        )));
    }
    if rows.n_cols() != input_dim {
        return Err(Error::shape(format!(
            "input has {} columns, model expects {input_dim}",
            rows.n_cols()
        )));
    }
    Ok(())
}

fn fit<R: Rows>(
    model: &mut Mlp,
    rows: &R,
    y: &[u8],
    kind: OptimizerKind,
    lr: f64,
    epochs: u32,
    batch_size: usize,
    rng: &mut seed::Rng,
) -> Result<()> {
    let mut opt = Optimizer::new(kind, lr, &model.net);
    let mut order: Vec<usize> = (0..rows.n_rows()).collect();
    for epoch in 0..epochs {
        order.shuffle(rng);
        for idx in order.chunks(batch_size) {
            let x = rows.gather(idx);
            let labels: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
            let (loss, g) = mean_ce_and_grad(&model.net, x.view(), &labels)?;
            Error::check_loss(loss, epoch)?;
            opt.step(&mut model.net, &g)?;
        }
        model.trained_epochs += 1;
    }
    model.version += 1;
    Ok(())
}

/// Trains from a fresh seeded initialization.
pub fn train_mlp<R: Rows>(rows: &R, y: &[u8], cfg: &MlpConfig, seed_value: u64) -> Result<Mlp> {
    cfg.validate()?;
    check_inputs(rows, y, rows.n_cols())?;
    let mut rng = seed::rng(seed_value, &[30]);
    let mut model = Mlp::init(rows.n_cols(), &cfg.hidden, &mut rng)?;
    fit(
        &mut model,
        rows,
        y,
        cfg.optimizer,
        cfg.lr,
        cfg.epochs,
        cfg.batch_size,
        &mut rng,
    )?;
    Ok(model)
}

/// Continues training with the warm learning rate and epoch count.
pub fn update_mlp<R: Rows>(
    model: &Mlp,
    rows: &R,
    y: &[u8],
    cfg: &MlpConfig,
    seed_value: u64,
) -> Result<Mlp> {
    cfg.validate()?;
    check_inputs(rows, y, model.input_dim())?;
    let mut out = model.clone();
    let mut rng = seed::rng(seed_value, &[31, model.version, rows.n_rows() as u64]);
    fit(
        &mut out,
        rows,
        y,
        cfg.optimizer,
        cfg.warm_lr,
        cfg.warm_epochs,
        cfg.batch_size,
        &mut rng,
    )?;
    Ok(out)
}
