//! Uncertainty scores that drive sample selection: max-softmax and its
//! pseudo cross-entropy twin, the contrastive pseudo loss over an exact kNN
//! index, the CADE contrastive-autoencoder OOD score, and top-budget
//! selection.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{to_dense, Sample};
use crate::error::{Error, Result};
use crate::hcc::{clamp_prob, predicted_label, EncoderClassifier, Tag};
use crate::ndcore::{DenseNet, Gradients, Head, LrSchedule, Optimizer, OptimizerKind};
use crate::par::{self, Exec};
use crate::seed;

// ---------------------------------------------------------------------------
// Softmax uncertainty
// ---------------------------------------------------------------------------

/// `1 - max(f, 1 - f)` for malicious probability `f`.
pub fn max_softmax_uncertainty(f: f64) -> f64 {
    1.0 - f.max(1.0 - f)
}

/// Cross-entropy against the predicted label: `-max(ln f, ln(1 - f))`.
pub fn pseudo_ce(f: f64) -> f64 {
    let f = clamp_prob(f);
    -(f.ln().max((1.0 - f).ln()))
}

// ---------------------------------------------------------------------------
// Embedding index and exact kNN
// ---------------------------------------------------------------------------

/// Scales each row to unit L2 norm. An all-zero row has no direction and is
/// mapped to the first basis vector.
pub fn normalize_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        } else if !row.is_empty() {
            row.fill(0.0);
            row[0] = 1.0;
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    /// One unit-norm row per pool sample, in pool order.
    pub vectors: Array2<f64>,
    pub tags: Vec<Tag>,
    pub model_version: u64,
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn is_stale(&self, model: &EncoderClassifier) -> bool {
        self.model_version != model.version
    }
}

pub fn build_index(
    model: &EncoderClassifier,
    pool: &[Sample],
    exec: Exec,
) -> Result<EmbeddingIndex> {
    if pool.is_empty() {
        return Err(Error::data("cannot index an empty pool"));
    }
    let vectors = normalize_rows(model.embed_samples(pool, exec)?);
    Ok(EmbeddingIndex {
        vectors,
        tags: pool.iter().map(Tag::from).collect(),
        model_version: model.version,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub position: usize,
    pub distance: f64,
}

fn by_distance(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.position.cmp(&b.position))
}

/// Exact `k` nearest index entries by Euclidean distance, nearest first; equal
/// distances are ordered by pool position.
pub fn knn(index: &EmbeddingIndex, query: ArrayView1<'_, f64>, k: usize) -> Result<Vec<Neighbor>> {
    if k > index.len() {
        return Err(Error::usage(format!(
            "k = {k} exceeds index size {}",
            index.len()
        )));
    }
    if query.len() != index.vectors.ncols() {
        return Err(Error::shape(format!(
            "query has {} dims, index has {}",
            query.len(),
            index.vectors.ncols()
        )));
    }
    let mut all: Vec<Neighbor> = index
        .vectors
        .rows()
        .into_iter()
        .enumerate()
        .map(|(position, v)| Neighbor {
            position,
            distance: euclidean(v, query),
        })
        .collect();
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, by_distance);
        all.truncate(k);
    }
    all.sort_by(by_distance);
    Ok(all)
}

fn euclidean(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

// ---------------------------------------------------------------------------
// Pseudo loss
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoHc {
    pub value: f64,
    /// The index held fewer than `2N - 1` entries; all of it was used.
    pub short_index: bool,
}

/// Contrastive pseudo loss of a unit-norm query embedding with predicted
/// label `y_hat` against its `2N - 1` nearest index entries.
pub fn pseudo_hc_loss(
    query: ArrayView1<'_, f64>,
    y_hat: u8,
    index: &EmbeddingIndex,
    n: usize,
    margin: f64,
) -> Result<PseudoHc> {
    let want = (2 * n).saturating_sub(1);
    let short_index = want > index.len();
    let k = want.min(index.len());
    let neighbors = knn(index, query, k)?;
    let (mut pos, mut n_pos, mut neg, mut n_neg) = (0.0, 0usize, 0.0, 0usize);
    for nb in &neighbors {
        if index.tags[nb.position].y == y_hat {
            pos += (nb.distance - margin).max(0.0);
            n_pos += 1;
        } else {
            neg += (2.0 * margin - nb.distance).max(0.0);
            n_neg += 1;
        }
    }
    let mean = |s: f64, c: usize| if c == 0 { 0.0 } else { s / c as f64 };
    Ok(PseudoHc {
        value: mean(pos, n_pos) + mean(neg, n_neg),
        short_index,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoScore {
    pub hc: f64,
    pub ce: f64,
    pub total: f64,
    pub short_index: bool,
}

pub fn pseudo_loss_total(hc: f64, ce: f64, lambda: f64) -> f64 {
    hc + lambda * ce
}

/// Pseudo loss `L̂_hc + λ·L̂_ce` for each sample, using the model's margin and λ.
pub fn pseudo_loss_scores(
    model: &EncoderClassifier,
    index: &EmbeddingIndex,
    samples: &[Sample],
    n: usize,
    exec: Exec,
) -> Result<Vec<PseudoScore>> {
    if index.is_stale(model) {
        return Err(Error::usage(
            "embedding index was built from another model version",
        ));
    }
    let dim = model.input_dim();
    let chunks = par::map_chunks(exec, samples.len(), 64, |r| -> Result<Vec<PseudoScore>> {
        let x = to_dense(&samples[r], dim);
        let raw = model.embed(x.view())?;
        let probs = model.classifier.predict_batch(raw.view())?;
        let emb = normalize_rows(raw);
        emb.rows()
            .into_iter()
            .zip(probs.column(1))
            .map(|(q, &f)| {
                let hc = pseudo_hc_loss(q, predicted_label(f), index, n, model.margin)?;
                let ce = pseudo_ce(f);
                Ok(PseudoScore {
                    hc: hc.value,
                    ce,
                    total: pseudo_loss_total(hc.value, ce, model.lambda),
                    short_index: hc.short_index,
                })
            })
            .collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CADE
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CadeConfig {
    pub encoder_hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub margin: f64,
    /// Weight of the contrastive term relative to reconstruction MSE.
    pub contrastive_weight: f64,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub epochs: u32,
    pub batch_size: usize,
    /// Warm learning rate as a fraction of the schedule's base rate.
    pub warm_lr_fraction: f64,
    pub warm_epochs: u32,
}

impl Default for CadeConfig {
    fn default() -> Self {
        CadeConfig {
            encoder_hidden: vec![512, 384, 256],
            embedding_dim: 128,
            margin: 10.0,
            contrastive_weight: 0.1,
            optimizer: OptimizerKind::Adam,
            schedule: LrSchedule::StepDecay {
                base_lr: 0.005,
                decay_factor: 0.95,
                decay_every: 10,
            },
            epochs: 50,
            batch_size: 1024,
            warm_lr_fraction: 0.1,
            warm_epochs: 25,
        }
    }
}

impl CadeConfig {
    /// Settings used when the autoencoder is updated warm each month.
    pub fn warm_default() -> Self {
        CadeConfig {
            schedule: LrSchedule::Cosine {
                base_lr: 0.005,
                total_epochs: 200,
            },
            epochs: 200,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.embedding_dim == 0 || self.encoder_hidden.contains(&0) {
            return Err(Error::config("CADE layer widths must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("CADE batch_size must be positive"));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::config("CADE margin must be positive"));
        }
        if !(self.contrastive_weight >= 0.0 && self.contrastive_weight.is_finite()) {
            return Err(Error::config(
                "CADE contrastive_weight must be non-negative",
            ));
        }
        if !(self.warm_lr_fraction > 0.0 && self.warm_lr_fraction.is_finite()) {
            return Err(Error::config("CADE warm_lr_fraction must be positive"));
        }
        Ok(())
    }

    pub fn encoder_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut d = vec![input_dim];
        d.extend(&self.encoder_hidden);
        d.push(self.embedding_dim);
        d
    }
}

/// Distance-to-centroid statistics of one class in the embedding space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    /// Malware family, or 0 for the benign class.
    pub class: u32,
    pub centroid: Vec<f64>,
    pub median: f64,
    pub mad: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CadeModel {
    pub encoder: DenseNet,
    pub decoder: DenseNet,
    pub margin: f64,
    pub contrastive_weight: f64,
    pub stats: Vec<ClassStats>,
    pub trained_epochs: u32,
    pub version: u64,
}

impl CadeModel {
    pub fn init(input_dim: usize, cfg: &CadeConfig, rng: &mut seed::Rng) -> Result<Self> {
        let enc_dims = cfg.encoder_dims(input_dim);
        let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
        Ok(CadeModel {
            encoder: DenseNet::he_uniform(&enc_dims, Head::Linear, rng)?,
            decoder: DenseNet::he_uniform(&dec_dims, Head::Linear, rng)?,
            margin: cfg.margin,
            contrastive_weight: cfg.contrastive_weight,
            stats: Vec::new(),
            trained_epochs: 0,
            version: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn embed_samples(&self, samples: &[Sample], exec: Exec) -> Result<Array2<f64>> {
        let dim = self.input_dim();
        let chunks = par::map_chunks(exec, samples.len(), 256, |r| {
            self.encoder
                .predict_batch(to_dense(&samples[r], dim).view())
        });
        let mut out = Array2::zeros((0, self.embedding_dim()));
        for c in chunks {
            out.append(Axis(0), c?.view())
                .map_err(|e| Error::shape(e.to_string()))?;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CadeLoss {
    pub mse: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// Contrastive term for one pair: `d²` for the same class, `max(0, m - d)²`
/// otherwise.
pub fn cade_pair_loss(d: f64, same_class: bool, margin: f64) -> f64 {
    if same_class {
        d * d
    } else {
        (margin - d).max(0.0).powi(2)
    }
}

/// Batch loss `MSE(x, dec(enc(x))) + w · mean over pairs i<j of the pair
/// loss`, with gradients for encoder and decoder.
pub fn cade_loss_and_grad(
    model: &CadeModel,
    x: ArrayView2<'_, f64>,
    classes: &[u32],
    exec: Exec,
) -> Result<(CadeLoss, Gradients, Gradients)> {
    let b = x.nrows();
    if classes.len() != b {
        return Err(Error::shape(format!(
            "{b} rows but {} class labels",
            classes.len()
        )));
    }
    let enc_fwd = model.encoder.forward_batch(x)?;
    let z = &enc_fwd.output;
    let dec_fwd = model.decoder.forward_batch(z.view())?;
    let diff = &dec_fwd.output - &x;
    let n_entries = (b * x.ncols()).max(1) as f64;
    let mse = diff.iter().map(|v| v * v).sum::<f64>() / n_entries;
    let d_recon = diff.mapv(|v| 2.0 * v / n_entries);

    let n_pairs = b * b.saturating_sub(1) / 2;
    let scale = if n_pairs == 0 {
        0.0
    } else {
        model.contrastive_weight / n_pairs as f64
    };
    let margin = model.margin;
    // Row i accumulates its pair terms with j > i (for the loss) and the
    // gradient over every j (the pair term is symmetric).
    let rows = par::map_range(exec, b, |i| {
        let zi = z.row(i);
        let mut loss = 0.0;
        let mut grad = vec![0.0; z.ncols()];
        for j in 0..b {
            if j == i {
                continue;
            }
            let zj = z.row(j);
            let d = euclidean(zi, zj);
            let same = classes[i] == classes[j];
            if j > i {
                loss += cade_pair_loss(d, same, margin);
            }
            // d/dz_i of d² is 2(z_i - z_j); of (m - d)² it is -2(m - d)(z_i - z_j)/d.
            let coef = if same {
                2.0
            } else if d < margin && d > 0.0 {
                -2.0 * (margin - d) / d
            } else {
                0.0
            };
            if coef != 0.0 {
                for (g, (a, c)) in grad.iter_mut().zip(zi.iter().zip(zj.iter())) {
                    *g += coef * (a - c);
                }
            }
        }
        (loss, grad)
    });
    let mut contrastive = 0.0;
    let mut d_z = Array2::zeros(z.raw_dim());
    for (i, (l, g)) in rows.into_iter().enumerate() {
        contrastive += l;
        d_z.row_mut(i).assign(&(Array1::from(g) * scale));
    }
    let contrastive = if n_pairs == 0 {
        0.0
    } else {
        contrastive / n_pairs as f64
    };
    let (g_dec, d_z_recon) = model.decoder.backward(&dec_fwd, d_recon.view())?;
    let d_z = d_z + &d_z_recon;
    let (g_enc, _) = model.encoder.backward(&enc_fwd, d_z.view())?;
    Ok((
        CadeLoss {
            mse,
            contrastive,
            total: mse + model.contrastive_weight * contrastive,
        },
        g_enc,
        g_dec,
    ))
}

fn median_of(values: &mut [f64]) -> f64 {
    crate::svmconf::median(values)
}

/// Recomputes per-class centroid, median distance to centroid, and MAD.
pub fn fit_cade_stats(model: &mut CadeModel, pool: &[Sample], exec: Exec) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::data("cannot fit CADE statistics on an empty pool"));
    }
    let z = model.embed_samples(pool, exec)?;
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in pool.iter().enumerate() {
        members.entry(s.family).or_default().push(i);
    }
    model.stats = members
        .into_iter()
        .map(|(class, idx)| {
            let rows = z.select(Axis(0), &idx);
            let centroid = rows.mean_axis(Axis(0)).expect("class has members");
            let mut d: Vec<f64> = rows
                .rows()
                .into_iter()
                .map(|r| euclidean(r, centroid.view()))
                .collect();
            let median = median_of(&mut d);
            let mut dev: Vec<f64> = d.iter().map(|v| (v - median).abs()).collect();
            let mad = median_of(&mut dev);
            ClassStats {
                class,
                centroid: centroid.to_vec(),
                median,
                mad,
            }
        })
        .collect();
    Ok(())
}

fn cade_fit_epochs(
    model: &mut CadeModel,
    pool: &[Sample],
    cfg: &CadeConfig,
    epochs: u32,
    lr: &dyn Fn(u32) -> f64,
    rng: &mut seed::Rng,
    exec: Exec,
) -> Result<()> {
    let dim = model.input_dim();
    let mut enc_opt = Optimizer::new(cfg.optimizer, lr(0), &model.encoder);
    let mut dec_opt = Optimizer::new(cfg.optimizer, lr(0), &model.decoder);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for epoch in 0..epochs {
        enc_opt.set_learning_rate(lr(epoch));
        dec_opt.set_learning_rate(lr(epoch));
        order.shuffle(rng);
        for idx in order.chunks(cfg.batch_size) {
            let x = to_dense(idx.iter().map(|&i| &pool[i]), dim);
            let classes: Vec<u32> = idx.iter().map(|&i| pool[i].family).collect();
            let (loss, g_enc, g_dec) = cade_loss_and_grad(model, x.view(), &classes, exec)?;
            Error::check_loss(loss.total, epoch)?;
            enc_opt.step(&mut model.encoder, &g_enc)?;
            dec_opt.step(&mut model.decoder, &g_dec)?;
        }
        model.trained_epochs += 1;
    }
    model.version += 1;
    fit_cade_stats(model, pool, exec)
}

fn check_cade_pool(pool: &[Sample], dim: usize) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::data("cannot train CADE on an empty pool"));
    }
    match pool
        .iter()
        .find(|s| s.features.last().is_some_and(|&f| f as usize >= dim))
    {
        Some(s) => Err(Error::shape(format!(
            "sample {} exceeds dimension {dim}",
            s.id
        ))),
        None => Ok(()),
    }
}

pub fn train_cade(
    pool: &[Sample],
    dim: usize,
    cfg: &CadeConfig,
    seed_value: u64,
    exec: Exec,
) -> Result<CadeModel> {
    cfg.validate()?;
    check_cade_pool(pool, dim)?;
    let mut rng = seed::rng(seed_value, &[40]);
    let mut model = CadeModel::init(dim, cfg, &mut rng)?;
    let schedule = cfg.schedule;
    cade_fit_epochs(
        &mut model,
        pool,
        cfg,
        cfg.epochs,
        &|e| schedule.lr_at(e),
        &mut rng,
        exec,
    )?;
    Ok(model)
}

/// Continues training at `warm_lr_fraction · base_lr` for `warm_epochs`.
pub fn update_cade(
    model: &CadeModel,
    pool: &[Sample],
    cfg: &CadeConfig,
    seed_value: u64,
    exec: Exec,
) -> Result<CadeModel> {
    cfg.validate()?;
    check_cade_pool(pool, model.input_dim())?;
    let mut out = model.clone();
    let mut rng = seed::rng(seed_value, &[41, model.version, pool.len() as u64]);
    let lr = cfg.warm_lr_fraction * cfg.schedule.base_lr();
    cade_fit_epochs(
        &mut out,
        pool,
        cfg,
        cfg.warm_epochs,
        &|_| lr,
        &mut rng,
        exec,
    )?;
    Ok(out)
}

/// Minimum over classes of `|d(z, centroid_c) - median_c| / (MAD_c + 1e-12)`.
pub fn cade_ood_embedded(stats: &[ClassStats], z: ArrayView1<'_, f64>) -> f64 {
    stats
        .iter()
        .map(|s| {
            let d = euclidean(z, ArrayView1::from(&s.centroid));
            (d - s.median).abs() / (s.mad + 1e-12)
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn cade_ood_scores(cade: &CadeModel, samples: &[Sample], exec: Exec) -> Result<Vec<f64>> {
    if cade.stats.is_empty() {
        return Err(Error::usage("CADE model has no class statistics"));
    }
    let z = cade.embed_samples(samples, exec)?;
    Ok(z.rows()
        .into_iter()
        .map(|r| cade_ood_embedded(&cade.stats, r))
        .collect())
}

// ---------------------------------------------------------------------------
// Selection and export
// ---------------------------------------------------------------------------

/// The `budget` ids with the highest scores, highest first; equal scores are
/// ordered by id.
pub fn select_top(scores: &[(String, f64)], budget: usize) -> Vec<String> {
    let mut order: Vec<&(String, f64)> = scores.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    order
        .into_iter()
        .take(budget)
        .map(|(id, _)| id.clone())
        .collect()
}

/// Writes `id,y,family,e1..eK`, one row per sample.
pub fn write_embeddings_csv<W: Write>(
    mut w: W,
    samples: &[Sample],
    emb: ArrayView2<'_, f64>,
) -> Result<()> {
    if emb.nrows() != samples.len() {
        return Err(Error::shape(format!(
            "{} embeddings for {} samples",
            emb.nrows(),
            samples.len()
        )));
    }
    write!(w, "id,y,family")?;
    for k in 1..=emb.ncols() {
        write!(w, ",e{k}")?;
    }
    writeln!(w)?;
    for (s, row) in samples.iter().zip(emb.rows()) {
        write!(w, "{},{},{}", s.id, s.y, s.family)?;
        for v in row {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
