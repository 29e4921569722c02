//! Hierarchical contrastive encoder-classifier.
//!
//! The encoder maps binary features to an embedding; the classifier maps the
//! embedding to a two-way softmax whose second output, `f(x)`, is the
//! malicious score. Training minimises `L_hc + λ·L_ce` over mirrored batches,
//! where `L_hc` pulls same-family malware together, keeps same-class pairs
//! within margin `m`, and pushes benign/malicious pairs at least `2m` apart.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, NamedNet};
use crate::dataset::{to_dense, LabeledPool, Sample};
use crate::error::{Error, Result};
use crate::ndcore::{DenseNet, Gradients, Head, LrSchedule, Optimizer, OptimizerKind};
use crate::par::{self, Exec};
use crate::seed::{self, Rng};

/// Lower/upper clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;
pub const LAMBDA_MIN: f64 = 1e-3;
pub const LAMBDA_MAX: f64 = 1e3;
pub const LAMBDA_PROBE_BATCHES: usize = 10;

/// Binary label plus family; the unit the contrastive pair sets are built on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tag {
    pub y: u8,
    pub family: u32,
}

impl From<&Sample> for Tag {
    fn from(s: &Sample) -> Self {
        Tag {
            y: s.y,
            family: s.family,
        }
    }
}

pub fn predicted_label(f: f64) -> u8 {
    u8::from(f >= 0.5)
}

pub fn clamp_prob(f: f64) -> f64 {
    f.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HccArch {
    pub encoder_hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub classifier_hidden: Vec<usize>,
}

impl Default for HccArch {
    fn default() -> Self {
        HccArch {
            encoder_hidden: vec![512, 384, 256],
            embedding_dim: 128,
            classifier_hidden: vec![100, 100],
        }
    }
}

impl HccArch {
    pub fn encoder_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut d = vec![input_dim];
        d.extend(&self.encoder_hidden);
        d.push(self.embedding_dim);
        d
    }

    pub fn classifier_dims(&self) -> Vec<usize> {
        let mut d = vec![self.embedding_dim];
        d.extend(&self.classifier_hidden);
        d.push(2);
        d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderClassifier {
    pub encoder: DenseNet,
    pub classifier: DenseNet,
    pub margin: f64,
    pub lambda: f64,
    pub trained_epochs: u32,
    /// Bumped on every parameter update round; embedding indexes record it.
    pub version: u64,
}

impl EncoderClassifier {
    pub fn init(input_dim: usize, arch: &HccArch, margin: f64, rng: &mut Rng) -> Result<Self> {
        let encoder = DenseNet::he_uniform(&arch.encoder_dims(input_dim), Head::Linear, rng)?;
        let classifier = DenseNet::he_uniform(&arch.classifier_dims(), Head::Softmax2, rng)?;
        Self::from_nets(encoder, classifier, margin, 1.0)
    }

    pub fn from_nets(
        encoder: DenseNet,
        classifier: DenseNet,
        margin: f64,
        lambda: f64,
    ) -> Result<Self> {
        if encoder.output_dim() != classifier.input_dim() {
            return Err(Error::shape(format!(
                "encoder output {} != classifier input {}",
                encoder.output_dim(),
                classifier.input_dim()
            )));
        }
        if classifier.head() != Head::Softmax2 {
            return Err(Error::shape("classifier must end in a softmax2 head"));
        }
        Ok(EncoderClassifier {
            encoder,
            classifier,
            margin,
            lambda,
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

    pub fn embed(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.encoder.predict_batch(x)
    }

    /// Malicious probability `f(x)` per row.
    pub fn malicious_prob(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let emb = self.embed(x)?;
        let p = self.classifier.predict_batch(emb.view())?;
        Ok(p.column(1).to_vec())
    }

    pub fn embed_samples(&self, samples: &[Sample], exec: Exec) -> Result<Array2<f64>> {
        let dim = self.input_dim();
        let chunks = par::map_chunks(exec, samples.len(), 256, |r| {
            self.embed(to_dense(&samples[r], dim).view())
        });
        let mut out = Array2::zeros((0, self.embedding_dim()));
        for c in chunks {
            out.append(Axis(0), c?.view())
                .map_err(|e| Error::shape(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn prob_samples(&self, samples: &[Sample], exec: Exec) -> Result<Vec<f64>> {
        let dim = self.input_dim();
        let chunks = par::map_chunks(exec, samples.len(), 256, |r| {
            self.malicious_prob(to_dense(&samples[r], dim).view())
        });
        let mut out = Vec::with_capacity(samples.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    pub fn predict_samples(&self, samples: &[Sample], exec: Exec) -> Result<Vec<u8>> {
        Ok(self
            .prob_samples(samples, exec)?
            .into_iter()
            .map(predicted_label)
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Mirrored batches
// ---------------------------------------------------------------------------

/// `2N` pool indices; entry `k + N` carries the same tag as entry `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MirroredBatch {
    pub n: usize,
    pub indices: Vec<usize>,
    pub tags: Vec<Tag>,
}

impl MirroredBatch {
    pub fn is_mirrored(&self) -> bool {
        self.indices.len() == 2 * self.n
            && self.tags.len() == 2 * self.n
            && (0..self.n).all(|k| self.tags[k] == self.tags[k + self.n])
    }

    pub fn samples<'a>(&self, pool: &'a LabeledPool) -> Vec<&'a Sample> {
        self.indices.iter().map(|&i| &pool.samples()[i]).collect()
    }
}

/// Group index over a pool, reused across batches.
pub struct MirrorSampler {
    tags: Vec<Tag>,
    groups: HashMap<Tag, Vec<usize>>,
    /// Position of each pool index within its group.
    position: Vec<usize>,
}

impl MirrorSampler {
    pub fn new(pool: &LabeledPool) -> Self {
        let tags: Vec<Tag> = pool.samples().iter().map(Tag::from).collect();
        let mut groups: HashMap<Tag, Vec<usize>> = HashMap::new();
        let mut position = vec![0; tags.len()];
        for (i, t) in tags.iter().enumerate() {
            let g = groups.entry(*t).or_default();
            position[i] = g.len();
            g.push(i);
        }
        MirrorSampler {
            tags,
            groups,
            position,
        }
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> MirroredBatch {
        let size = self.tags.len();
        assert!(size > 0, "mirrored batch from an empty pool");
        let first: Vec<usize> = if size >= n {
            index::sample(rng, size, n).into_vec()
        } else {
            (0..n).map(|_| rng.random_range(0..size)).collect()
        };
        let mut indices = first.clone();
        for &k in &first {
            let group = &self.groups[&self.tags[k]];
            let mirror = if group.len() >= 2 {
                // Uniform over the group minus k itself.
                let mut r = rng.random_range(0..group.len() - 1);
                if r >= self.position[k] {
                    r += 1;
                }
                group[r]
            } else {
                k
            };
            indices.push(mirror);
        }
        let tags = indices.iter().map(|&i| self.tags[i]).collect();
        MirroredBatch { n, indices, tags }
    }
}

pub fn sample_mirrored_batch(pool: &LabeledPool, n: usize, rng: &mut Rng) -> MirroredBatch {
    MirrorSampler::new(pool).sample(n, rng)
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct CeLoss {
    pub value: f64,
    /// d loss / d f(x_i) of the clamped loss (0 where clamping is active).
    pub grad: Vec<f64>,
}

/// Summed binary cross-entropy.
pub fn ce_loss(probs: &[f64], labels: &[u8]) -> CeLoss {
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (&f, &y) in probs.iter().zip(labels) {
        let fc = clamp_prob(f);
        let y = f64::from(y);
        value += -y * fc.ln() - (1.0 - y) * (1.0 - fc).ln();
        grad.push(if fc != f {
            0.0
        } else {
            -y / fc + (1.0 - y) / (1.0 - fc)
        });
    }
    CeLoss { value, grad }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairSets {
    pub p: Vec<usize>,
    pub p_z: Vec<usize>,
    pub n: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Relation {
    Same,
    SameFamily,
    Opposite,
}

#[inline]
fn relation(a: Tag, b: Tag) -> Relation {
    if a.y != b.y {
        Relation::Opposite
    } else if a.y == 1 && a.family == b.family {
        Relation::SameFamily
    } else {
        Relation::Same
    }
}

pub fn hc_pair_sets(tags: &[Tag], i: usize) -> PairSets {
    let mut sets = PairSets::default();
    for (j, &t) in tags.iter().enumerate() {
        if j == i {
            continue;
        }
        match relation(tags[i], t) {
            Relation::Same => sets.p.push(j),
            Relation::SameFamily => sets.p_z.push(j),
            Relation::Opposite => sets.n.push(j),
        }
    }
    sets
}

/// Set sizes per batch position, computed from tag counts.
fn set_sizes(tags: &[Tag]) -> Vec<[usize; 3]> {
    let b = tags.len();
    let mut per_y = [0usize; 2];
    let mut per_tag: HashMap<Tag, usize> = HashMap::new();
    for t in tags {
        per_y[t.y as usize] += 1;
        *per_tag.entry(*t).or_default() += 1;
    }
    tags.iter()
        .map(|t| {
            let same_y = per_y[t.y as usize] - 1;
            let same_fam = if t.y == 1 { per_tag[t] - 1 } else { 0 };
            [same_y - same_fam, same_fam, b - 1 - same_y]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HcLoss {
    pub value: f64,
    /// Per-sample instance losses `L_hc(i)`.
    pub per_sample: Vec<f64>,
    /// d L_hc / d embedding, same shape as the embeddings.
    pub grad: Array2<f64>,
}

/// Summed hierarchical contrastive loss over raw embeddings. Empty pair sets
/// contribute zero. The distance subgradient at `d = 0` is taken as zero.
pub fn hc_loss(emb: ArrayView2<'_, f64>, tags: &[Tag], margin: f64, exec: Exec) -> HcLoss {
    let b = tags.len();
    assert_eq!(emb.nrows(), b, "one embedding row per tag");
    let sizes = set_sizes(tags);
    let inv = |s: usize| if s == 0 { 0.0 } else { 1.0 / s as f64 };
    // Row i yields L_hc(i) and the full gradient for e_i, which collects both
    // its own terms and the terms of every j that has i in its sets.
    let rows = par::map_range(exec, b, |i| {
        let ei = emb.row(i);
        let mut loss = [0.0; 3];
        let mut grad = vec![0.0; emb.ncols()];
        for j in 0..b {
            if j == i {
                continue;
            }
            let ej = emb.row(j);
            let mut d2 = 0.0;
            for (a, c) in ei.iter().zip(ej.iter()) {
                d2 += (a - c) * (a - c);
            }
            let d = d2.sqrt();
            let rel = relation(tags[i], tags[j]);
            let (slot, term, slope) = match rel {
                Relation::Same => (0, (d - margin).max(0.0), if d > margin { 1.0 } else { 0.0 }),
                Relation::SameFamily => (1, d, 1.0),
                Relation::Opposite => (
                    2,
                    (2.0 * margin - d).max(0.0),
                    if d < 2.0 * margin { -1.0 } else { 0.0 },
                ),
            };
            loss[slot] += term;
            let coef = slope * (inv(sizes[i][slot]) + inv(sizes[j][slot]));
            if coef != 0.0 && d > 0.0 {
                let s = coef / d;
                for (g, (a, c)) in grad.iter_mut().zip(ei.iter().zip(ej.iter())) {
                    *g += s * (a - c);
                }
            }
        }
        let value: f64 = (0..3).map(|k| loss[k] * inv(sizes[i][k])).sum();
        (value, grad)
    });
    let mut grad = Array2::zeros(emb.raw_dim());
    let mut per_sample = Vec::with_capacity(b);
    let mut value = 0.0;
    for (i, (v, g)) in rows.into_iter().enumerate() {
        value += v;
        per_sample.push(v);
        grad.row_mut(i).assign(&ndarray::ArrayView1::from(&g));
    }
    HcLoss {
        value,
        per_sample,
        grad,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub hc: f64,
    pub ce: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradients {
    pub encoder: Gradients,
    pub classifier: Gradients,
}

/// `L_hc + λ·L_ce` on a dense batch.
pub fn combined_loss(
    model: &EncoderClassifier,
    x: ArrayView2<'_, f64>,
    tags: &[Tag],
    exec: Exec,
) -> Result<LossBreakdown> {
    let emb = model.embed(x)?;
    let probs = model.classifier.predict_batch(emb.view())?;
    let hc = hc_loss(emb.view(), tags, model.margin, exec).value;
    let labels: Vec<u8> = tags.iter().map(|t| t.y).collect();
    let ce = ce_loss(&probs.column(1).to_vec(), &labels).value;
    Ok(LossBreakdown {
        hc,
        ce,
        total: hc + model.lambda * ce,
    })
}

/// Combined loss and its gradient for both subnetworks.
///
/// The cross-entropy part is differentiated through the logits
/// (`dL/dz_1 = f - y`), i.e. the gradient of the unclamped loss.
pub fn combined_loss_and_grad(
    model: &EncoderClassifier,
    x: ArrayView2<'_, f64>,
    tags: &[Tag],
    exec: Exec,
) -> Result<(LossBreakdown, ModelGradients)> {
    let enc_fwd = model.encoder.forward_batch(x)?;
    let emb = &enc_fwd.output;
    let cls_fwd = model.classifier.forward_batch(emb.view())?;
    let hc = hc_loss(emb.view(), tags, model.margin, exec);
    let probs = cls_fwd.output.column(1).to_vec();
    let labels: Vec<u8> = tags.iter().map(|t| t.y).collect();
    let ce = ce_loss(&probs, &labels).value;

    let mut logit_grad = Array2::zeros((tags.len(), 2));
    for (r, (&f, &y)) in probs.iter().zip(&labels).enumerate() {
        let g = model.lambda * (f - f64::from(y));
        logit_grad[[r, 1]] = g;
        logit_grad[[r, 0]] = -g;
    }
    let (g_cls, d_emb) = model
        .classifier
        .backward_logits(&cls_fwd, logit_grad.view())?;
    let d_emb = d_emb + &hc.grad;
    let (g_enc, _) = model.encoder.backward(&enc_fwd, d_emb.view())?;
    Ok((
        LossBreakdown {
            hc: hc.value,
            ce,
            total: hc.value + model.lambda * ce,
        },
        ModelGradients {
            encoder: g_enc,
            classifier: g_cls,
        },
    ))
}

// ---------------------------------------------------------------------------
// λ balancing
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaEstimate {
    pub lambda: f64,
    /// Single-class pool: no contrast to balance, λ fell back to 1.
    pub degenerate: bool,
}

pub fn lambda_from_means(mean_hc: f64, mean_ce: f64) -> f64 {
    if mean_ce <= 0.0 {
        return if mean_hc > 0.0 { LAMBDA_MAX } else { 1.0 };
    }
    (mean_hc / mean_ce).clamp(LAMBDA_MIN, LAMBDA_MAX)
}

/// Picks λ so that `λ·L_ce` and `L_hc` have similar averages over probe batches.
pub fn auto_lambda(
    model: &EncoderClassifier,
    pool: &LabeledPool,
    batch_half: usize,
    rng: &mut Rng,
    exec: Exec,
) -> Result<LambdaEstimate> {
    if pool.is_empty() {
        return Err(Error::data("cannot balance λ on an empty pool"));
    }
    let first = pool.samples()[0].y;
    if pool.samples().iter().all(|s| s.y == first) {
        log::warn!("single-class pool; using λ = 1");
        return Ok(LambdaEstimate {
            lambda: 1.0,
            degenerate: true,
        });
    }
    let sampler = MirrorSampler::new(pool);
    let dim = model.input_dim();
    let (mut hc, mut ce) = (0.0, 0.0);
    for _ in 0..LAMBDA_PROBE_BATCHES {
        let batch = sampler.sample(batch_half, rng);
        let x = to_dense(batch.samples(pool), dim);
        let l = combined_loss(model, x.view(), &batch.tags, exec)?;
        hc += l.hc;
        ce += l.ce;
    }
    let k = LAMBDA_PROBE_BATCHES as f64;
    Ok(LambdaEstimate {
        lambda: lambda_from_means(hc / k, ce / k),
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    Auto,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartMode {
    #[default]
    Cold,
    Warm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: u32,
}

impl Default for WarmConfig {
    fn default() -> Self {
        WarmConfig {
            optimizer: OptimizerKind::Adam,
            lr: 5e-5,
            epochs: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: HccArch,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub epochs: u32,
    /// `N`; a batch holds `2N` samples.
    pub batch_half: usize,
    pub margin: f64,
    pub lambda: LambdaMode,
    pub seed: u64,
    pub mode: StartMode,
    pub warm: Option<WarmConfig>,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: HccArch::default(),
            optimizer: OptimizerKind::Sgd,
            schedule: LrSchedule::StepDecay {
                base_lr: 0.005,
                decay_factor: 0.95,
                decay_every: 10,
            },
            epochs: 100,
            batch_half: 512,
            margin: 10.0,
            lambda: LambdaMode::Auto,
            seed: 0,
            mode: StartMode::Cold,
            warm: None,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    /// Default settings for warm-start continual training.
    pub fn warm_default() -> Self {
        TrainConfig {
            mode: StartMode::Warm,
            warm: Some(WarmConfig::default()),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_half == 0 {
            return Err(Error::config("batch_half must be positive"));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::config("margin must be positive"));
        }
        if let LambdaMode::Fixed(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::config("fixed λ must be non-negative"));
            }
        }
        if self.arch.embedding_dim == 0 {
            return Err(Error::config("embedding_dim must be positive"));
        }
        match (self.mode, &self.warm) {
            (StartMode::Warm, None) => Err(Error::config("warm mode needs warm settings")),
            (StartMode::Cold, Some(_)) => Err(Error::config("warm settings given in cold mode")),
            (_, Some(w)) if !(w.lr > 0.0 && w.lr.is_finite()) => {
                Err(Error::config("warm lr must be positive"))
            }
            _ => Ok(()),
        }
    }

    pub fn config_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

pub(crate) fn check_pool_dim(pool: &LabeledPool, dim: usize) -> Result<()> {
    match pool
        .samples()
        .iter()
        .find(|s| s.features.last().is_some_and(|&f| f as usize >= dim))
    {
        Some(s) => Err(Error::shape(format!(
            "sample {} has features beyond input dimension {dim}",
            s.id
        ))),
        None => Ok(()),
    }
}

fn batches_per_epoch(pool_len: usize, batch_half: usize) -> usize {
    pool_len.div_ceil(2 * batch_half)
}

fn run_epochs(
    model: &mut EncoderClassifier,
    pool: &LabeledPool,
    batch_half: usize,
    epochs: u32,
    opt: (OptimizerKind, &dyn Fn(u32) -> f64),
    rng: &mut Rng,
    exec: Exec,
) -> Result<()> {
    let sampler = MirrorSampler::new(pool);
    let dim = model.input_dim();
    let mut enc_opt = Optimizer::new(opt.0, opt.1(0), &model.encoder);
    let mut cls_opt = Optimizer::new(opt.0, opt.1(0), &model.classifier);
    let steps = batches_per_epoch(pool.len(), batch_half);
    for epoch in 0..epochs {
        let lr = opt.1(epoch);
        enc_opt.set_learning_rate(lr);
        cls_opt.set_learning_rate(lr);
        for _ in 0..steps {
            let batch = sampler.sample(batch_half, rng);
            let x = to_dense(batch.samples(pool), dim);
            let (loss, mut g) = combined_loss_and_grad(model, x.view(), &batch.tags, exec)?;
            Error::check_loss(loss.total, epoch)?;
            // The loss is a batch sum; step on the per-sample mean.
            let scale = 1.0 / batch.tags.len() as f64;
            g.encoder.scale(scale);
            g.classifier.scale(scale);
            enc_opt.step(&mut model.encoder, &g.encoder)?;
            cls_opt.step(&mut model.classifier, &g.classifier)?;
        }
        model.trained_epochs += 1;
    }
    model.version += 1;
    Ok(())
}

/// Trains from a fresh initialization.
pub fn train_cold(pool: &LabeledPool, dim: usize, cfg: &TrainConfig) -> Result<EncoderClassifier> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::data("cannot train on an empty pool"));
    }
    check_pool_dim(pool, dim)?;
    let mut rng = seed::rng(cfg.seed, &[10]);
    let mut model = EncoderClassifier::init(dim, &cfg.arch, cfg.margin, &mut rng)?;
    model.lambda = match cfg.lambda {
        LambdaMode::Fixed(l) => l,
        LambdaMode::Auto => auto_lambda(&model, pool, cfg.batch_half, &mut rng, cfg.exec)?.lambda,
    };
    let schedule = cfg.schedule;
    let lr = move |e: u32| schedule.lr_at(e);
    run_epochs(
        &mut model,
        pool,
        cfg.batch_half,
        cfg.epochs,
        (cfg.optimizer, &lr),
        &mut rng,
        cfg.exec,
    )?;
    Ok(model)
}

/// Continues training an existing model on the (grown) pool with the warm
/// optimizer at a constant warm learning rate. λ is left unchanged.
pub fn train_warm(
    model: &EncoderClassifier,
    pool: &LabeledPool,
    cfg: &TrainConfig,
) -> Result<EncoderClassifier> {
    cfg.validate()?;
    let warm = match (cfg.mode, cfg.warm) {
        (StartMode::Warm, Some(w)) => w,
        _ => return Err(Error::usage("train_warm requires a warm-mode config")),
    };
    if pool.is_empty() {
        return Err(Error::data("cannot train on an empty pool"));
    }
    check_pool_dim(pool, model.input_dim())?;
    let mut out = model.clone();
    if warm.epochs == 0 {
        return Ok(out);
    }
    let mut rng = seed::rng(
        cfg.seed,
        &[
            11,
            u64::from(model.trained_epochs),
            model.version,
            pool.len() as u64,
        ],
    );
    let lr = move |_: u32| warm.lr;
    run_epochs(
        &mut out,
        pool,
        cfg.batch_half,
        warm.epochs,
        (warm.optimizer, &lr),
        &mut rng,
        cfg.exec,
    )?;
    Ok(out)
}

/// Training accuracy helper.
pub fn accuracy(model: &EncoderClassifier, samples: &[Sample], exec: Exec) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let pred = model.predict_samples(samples, exec)?;
    let hits = pred.iter().zip(samples).filter(|(p, s)| **p == s.y).count();
    Ok(hits as f64 / samples.len() as f64)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// JSON sidecar stored next to the network container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HccSidecar {
    pub kind: String,
    pub margin: f64,
    pub lambda: f64,
    pub trained_epochs: u32,
    pub version: u64,
    pub config_hash: String,
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

pub fn save_model(model: &EncoderClassifier, path: &Path, config_hash: &str) -> Result<()> {
    let mut buf = Vec::new();
    checkpoint::write_nets(
        &mut buf,
        &[
            NamedNet {
                name: "encoder".into(),
                net: model.encoder.clone(),
                optimizer: None,
            },
            NamedNet {
                name: "classifier".into(),
                net: model.classifier.clone(),
                optimizer: None,
            },
        ],
    )?;
    std::fs::write(path, buf)?;
    let side = HccSidecar {
        kind: "hcc".into(),
        margin: model.margin,
        lambda: model.lambda,
        trained_epochs: model.trained_epochs,
        version: model.version,
        config_hash: config_hash.into(),
    };
    let mut f = std::fs::File::create(sidecar_path(path))?;
    serde_json::to_writer_pretty(&mut f, &side).map_err(|e| Error::Checkpoint(e.to_string()))?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<EncoderClassifier> {
    let nets = checkpoint::read_nets(std::fs::File::open(path)?)?;
    let side: HccSidecar = serde_json::from_reader(std::fs::File::open(sidecar_path(path))?)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let find = |name: &str| {
        nets.iter()
            .find(|n| n.name == name)
            .map(|n| n.net.clone())
            .ok_or_else(|| Error::Checkpoint(format!("missing {name} network")))
    };
    let mut model = EncoderClassifier::from_nets(
        find("encoder")?,
        find("classifier")?,
        side.margin,
        side.lambda,
    )?;
    model.trained_epochs = side.trained_epochs;
    model.version = side.version;
    Ok(model)
}
