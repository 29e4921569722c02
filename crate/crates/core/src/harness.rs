//! Monthly active-learning loop, analyst oracle, metrics, two-round tuning,
//! and new-family lead-time analytics.
//!
//! Each test month is handled in a fixed order: predict every sample and
//! record the confusion counts, score the month with the selector, label the
//! top `budget` samples, then retrain (cold) or update (warm). Metrics for a
//! month therefore never see that month's labels.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{random_splits, LabeledPool, MonthlyStream, Provenance, Sample};
use crate::error::{Error, Result};
use crate::hcc::{self, EncoderClassifier, StartMode, TrainConfig, WarmConfig};
use crate::mlp::{self, Mlp, MlpConfig};
use crate::par::{self, Exec};
use crate::seed;
use crate::selectors::{self, CadeConfig, CadeModel, EmbeddingIndex};
use crate::svmconf::{self, ConformalEvaluator, LinearSvm, SvmConfig, TranscendentVariant};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    HccPseudoLoss,
    MlpUncertainty,
    SvmUncertainty,
    TranscendentCred,
    TranscendentCredconf,
    CadeOodSvm,
    CadeOodMlp,
    /// Uniformly random selection on top of the hcc classifier.
    Random,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::HccPseudoLoss => "hcc_pseudo_loss",
            Method::MlpUncertainty => "mlp_uncertainty",
            Method::SvmUncertainty => "svm_uncertainty",
            Method::TranscendentCred => "transcendent_cred",
            Method::TranscendentCredconf => "transcendent_credconf",
            Method::CadeOodSvm => "cade_ood_svm",
            Method::CadeOodMlp => "cade_ood_mlp",
            Method::Random => "random",
        }
    }

    /// Neural methods can be updated warm; SVM-based ones always retrain.
    pub fn supports_warm(self) -> bool {
        matches!(
            self,
            Method::HccPseudoLoss | Method::MlpUncertainty | Method::CadeOodMlp | Method::Random
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ALConfig {
    pub method: Method,
    pub budget_per_month: usize,
    pub start_mode: StartMode,
    pub seed: u64,
    /// Initial and cold-retrain settings; its `seed`, `exec`, `mode` and
    /// `warm` fields are overridden by the harness.
    pub hcc: TrainConfig,
    pub hcc_warm: WarmConfig,
    /// `N` of the pseudo loss (`2N - 1` neighbours); defaults to `hcc.batch_half`.
    pub pseudo_n: Option<usize>,
    pub mlp: MlpConfig,
    pub svm: SvmConfig,
    pub transcendent_svm: SvmConfig,
    pub cade: CadeConfig,
    pub cade_mlp: MlpConfig,
    pub exec: Exec,
}

impl Default for ALConfig {
    fn default() -> Self {
        ALConfig {
            method: Method::default(),
            budget_per_month: 50,
            start_mode: StartMode::Warm,
            seed: 0,
            hcc: TrainConfig::default(),
            hcc_warm: WarmConfig::default(),
            pseudo_n: None,
            mlp: MlpConfig::default(),
            svm: SvmConfig::default(),
            transcendent_svm: SvmConfig {
                c: 1.0,
                ..Default::default()
            },
            cade: CadeConfig::default(),
            cade_mlp: MlpConfig::on_embeddings(),
            exec: Exec::default(),
        }
    }
}

impl ALConfig {
    pub fn validate(&self) -> Result<()> {
        if self.start_mode == StartMode::Warm && !self.method.supports_warm() {
            return Err(Error::config(format!(
                "start_mode: warm start is only available for neural methods, not {}",
                self.method.name()
            )));
        }
        self.hcc_cold(0).validate()?;
        self.hcc_warm_config().validate()?;
        self.mlp.validate()?;
        self.svm.validate()?;
        self.transcendent_svm.validate()?;
        self.cade.validate()?;
        self.cade_mlp.validate()?;
        if self.pseudo_n == Some(0) {
            return Err(Error::config("pseudo_n must be positive"));
        }
        Ok(())
    }

    pub fn pseudo_n(&self) -> usize {
        self.pseudo_n.unwrap_or(self.hcc.batch_half)
    }

    fn hcc_cold(&self, seed_value: u64) -> TrainConfig {
        TrainConfig {
            seed: seed_value,
            exec: self.exec,
            mode: StartMode::Cold,
            warm: None,
            ..self.hcc.clone()
        }
    }

    fn hcc_warm_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            exec: self.exec,
            mode: StartMode::Warm,
            warm: Some(self.hcc_warm),
            ..self.hcc.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// Analyst oracle
// ---------------------------------------------------------------------------

/// Returns stored ground truth; each unique id is charged once.
pub struct AnalystOracle<'a> {
    truth: HashMap<&'a str, &'a Sample>,
    charged: HashSet<String>,
}

impl<'a> AnalystOracle<'a> {
    pub fn new(stream: &'a MonthlyStream) -> Self {
        AnalystOracle {
            truth: stream.samples().map(|s| (s.id.as_str(), s)).collect(),
            charged: HashSet::new(),
        }
    }

    pub fn label(&mut self, id: &str) -> Result<(u8, u32)> {
        let s = self
            .truth
            .get(id)
            .ok_or_else(|| Error::data(format!("analyst asked about unknown id {id}")))?;
        self.charged.insert(id.to_string());
        Ok((s.y, s.family))
    }

    pub fn sample(&self, id: &str) -> Option<&'a Sample> {
        self.truth.get(id).copied()
    }

    pub fn charged(&self) -> usize {
        self.charged.len()
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn from_predictions(pred: &[u8], truth: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Rates as fractions in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub fnr: f64,
    pub fpr: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// FNR = FN/(FN+TP), FPR = FP/(FP+TN), F1 = 2TP/(2TP+FP+FN); a zero
/// denominator yields 0.
pub fn compute_metrics(c: &Confusion) -> Metrics {
    Metrics {
        fnr: ratio(c.fn_, c.fn_ + c.tp),
        fpr: ratio(c.fp, c.fp + c.tn),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonthMetrics {
    pub month: u32,
    pub confusion: Confusion,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub months: Vec<MonthMetrics>,
    /// Unweighted means over months.
    pub mean: Metrics,
}

impl MetricsReport {
    pub fn from_log(log: &ALRunLog) -> Self {
        let months: Vec<MonthMetrics> = log
            .months
            .iter()
            .map(|m| MonthMetrics {
                month: m.month,
                confusion: m.confusion,
                metrics: compute_metrics(&m.confusion),
            })
            .collect();
        let k = months.len().max(1) as f64;
        let mean = Metrics {
            fnr: months.iter().map(|m| m.metrics.fnr).sum::<f64>() / k,
            fpr: months.iter().map(|m| m.metrics.fpr).sum::<f64>() / k,
            f1: months.iter().map(|m| m.metrics.f1).sum::<f64>() / k,
        };
        MetricsReport { months, mean }
    }

    /// Mean of a metric over the months in `range`.
    pub fn mean_over(&self, range: Range<u32>, pick: impl Fn(&Metrics) -> f64) -> f64 {
        let v: Vec<f64> = self
            .months
            .iter()
            .filter(|m| range.contains(&m.month))
            .map(|m| pick(&m.metrics))
            .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

// ---------------------------------------------------------------------------
// Run log
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub id: String,
    pub score: f64,
    pub y: u8,
    pub family: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonthRecord {
    pub month: u32,
    /// `(id, predicted label)` for every sample of the month, in stream order.
    pub predictions: Vec<(String, u8)>,
    pub confusion: Confusion,
    pub selected: Vec<Selection>,
    pub labels_charged: usize,
    /// Pool that produced this month's predictions.
    pub pool_size: usize,
    pub pool_hash: String,
    pub pool_max_month: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ALRunLog {
    pub method: Method,
    pub budget_per_month: usize,
    pub initial_months: Range<u32>,
    /// Families present in the initial pool (0 is benign).
    pub initial_families: BTreeSet<u32>,
    pub months: Vec<MonthRecord>,
    pub final_pool_hash: String,
    /// Non-fatal conditions met during the run.
    pub flags: BTreeSet<String>,
}

/// Checks the temporal and budget invariants of a run log.
pub fn check_no_leakage(log: &ALRunLog) -> Result<()> {
    for m in &log.months {
        if m.month < log.initial_months.end {
            return Err(Error::Invariant(format!(
                "test month {} overlaps the initial months",
                m.month
            )));
        }
        if m.pool_max_month.is_some_and(|pm| pm >= m.month) {
            return Err(Error::Invariant(format!(
                "month {} predicted by a pool containing month {:?}",
                m.month, m.pool_max_month
            )));
        }
        if m.selected.len() > log.budget_per_month || m.labels_charged > log.budget_per_month {
            return Err(Error::Invariant(format!(
                "month {} exceeds the budget",
                m.month
            )));
        }
        let ids: HashSet<&str> = m.predictions.iter().map(|p| p.0.as_str()).collect();
        if let Some(s) = m.selected.iter().find(|s| !ids.contains(s.id.as_str())) {
            return Err(Error::Invariant(format!(
                "month {} selected {} from outside its test set",
                m.month, s.id
            )));
        }
        if m.confusion.total() != m.predictions.len() as u64 {
            return Err(Error::Invariant(format!(
                "month {} confusion counts do not cover its samples",
                m.month
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Learners
// ---------------------------------------------------------------------------

enum Learner {
    Hcc {
        model: EncoderClassifier,
        index: Option<EmbeddingIndex>,
    },
    Mlp(Mlp),
    Svm(LinearSvm),
    Transcendent {
        svm: LinearSvm,
        cce: ConformalEvaluator,
    },
    CadeSvm {
        cade: CadeModel,
        svm: LinearSvm,
    },
    CadeMlp {
        cade: CadeModel,
        mlp: Mlp,
    },
}

fn labels(samples: &[Sample]) -> Vec<u8> {
    samples.iter().map(|s| s.y).collect()
}

impl Learner {
    fn train_cold(cfg: &ALConfig, pool: &LabeledPool, dim: usize, seed_value: u64) -> Result<Self> {
        let samples = pool.samples();
        let y = labels(samples);
        Ok(match cfg.method {
            Method::HccPseudoLoss | Method::Random => Learner::Hcc {
                model: hcc::train_cold(pool, dim, &cfg.hcc_cold(seed_value))?,
                index: None,
            },
            Method::MlpUncertainty => Learner::Mlp(mlp::train_mlp(
                &mlp::SampleRows { samples, dim },
                &y,
                &cfg.mlp,
                seed_value,
            )?),
            Method::SvmUncertainty => {
                Learner::Svm(svmconf::train_svm(samples, dim, &cfg.svm, seed_value)?)
            }
            Method::TranscendentCred | Method::TranscendentCredconf => Learner::Transcendent {
                svm: svmconf::train_svm(samples, dim, &cfg.transcendent_svm, seed_value)?,
                cce: svmconf::cce_fit(samples, dim, &cfg.transcendent_svm, seed_value, cfg.exec)?,
            },
            Method::CadeOodSvm => Learner::CadeSvm {
                cade: selectors::train_cade(samples, dim, &cfg.cade, seed_value, cfg.exec)?,
                svm: svmconf::train_svm(samples, dim, &cfg.svm, seed_value)?,
            },
            Method::CadeOodMlp => {
                let cade = selectors::train_cade(samples, dim, &cfg.cade, seed_value, cfg.exec)?;
                let z = cade.embed_samples(samples, cfg.exec)?;
                let mlp = mlp::train_mlp(&z.view(), &y, &cfg.cade_mlp, seed_value)?;
                Learner::CadeMlp { cade, mlp }
            }
        })
    }

    fn update_warm(self, cfg: &ALConfig, pool: &LabeledPool, seed_value: u64) -> Result<Self> {
        let samples = pool.samples();
        let y = labels(samples);
        Ok(match self {
            Learner::Hcc { model, .. } => Learner::Hcc {
                model: hcc::train_warm(&model, pool, &cfg.hcc_warm_config())?,
                index: None,
            },
            Learner::Mlp(m) => {
                let dim = m.input_dim();
                Learner::Mlp(mlp::update_mlp(
                    &m,
                    &mlp::SampleRows { samples, dim },
                    &y,
                    &cfg.mlp,
                    seed_value,
                )?)
            }
            Learner::CadeMlp { cade, mlp } => {
                let cade = selectors::update_cade(&cade, samples, &cfg.cade, seed_value, cfg.exec)?;
                let z = cade.embed_samples(samples, cfg.exec)?;
                let mlp = mlp::update_mlp(&mlp, &z.view(), &y, &cfg.cade_mlp, seed_value)?;
                Learner::CadeMlp { cade, mlp }
            }
            _ => return Err(Error::config("warm start requested for a cold-only method")),
        })
    }

    fn predict(&self, samples: &[Sample], exec: Exec) -> Result<Vec<u8>> {
        match self {
            Learner::Hcc { model, .. } => model.predict_samples(samples, exec),
            Learner::Mlp(m) => m.predict_samples(samples, exec),
            Learner::Svm(svm)
            | Learner::Transcendent { svm, .. }
            | Learner::CadeSvm { svm, .. } => {
                Ok(samples.iter().map(|s| svm.predict(&s.features)).collect())
            }
            Learner::CadeMlp { cade, mlp } => {
                let z = cade.embed_samples(samples, exec)?;
                Ok(mlp
                    .prob(z.view())?
                    .into_iter()
                    .map(hcc::predicted_label)
                    .collect())
            }
        }
    }

    /// Selection scores, higher meaning "label first".
    fn scores(
        &mut self,
        cfg: &ALConfig,
        pool: &LabeledPool,
        samples: &[Sample],
        month: u32,
        flags: &mut BTreeSet<String>,
    ) -> Result<Vec<f64>> {
        let exec = cfg.exec;
        Ok(match (cfg.method, self) {
            (Method::Random, _) => {
                let mut rng = seed::rng(cfg.seed, &[70, u64::from(month)]);
                samples.iter().map(|_| rng.random::<f64>()).collect()
            }
            (Method::HccPseudoLoss, Learner::Hcc { model, index }) => {
                let idx = match index {
                    Some(i) if !i.is_stale(model) => i,
                    _ => index.insert(selectors::build_index(model, pool.samples(), exec)?),
                };
                let scores =
                    selectors::pseudo_loss_scores(model, idx, samples, cfg.pseudo_n(), exec)?;
                if scores.iter().any(|s| s.short_index) {
                    flags.insert("pseudo_loss_index_smaller_than_2n_minus_1".into());
                }
                scores.into_iter().map(|s| s.total).collect()
            }
            (Method::MlpUncertainty, Learner::Mlp(m)) => m
                .prob_samples(samples, exec)?
                .into_iter()
                .map(selectors::max_softmax_uncertainty)
                .collect(),
            (Method::SvmUncertainty, Learner::Svm(svm)) => samples
                .iter()
                .map(|s| svmconf::svm_uncertainty(svm, &s.features))
                .collect(),
            (
                m @ (Method::TranscendentCred | Method::TranscendentCredconf),
                Learner::Transcendent { svm, cce },
            ) => {
                if cce.has_empty_label_fold() {
                    flags.insert("conformal_fold_without_label".into());
                }
                let variant = if m == Method::TranscendentCred {
                    TranscendentVariant::Cred
                } else {
                    TranscendentVariant::CredTimesConf
                };
                // Low credibility means drifted; negate so higher is selected first.
                par::map(exec, samples, |s| {
                    -svmconf::transcendent_score(cce, svm, &s.features, variant)
                })
            }
            (Method::CadeOodSvm, Learner::CadeSvm { cade, .. })
            | (Method::CadeOodMlp, Learner::CadeMlp { cade, .. }) => {
                selectors::cade_ood_scores(cade, samples, exec)?
            }
            _ => return Err(Error::Invariant("learner does not match method".into())),
        })
    }
}

// ---------------------------------------------------------------------------
// The loop
// ---------------------------------------------------------------------------

/// Runs the monthly loop: the model is trained on `initial_months` and every
/// later month of the stream is a test month.
pub fn run_active_learning(
    stream: &MonthlyStream,
    initial_months: Range<u32>,
    cfg: &ALConfig,
) -> Result<(MetricsReport, ALRunLog)> {
    run_active_learning_with_model(stream, initial_months, cfg).map(|(r, l, _)| (r, l))
}

/// Like [`run_active_learning`], also returning the final hcc model for
/// methods built on it (`hcc_pseudo_loss`, `random`).
pub fn run_active_learning_with_model(
    stream: &MonthlyStream,
    initial_months: Range<u32>,
    cfg: &ALConfig,
) -> Result<(MetricsReport, ALRunLog, Option<EncoderClassifier>)> {
    cfg.validate()?;
    if initial_months.is_empty()
        || initial_months.start < stream.first_month
        || initial_months.end >= stream.end_month()
    {
        return Err(Error::config(format!(
            "initial months {initial_months:?} must be non-empty and leave at least one test month in {}..{}",
            stream.first_month,
            stream.end_month()
        )));
    }
    let mut pool = LabeledPool::from_initial(
        initial_months
            .clone()
            .flat_map(|m| stream.month(m).iter().cloned())
            .collect(),
    )?;
    if pool.is_empty() {
        return Err(Error::data("initial months contain no samples"));
    }
    let initial_families: BTreeSet<u32> = pool.families().into_iter().collect();
    let mut oracle = AnalystOracle::new(stream);
    let mut flags = BTreeSet::new();
    let dim = stream.dim;
    let mut learner = Learner::train_cold(cfg, &pool, dim, seed::derive(cfg.seed, &[61]))?;
    let mut records = Vec::new();
    let last = stream.end_month() - 1;

    for month in initial_months.end..stream.end_month() {
        let test = stream.month(month);
        let pred = learner.predict(test, cfg.exec)?;
        let confusion = Confusion::from_predictions(&pred, &labels(test));
        let mut record = MonthRecord {
            month,
            predictions: test.iter().map(|s| s.id.clone()).zip(pred).collect(),
            confusion,
            selected: Vec::new(),
            labels_charged: 0,
            pool_size: pool.len(),
            pool_hash: pool.snapshot_hash(),
            pool_max_month: pool.max_month(),
        };

        if cfg.budget_per_month > 0 && !test.is_empty() {
            let scores = learner.scores(cfg, &pool, test, month, &mut flags)?;
            if let Some(bad) = scores.iter().position(|v| !v.is_finite()) {
                return Err(Error::Invariant(format!(
                    "non-finite selection score for {}",
                    test[bad].id
                )));
            }
            let by_id: Vec<(String, f64)> = test.iter().map(|s| s.id.clone()).zip(scores).collect();
            let score_of: HashMap<&str, f64> =
                by_id.iter().map(|(i, v)| (i.as_str(), *v)).collect();
            let before = oracle.charged();
            for id in selectors::select_top(&by_id, cfg.budget_per_month) {
                let (y, family) = oracle.label(&id)?;
                let sample = oracle.sample(&id).expect("labeled id exists").clone();
                record.selected.push(Selection {
                    score: score_of[id.as_str()],
                    id,
                    y,
                    family,
                });
                pool.push(sample, Provenance::Analyst(month))?;
            }
            record.labels_charged = oracle.charged() - before;
        }

        let added = !record.selected.is_empty();
        records.push(record);
        if added && month < last {
            let s = seed::derive(cfg.seed, &[60, u64::from(month)]);
            learner = match cfg.start_mode {
                StartMode::Cold => Learner::train_cold(cfg, &pool, dim, s)?,
                StartMode::Warm => learner.update_warm(cfg, &pool, s)?,
            };
        }
    }

    let log = ALRunLog {
        method: cfg.method,
        budget_per_month: cfg.budget_per_month,
        initial_months,
        initial_families,
        months: records,
        final_pool_hash: pool.snapshot_hash(),
        flags,
    };
    check_no_leakage(&log)?;
    let model = match learner {
        Learner::Hcc { model, .. } => Some(model),
        _ => None,
    };
    Ok((MetricsReport::from_log(&log), log, model))
}

// ---------------------------------------------------------------------------
// Lead time
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyLead {
    pub family: u32,
    /// First test month in which this is the most frequent initially-unseen family.
    pub popular_month: Option<u32>,
    pub first_labeled: Option<u32>,
    /// `popular_month - first_labeled`; positive means labeled early.
    pub lead: Option<i64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LeadTimeSummary {
    pub families: Vec<FamilyLead>,
    /// New families that became popular during the test months.
    pub n_popular: usize,
    pub n_labeled_before_popular: usize,
    /// `n_labeled_before_popular / n_popular` (0 when nothing became popular).
    pub fraction_before_popular: f64,
    /// Mean lead over families that were labeled and became popular.
    pub mean_lead: Option<f64>,
    pub never_labeled: Vec<u32>,
}

/// Lead of first analyst label over popularity for every malware family
/// absent from the initial pool. Ties for "most frequent" make every tied
/// family popular that month.
pub fn family_lead_time(log: &ALRunLog, stream: &MonthlyStream) -> LeadTimeSummary {
    let test_months: Vec<u32> = log.months.iter().map(|m| m.month).collect();
    let mut new_families: BTreeSet<u32> = BTreeSet::new();
    let mut popular: BTreeMap<u32, u32> = BTreeMap::new();
    for &m in &test_months {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for s in stream.month(m) {
            if s.y == 1 && !log.initial_families.contains(&s.family) {
                *counts.entry(s.family).or_default() += 1;
                new_families.insert(s.family);
            }
        }
        if let Some(&top) = counts.values().max() {
            for (&f, &c) in &counts {
                if c == top {
                    popular.entry(f).or_insert(m);
                }
            }
        }
    }
    let mut first_labeled: BTreeMap<u32, u32> = BTreeMap::new();
    for m in &log.months {
        for s in &m.selected {
            if new_families.contains(&s.family) {
                first_labeled.entry(s.family).or_insert(m.month);
            }
        }
    }
    let families: Vec<FamilyLead> = new_families
        .iter()
        .map(|&f| {
            let p = popular.get(&f).copied();
            let l = first_labeled.get(&f).copied();
            FamilyLead {
                family: f,
                popular_month: p,
                first_labeled: l,
                lead: p.zip(l).map(|(p, l)| i64::from(p) - i64::from(l)),
            }
        })
        .collect();
    let n_popular = families
        .iter()
        .filter(|f| f.popular_month.is_some())
        .count();
    let leads: Vec<i64> = families.iter().filter_map(|f| f.lead).collect();
    let n_before = leads.iter().filter(|&&l| l > 0).count();
    LeadTimeSummary {
        n_popular,
        n_labeled_before_popular: n_before,
        fraction_before_popular: if n_popular == 0 {
            0.0
        } else {
            n_before as f64 / n_popular as f64
        },
        mean_lead: if leads.is_empty() {
            None
        } else {
            Some(leads.iter().sum::<i64>() as f64 / leads.len() as f64)
        },
        never_labeled: families
            .iter()
            .filter(|f| f.first_labeled.is_none())
            .map(|f| f.family)
            .collect(),
        families,
    }
}

/// First month a sample of `family` was selected, if ever.
pub fn first_labeled_month(log: &ALRunLog, family: u32) -> Option<u32> {
    log.months
        .iter()
        .find(|m| m.selected.iter().any(|s| s.family == family))
        .map(|m| m.month)
}

// ---------------------------------------------------------------------------
// Tuning
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Round1Entry {
    /// Position in the candidate grid.
    pub candidate: usize,
    pub split_f1: Vec<f64>,
    pub mean_f1: f64,
}

/// Trains every candidate's classifier on the train half of each random
/// split and ranks candidates by mean validation F1 (ties: lower index).
/// Returns all candidates ranked; the first ten go to round two.
pub fn tune_round1(
    pool: &LabeledPool,
    dim: usize,
    candidates: &[ALConfig],
    n_splits: usize,
    seed_value: u64,
    exec: Exec,
) -> Result<Vec<Round1Entry>> {
    if candidates.is_empty() {
        return Err(Error::config("candidate grid is empty"));
    }
    for c in candidates {
        c.validate()?;
    }
    let splits = random_splits(pool, n_splits, 0.5, seed_value)?;
    let jobs: Vec<(usize, usize)> = (0..candidates.len())
        .flat_map(|c| (0..splits.len()).map(move |s| (c, s)))
        .collect();
    let f1s = par::map(exec, &jobs, |&(c, s)| -> Result<f64> {
        let (train, valid) = &splits[s];
        let learner = Learner::train_cold(
            &candidates[c],
            train,
            dim,
            seed::derive(seed_value, &[80, s as u64]),
        )?;
        let pred = learner.predict(valid.samples(), candidates[c].exec)?;
        Ok(compute_metrics(&Confusion::from_predictions(
            &pred,
            &labels(valid.samples()),
        ))
        .f1)
    });
    let f1s = f1s.into_iter().collect::<Result<Vec<_>>>()?;
    let mut entries: Vec<Round1Entry> = (0..candidates.len())
        .map(|c| {
            let split_f1: Vec<f64> = f1s[c * splits.len()..(c + 1) * splits.len()].to_vec();
            let mean_f1 = split_f1.iter().sum::<f64>() / split_f1.len().max(1) as f64;
            Round1Entry {
                candidate: c,
                split_f1,
                mean_f1,
            }
        })
        .collect();
    entries.sort_by(|a, b| {
        b.mean_f1
            .total_cmp(&a.mean_f1)
            .then(a.candidate.cmp(&b.candidate))
    });
    Ok(entries)
}

pub const ROUND2_KEEP: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Round2Entry {
    pub candidate: usize,
    pub mean_f1: f64,
}

/// Runs the active-learning loop for each shortlisted candidate over the
/// validation months at a fixed budget and picks the best mean monthly F1
/// (ties: earlier in `shortlist`).
pub fn tune_round2(
    stream: &MonthlyStream,
    candidates: &[ALConfig],
    shortlist: &[usize],
    initial_months: Range<u32>,
    validation_months: Range<u32>,
    budget: usize,
    exec: Exec,
) -> Result<(usize, Vec<Round2Entry>)> {
    if shortlist.is_empty() {
        return Err(Error::config("round-two shortlist is empty"));
    }
    if initial_months.end != validation_months.start {
        return Err(Error::config(
            "validation months must directly follow the initial months",
        ));
    }
    let sub = stream.slice(initial_months.start..validation_months.end);
    let results = par::map(exec, shortlist, |&c| -> Result<Round2Entry> {
        let cfg = ALConfig {
            budget_per_month: budget,
            ..candidates[c].clone()
        };
        let (report, _) = run_active_learning(&sub, initial_months.clone(), &cfg)?;
        Ok(Round2Entry {
            candidate: c,
            mean_f1: report.mean.f1,
        })
    });
    let entries = results.into_iter().collect::<Result<Vec<_>>>()?;
    let best = entries
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.mean_f1.total_cmp(&b.mean_f1).then(ib.cmp(ia)))
        .map(|(_, e)| e.candidate)
        .expect("non-empty shortlist");
    Ok((best, entries))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub candidate: usize,
    pub round1_mean_f1: f64,
    pub round2_mean_f1: Option<f64>,
}

/// Rows in round-one order (descending mean F1).
pub fn leaderboard(round1: &[Round1Entry], round2: &[Round2Entry]) -> Vec<LeaderboardRow> {
    let r2: HashMap<usize, f64> = round2.iter().map(|e| (e.candidate, e.mean_f1)).collect();
    round1
        .iter()
        .map(|e| LeaderboardRow {
            candidate: e.candidate,
            round1_mean_f1: e.mean_f1,
            round2_mean_f1: r2.get(&e.candidate).copied(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

pub fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// `month,FNR,FPR,F1,TP,FP,TN,FN` with rates in percent.
pub fn write_metrics_csv<W: Write>(mut w: W, report: &MetricsReport) -> Result<()> {
    writeln!(w, "month,FNR,FPR,F1,TP,FP,TN,FN")?;
    for m in &report.months {
        let c = m.confusion;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            m.month,
            pct(m.metrics.fnr),
            pct(m.metrics.fpr),
            pct(m.metrics.f1),
            c.tp,
            c.fp,
            c.tn,
            c.fn_
        )?;
    }
    Ok(())
}

/// `month,id,score,y,family`, in selection order.
pub fn write_selections_csv<W: Write>(mut w: W, log: &ALRunLog) -> Result<()> {
    writeln!(w, "month,id,score,y,family")?;
    for m in &log.months {
        for s in &m.selected {
            writeln!(w, "{},{},{},{},{}", m.month, s.id, s.score, s.y, s.family)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub budget_per_month: usize,
    /// Budget 0: a fixed classifier evaluated monthly.
    pub fixed_classifier_baseline: bool,
    pub start_mode: StartMode,
    pub seed: u64,
    pub months: usize,
    pub mean_fnr_pct: String,
    pub mean_fpr_pct: String,
    pub mean_f1_pct: String,
    pub labels_charged: usize,
    pub final_pool_hash: String,
    pub lead_time: LeadTimeSummary,
    pub flags: BTreeSet<String>,
    pub config: ALConfig,
}

pub fn summarize(
    cfg: &ALConfig,
    report: &MetricsReport,
    log: &ALRunLog,
    stream: &MonthlyStream,
) -> Summary {
    Summary {
        method: cfg.method,
        budget_per_month: cfg.budget_per_month,
        fixed_classifier_baseline: cfg.budget_per_month == 0,
        start_mode: cfg.start_mode,
        seed: cfg.seed,
        months: report.months.len(),
        mean_fnr_pct: pct(report.mean.fnr),
        mean_fpr_pct: pct(report.mean.fpr),
        mean_f1_pct: pct(report.mean.f1),
        labels_charged: log.months.iter().map(|m| m.labels_charged).sum(),
        final_pool_hash: log.final_pool_hash.clone(),
        lead_time: family_lead_time(log, stream),
        flags: log.flags.clone(),
        config: cfg.clone(),
    }
}
