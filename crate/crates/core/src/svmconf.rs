//! Linear SVM baseline and the cross-conformal credibility/confidence
//! evaluator used by the Transcendent-style selectors.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::seed;

pub const CCE_FOLDS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    /// Hinge-loss trade-off `C`.
    pub c: f64,
    /// Cap on coordinate passes per inner solve.
    pub max_epochs: u32,
    /// Stop an inner solve once the largest projected dual gradient is below this.
    pub tol: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 0.1,
            max_epochs: 200,
            tol: 1e-4,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::config("SVM C must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("SVM max_epochs must be positive"));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::config("SVM tol must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub w: Vec<f64>,
    pub b: f64,
    pub c: f64,
    /// Trained on a single-class pool.
    pub degenerate: bool,
}

#[inline]
fn signed(y: u8) -> f64 {
    if y == 1 {
        1.0
    } else {
        -1.0
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LinearSvm {
    pub fn decision(&self, features: &[u32]) -> f64 {
        features.iter().map(|&f| self.w[f as usize]).sum::<f64>() + self.b
    }

    pub fn predict(&self, features: &[u32]) -> u8 {
        u8::from(sigmoid(self.decision(features)) >= 0.5)
    }

    /// `½‖w‖² + C·Σ hinge(y·(w·x + b))`.
    pub fn objective(&self, samples: &[Sample]) -> f64 {
        let reg = 0.5 * self.w.iter().map(|v| v * v).sum::<f64>();
        let hinge: f64 = samples
            .iter()
            .map(|s| (1.0 - signed(s.y) * self.decision(&s.features)).max(0.0))
            .sum();
        reg + self.c * hinge
    }
}

/// Dual coordinate descent for a fixed bias: one seeded pass visits every
/// sample once and solves its box-constrained dual coordinate exactly.
struct DualSolver<'a> {
    samples: &'a [Sample],
    q: Vec<f64>,
    alpha: Vec<f64>,
    w: Vec<f64>,
    order: Vec<usize>,
    rng: seed::Rng,
    c: f64,
}

impl<'a> DualSolver<'a> {
    fn new(samples: &'a [Sample], dim: usize, c: f64, seed_value: u64) -> Self {
        DualSolver {
            samples,
            q: samples.iter().map(|s| s.features.len() as f64).collect(),
            alpha: vec![0.0; samples.len()],
            w: vec![0.0; dim],
            order: (0..samples.len()).collect(),
            rng: seed::rng(seed_value, &[20]),
            c,
        }
    }

    fn pass(&mut self, b: f64) -> f64 {
        self.order.shuffle(&mut self.rng);
        let mut worst: f64 = 0.0;
        for &i in &self.order {
            let s = &self.samples[i];
            let y = signed(s.y);
            let g = y * (s.features.iter().map(|&f| self.w[f as usize]).sum::<f64>() + b) - 1.0;
            let a = self.alpha[i];
            let pg = if a <= 0.0 {
                g.min(0.0)
            } else if a >= self.c {
                g.max(0.0)
            } else {
                g
            };
            worst = worst.max(pg.abs());
            if pg == 0.0 {
                continue;
            }
            let a_new = if self.q[i] > 0.0 {
                (a - g / self.q[i]).clamp(0.0, self.c)
            } else if g < 0.0 {
                self.c
            } else {
                0.0
            };
            let delta = (a_new - a) * y;
            if delta != 0.0 {
                self.alpha[i] = a_new;
                for &f in &s.features {
                    self.w[f as usize] += delta;
                }
            }
        }
        worst
    }

    fn solve(&mut self, b: f64, cfg: &SvmConfig, mut trace: Option<&mut Vec<f64>>) {
        for _ in 0..cfg.max_epochs {
            let worst = self.pass(b);
            if let Some(t) = trace.as_deref_mut() {
                t.push(self.objective(b));
            }
            if worst < cfg.tol {
                break;
            }
        }
    }

    /// `Σ α_i y_i`, the negated derivative of the optimal primal value in `b`.
    fn balance(&self) -> f64 {
        self.alpha
            .iter()
            .zip(self.samples)
            .map(|(a, s)| a * signed(s.y))
            .sum()
    }

    fn objective(&self, b: f64) -> f64 {
        LinearSvm {
            w: self.w.clone(),
            b,
            c: self.c,
            degenerate: false,
        }
        .objective(self.samples)
    }
}

/// Trains a linear SVM on the exact primal objective with an unregularized
/// bias. Seeded dual coordinate descent solves for `w` at a fixed `b`; the
/// optimal `b` is found by bisection on the dual balance `Σ α_i y_i = 0`.
pub fn train_svm(
    samples: &[Sample],
    dim: usize,
    cfg: &SvmConfig,
    seed_value: u64,
) -> Result<LinearSvm> {
    train_svm_traced(samples, dim, cfg, seed_value).map(|(svm, _)| svm)
}

/// As [`train_svm`], also returning the primal objective after every pass of
/// the final solve.
pub fn train_svm_traced(
    samples: &[Sample],
    dim: usize,
    cfg: &SvmConfig,
    seed_value: u64,
) -> Result<(LinearSvm, Vec<f64>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::data("cannot train an SVM on an empty pool"));
    }
    if let Some(s) = samples
        .iter()
        .find(|s| s.features.last().is_some_and(|&f| f as usize >= dim))
    {
        return Err(Error::shape(format!(
            "sample {} exceeds dimension {dim}",
            s.id
        )));
    }
    if samples.iter().all(|s| s.y == samples[0].y) {
        log::warn!("SVM trained on a single-class pool");
        // w = 0 with every margin exactly 1 attains objective 0.
        let svm = LinearSvm {
            w: vec![0.0; dim],
            b: signed(samples[0].y),
            c: cfg.c,
            degenerate: true,
        };
        return Ok((svm, vec![0.0]));
    }

    let mut solver = DualSolver::new(samples, dim, cfg.c, seed_value);
    let probe = |b: f64, solver: &mut DualSolver| {
        solver.solve(b, cfg, None);
        solver.balance()
    };
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    let g0 = probe(0.0, &mut solver);
    if g0 != 0.0 {
        // Bracket the root: the balance is non-increasing in b.
        let dir = g0.signum();
        let mut step = 1.0;
        let mut far = 0.0;
        for _ in 0..64 {
            far = dir * step;
            if probe(far, &mut solver) * dir <= 0.0 {
                break;
            }
            if dir > 0.0 {
                lo = far;
            } else {
                hi = far;
            }
            step *= 2.0;
        }
        if dir > 0.0 {
            hi = far;
        } else {
            lo = far;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let g = probe(mid, &mut solver);
            if g > 0.0 {
                lo = mid;
            } else if g < 0.0 {
                hi = mid;
            } else {
                lo = mid;
                hi = mid;
            }
        }
    }
    let b = 0.5 * (lo + hi);
    let mut trace = Vec::new();
    solver.solve(b, cfg, Some(&mut trace));
    Ok((
        LinearSvm {
            w: solver.w,
            b,
            c: cfg.c,
            degenerate: false,
        },
        trace,
    ))
}

/// `0.5 - |σ(decision) - 0.5|`; higher means more uncertain.
pub fn svm_uncertainty(svm: &LinearSvm, features: &[u32]) -> f64 {
    let p = sigmoid(svm.decision(features));
    0.5 - (p - 0.5).abs()
}

/// `-y·decision` with `y ∈ {-1, +1}`; larger is less conforming to `label`.
pub fn nonconformity(svm: &LinearSvm, features: &[u32], label: u8) -> f64 {
    -signed(label) * svm.decision(features)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformalFold {
    pub svm: LinearSvm,
    /// `(nonconformity w.r.t. the true label, true label)` of held-out samples.
    pub calibration: Vec<(f64, u8)>,
    pub calibration_ids: Vec<String>,
    /// Calibration scores per label, ascending.
    sorted: [Vec<f64>; 2],
}

impl ConformalFold {
    /// Fraction of same-label calibration scores `>= score`; `None` if the
    /// fold has no calibration sample with that label.
    pub fn p_value(&self, score: f64, label: u8) -> Option<f64> {
        let s = &self.sorted[label as usize];
        if s.is_empty() {
            return None;
        }
        let below = s.partition_point(|&c| c < score);
        Some((s.len() - below) as f64 / s.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformalEvaluator {
    pub folds: Vec<ConformalFold>,
    pub seed: u64,
}

/// Cross-conformal fit: stratified 10-fold split, one SVM per fold trained on
/// the other nine folds, nonconformity recorded on the held-out fold.
pub fn cce_fit(
    samples: &[Sample],
    dim: usize,
    cfg: &SvmConfig,
    seed_value: u64,
    exec: Exec,
) -> Result<ConformalEvaluator> {
    for label in [0u8, 1] {
        let count = samples.iter().filter(|s| s.y == label).count();
        if count < CCE_FOLDS {
            return Err(Error::data(format!(
                "cross-conformal evaluation needs at least {CCE_FOLDS} samples per class; label {label} has {count}"
            )));
        }
    }
    let mut rng = seed::rng(seed_value, &[21]);
    let mut fold_of = vec![0usize; samples.len()];
    let mut next = 0usize;
    for label in [0u8, 1] {
        let mut members: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].y == label)
            .collect();
        members.shuffle(&mut rng);
        for i in members {
            fold_of[i] = next % CCE_FOLDS;
            next += 1;
        }
    }
    let results = par::map_range(exec, CCE_FOLDS, |k| -> Result<ConformalFold> {
        let train: Vec<Sample> = samples
            .iter()
            .zip(&fold_of)
            .filter(|(_, &f)| f != k)
            .map(|(s, _)| s.clone())
            .collect();
        let svm = train_svm(&train, dim, cfg, seed::derive(seed_value, &[22, k as u64]))?;
        let mut calibration = Vec::new();
        let mut calibration_ids = Vec::new();
        let mut sorted = [Vec::new(), Vec::new()];
        for (s, _) in samples.iter().zip(&fold_of).filter(|(_, &f)| f == k) {
            let score = nonconformity(&svm, &s.features, s.y);
            calibration.push((score, s.y));
            calibration_ids.push(s.id.clone());
            sorted[s.y as usize].push(score);
        }
        sorted.iter_mut().for_each(|v| v.sort_by(f64::total_cmp));
        Ok(ConformalFold {
            svm,
            calibration,
            calibration_ids,
            sorted,
        })
    });
    Ok(ConformalEvaluator {
        folds: results.into_iter().collect::<Result<Vec<_>>>()?,
        seed: seed_value,
    })
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl ConformalEvaluator {
    /// True when some fold lacks calibration samples of a label.
    pub fn has_empty_label_fold(&self) -> bool {
        self.folds
            .iter()
            .any(|f| f.sorted.iter().any(Vec::is_empty))
    }

    /// Median over folds of the conformal p-value of `label` (ties count as
    /// "at least as nonconforming"). A fold without calibration samples of
    /// `label` contributes 0.
    pub fn credibility(&self, features: &[u32], label: u8) -> f64 {
        let mut per_fold: Vec<f64> = self
            .folds
            .iter()
            .map(|f| {
                let score = nonconformity(&f.svm, features, label);
                f.p_value(score, label).unwrap_or(0.0)
            })
            .collect();
        median(&mut per_fold)
    }

    pub fn confidence(&self, features: &[u32], label: u8) -> f64 {
        1.0 - self.credibility(features, 1 - label)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscendentVariant {
    Cred,
    CredTimesConf,
}

/// Credibility (optionally times confidence) of the label predicted by `svm`.
/// Lower means more likely drifted.
pub fn transcendent_score(
    cce: &ConformalEvaluator,
    svm: &LinearSvm,
    features: &[u32],
    variant: TranscendentVariant,
) -> f64 {
    let label = svm.predict(features);
    let cred = cce.credibility(features, label);
    match variant {
        TranscendentVariant::Cred => cred,
        TranscendentVariant::CredTimesConf => cred * cce.confidence(features, label),
    }
}
