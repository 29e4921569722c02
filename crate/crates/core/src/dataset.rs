//! Samples, monthly streams, labeled pools, stream files, splits, and the
//! synthetic drift-stream generator.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// One binary-featured sample.
///
/// `family == 0` exactly when `y == 0` (benign); a positive family names a
/// malware family.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    /// Active feature indices, strictly increasing.
    pub features: Vec<u32>,
    pub y: u8,
    pub family: u32,
    pub month: u32,
}

impl Sample {
    pub fn is_malicious(&self) -> bool {
        self.y == 1
    }

    /// Checks the per-sample invariants against a feature dimension.
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |msg: &str| {
            Err(Error::InvalidSample {
                id: self.id.clone(),
                msg: msg.to_string(),
            })
        };
        if self.id.is_empty() || self.id.contains(['\t', '\n', '\r']) {
            return bad("id must be non-empty and free of tabs and newlines");
        }
        if self.y > 1 {
            return bad("label must be 0 or 1");
        }
        if (self.y == 0) != (self.family == 0) {
            return bad("family must be 0 exactly when the sample is benign");
        }
        if self.features.windows(2).any(|w| w[0] >= w[1]) {
            return bad("feature indices must be strictly increasing");
        }
        if self.features.last().is_some_and(|&f| f as usize >= dim) {
            return bad("feature index out of range");
        }
        Ok(())
    }
}

/// Dense 0/1 matrix, one row per sample.
pub fn to_dense<'a, I>(samples: I, dim: usize) -> Array2<f64>
where
    I: IntoIterator<Item = &'a Sample>,
    I::IntoIter: ExactSizeIterator,
{
    let it = samples.into_iter();
    let mut x = Array2::zeros((it.len(), dim));
    for (r, s) in it.enumerate() {
        for &f in &s.features {
            x[[r, f as usize]] = 1.0;
        }
    }
    x
}

/// Time-ordered months of samples. `months[k]` holds month `first_month + k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MonthlyStream {
    pub dim: usize,
    pub first_month: u32,
    pub months: Vec<Vec<Sample>>,
}

impl MonthlyStream {
    pub fn new(dim: usize, first_month: u32, months: Vec<Vec<Sample>>) -> Result<Self> {
        let s = MonthlyStream {
            dim,
            first_month,
            months,
        };
        s.validate()?;
        Ok(s)
    }

    /// Buckets samples by month; months run contiguously from 0 to the max.
    pub fn from_samples(dim: usize, samples: Vec<Sample>) -> Result<Self> {
        let n_months = samples
            .iter()
            .map(|s| s.month as usize + 1)
            .max()
            .unwrap_or(0);
        let mut months = vec![Vec::new(); n_months];
        for s in samples {
            months[s.month as usize].push(s);
        }
        Self::new(dim, 0, months)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::data("feature dimension must be positive"));
        }
        let mut ids = HashSet::new();
        for (k, month) in self.months.iter().enumerate() {
            let m = self.first_month + k as u32;
            for s in month {
                s.validate(self.dim)?;
                if s.month != m {
                    return Err(Error::InvalidSample {
                        id: s.id.clone(),
                        msg: format!("stored in month {m} but labeled month {}", s.month),
                    });
                }
                if !ids.insert(s.id.as_str()) {
                    return Err(Error::InvalidSample {
                        id: s.id.clone(),
                        msg: "duplicate id".into(),
                    });
                }
            }
        }
        Ok(())
    }

    /// One past the last month index.
    pub fn end_month(&self) -> u32 {
        self.first_month + self.months.len() as u32
    }

    pub fn month(&self, m: u32) -> &[Sample] {
        m.checked_sub(self.first_month)
            .and_then(|k| self.months.get(k as usize))
            .map_or(&[], |v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.months.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.months.iter().flatten()
    }

    /// Sub-stream over `range` (clipped to this stream's months).
    pub fn slice(&self, range: Range<u32>) -> MonthlyStream {
        let start = range.start.max(self.first_month);
        let end = range.end.min(self.end_month()).max(start);
        MonthlyStream {
            dim: self.dim,
            first_month: start,
            months: (start..end).map(|m| self.month(m).to_vec()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Initial,
    Analyst(u32),
}

/// Samples currently available for training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledPool {
    samples: Vec<Sample>,
    provenance: Vec<Provenance>,
    ids: HashSet<String>,
}

impl LabeledPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_initial(samples: Vec<Sample>) -> Result<Self> {
        let mut pool = Self::new();
        for s in samples {
            pool.push(s, Provenance::Initial)?;
        }
        Ok(pool)
    }

    pub fn push(&mut self, sample: Sample, provenance: Provenance) -> Result<()> {
        if let Provenance::Analyst(m) = provenance {
            if sample.month > m {
                return Err(Error::Invariant(format!(
                    "sample {} from month {} labeled in month {m}",
                    sample.id, sample.month
                )));
            }
        }
        if !self.ids.insert(sample.id.clone()) {
            return Err(Error::InvalidSample {
                id: sample.id,
                msg: "already in pool".into(),
            });
        }
        self.samples.push(sample);
        self.provenance.push(provenance);
        Ok(())
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.contains(id)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn max_month(&self) -> Option<u32> {
        self.samples.iter().map(|s| s.month).max()
    }

    pub fn families(&self) -> HashSet<u32> {
        self.samples.iter().map(|s| s.family).collect()
    }

    /// SHA-256 over the sorted ids; identifies a pool snapshot.
    pub fn snapshot_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut ids: Vec<&str> = self.samples.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        let mut h = Sha256::new();
        for id in ids {
            h.update(id.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

// ---------------------------------------------------------------------------
// Stream files
// ---------------------------------------------------------------------------

pub fn read_stream<R: Read>(reader: R) -> Result<MonthlyStream> {
    let mut dim = None;
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let parse_err = |msg: String| Error::Parse { line: lineno, msg };
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#dim ") {
            if dim.is_some() {
                return Err(parse_err("duplicate #dim header".into()));
            }
            let d: usize = rest
                .parse()
                .map_err(|_| parse_err(format!("bad dimension {rest:?}")))?;
            dim = Some(d);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let d = dim.ok_or_else(|| parse_err("sample before #dim header".into()))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse_err(format!(
                "expected 5 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let num = |name: &str, v: &str| -> Result<u32> {
            v.parse()
                .map_err(|_| parse_err(format!("bad {name} {v:?}")))
        };
        let features = if fields[4].is_empty() {
            Vec::new()
        } else {
            fields[4]
                .split(',')
                .map(|f| num("feature index", f))
                .collect::<Result<Vec<_>>>()?
        };
        let y = num("label", fields[2])?;
        let sample = Sample {
            id: fields[0].to_string(),
            month: num("month", fields[1])?,
            y: u8::try_from(y).map_err(|_| parse_err(format!("bad label {y}")))?,
            family: num("family", fields[3])?,
            features,
        };
        sample.validate(d)?;
        if !ids.insert(sample.id.clone()) {
            return Err(Error::InvalidSample {
                id: sample.id,
                msg: "duplicate id".into(),
            });
        }
        samples.push(sample);
    }
    let dim = dim.ok_or_else(|| Error::Parse {
        line: 1,
        msg: "missing #dim header".into(),
    })?;
    MonthlyStream::from_samples(dim, samples)
}

pub fn load_stream(path: impl AsRef<Path>) -> Result<MonthlyStream> {
    read_stream(std::fs::File::open(path)?)
}

pub fn write_stream<W: Write>(mut w: W, stream: &MonthlyStream) -> Result<()> {
    let mut buf = String::new();
    writeln!(buf, "#dim {}", stream.dim).unwrap();
    for s in stream.samples() {
        write!(buf, "{}\t{}\t{}\t{}\t", s.id, s.month, s.y, s.family).unwrap();
        for (k, f) in s.features.iter().enumerate() {
            if k > 0 {
                buf.push(',');
            }
            write!(buf, "{f}").unwrap();
        }
        buf.push('\n');
    }
    w.write_all(buf.as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic streams
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dim: usize,
    pub n_families: u32,
    pub benign_fraction: f64,
    pub months: u32,
    pub samples_per_month: usize,
    /// Birth month per family (families are numbered from 1). Missing entries
    /// default to month 0.
    pub family_birth_month: Vec<u32>,
    pub drift_flip_prob: f64,
    /// Fraction of features that are "hot" in a prototype.
    pub hot_fraction: f64,
    /// Share of a family's hot features drawn from a core shared by all malware.
    pub malicious_core_share: f64,
    pub p_hot: f64,
    pub p_cold: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dim: 200,
            n_families: 4,
            benign_fraction: 0.9,
            months: 12,
            samples_per_month: 200,
            family_birth_month: Vec::new(),
            drift_flip_prob: 0.01,
            hot_fraction: 0.1,
            malicious_core_share: 0.5,
            p_hot: 0.7,
            p_cold: 0.01,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn birth_month(&self, family: u32) -> u32 {
        self.family_birth_month
            .get(family as usize - 1)
            .copied()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        if self.dim == 0 {
            return Err(Error::config("dim must be positive"));
        }
        if self.n_families == 0 {
            return Err(Error::config("n_families must be positive"));
        }
        if !(self.benign_fraction > 0.0 && self.benign_fraction < 1.0) {
            return Err(Error::config("benign_fraction must be in (0, 1)"));
        }
        if self.benign_fraction * (self.samples_per_month as f64) < 1.0 {
            return Err(Error::config(
                "benign_fraction * samples_per_month must be at least 1",
            ));
        }
        if self.family_birth_month.len() > self.n_families as usize {
            return Err(Error::config("more birth months than families"));
        }
        if self.months > 0 && self.family_birth_month.iter().any(|&b| b >= self.months) {
            return Err(Error::config(
                "family birth months must precede the stream end",
            ));
        }
        if !(1..=self.n_families).any(|f| self.birth_month(f) == 0) {
            return Err(Error::config("at least one family must be born in month 0"));
        }
        if ![
            self.drift_flip_prob,
            self.p_hot,
            self.p_cold,
            self.malicious_core_share,
        ]
        .into_iter()
        .all(prob)
        {
            return Err(Error::config("probabilities must be in [0, 1]"));
        }
        if !(self.hot_fraction > 0.0 && self.hot_fraction <= 1.0) {
            return Err(Error::config("hot_fraction must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Per-class Bernoulli prototype: hot features fire with `p_hot`, others
/// with `p_cold`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prototype {
    pub hot: Vec<bool>,
}

impl Prototype {
    fn random_subset(dim: usize, count: usize, rng: &mut seed::Rng) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..dim).collect();
        idx.shuffle(rng);
        idx.truncate(count);
        idx
    }

    fn drift(&mut self, flip_prob: f64, rng: &mut seed::Rng) {
        for h in &mut self.hot {
            if rng.random::<f64>() < flip_prob {
                *h = !*h;
            }
        }
    }

    fn draw(&self, p_hot: f64, p_cold: f64, rng: &mut seed::Rng) -> Vec<u32> {
        self.hot
            .iter()
            .enumerate()
            .filter_map(|(i, &h)| {
                let p = if h { p_hot } else { p_cold };
                (rng.random::<f64>() < p).then_some(i as u32)
            })
            .collect()
    }
}

/// Initial prototypes: index 0 is benign, index f is family f.
pub fn initial_prototypes(cfg: &SynthConfig) -> Vec<Prototype> {
    let mut rng = seed::rng(cfg.seed, &[1]);
    let n_hot = ((cfg.hot_fraction * cfg.dim as f64).round() as usize).clamp(1, cfg.dim);
    let n_core = (cfg.malicious_core_share * n_hot as f64).round() as usize;
    let core = Prototype::random_subset(cfg.dim, n_core, &mut rng);
    let mut protos = Vec::with_capacity(cfg.n_families as usize + 1);
    let mut benign = vec![false; cfg.dim];
    for i in Prototype::random_subset(cfg.dim, n_hot, &mut rng) {
        benign[i] = true;
    }
    protos.push(Prototype { hot: benign });
    for _ in 0..cfg.n_families {
        let mut hot = vec![false; cfg.dim];
        for &i in &core {
            hot[i] = true;
        }
        for i in Prototype::random_subset(cfg.dim, n_hot - n_core, &mut rng) {
            hot[i] = true;
        }
        protos.push(Prototype { hot });
    }
    protos
}

/// Month-by-month prototypes: `out[t][c]` is class `c`'s prototype in month `t`.
/// A class drifts once per month after its birth month.
pub fn prototype_trajectory(cfg: &SynthConfig) -> Vec<Vec<Prototype>> {
    let init = initial_prototypes(cfg);
    let n_classes = init.len();
    let mut per_class: Vec<Vec<Prototype>> = Vec::with_capacity(n_classes);
    for (c, proto) in init.into_iter().enumerate() {
        let birth = if c == 0 { 0 } else { cfg.birth_month(c as u32) };
        let mut rng = seed::rng(cfg.seed, &[2, c as u64]);
        let mut cur = proto;
        let mut traj = Vec::with_capacity(cfg.months as usize);
        for t in 0..cfg.months {
            if t > birth {
                cur.drift(cfg.drift_flip_prob, &mut rng);
            }
            traj.push(cur.clone());
        }
        per_class.push(traj);
    }
    (0..cfg.months as usize)
        .map(|t| per_class.iter().map(|traj| traj[t].clone()).collect())
        .collect()
}

pub fn synthesize_stream(cfg: &SynthConfig) -> Result<MonthlyStream> {
    cfg.validate()?;
    let traj = prototype_trajectory(cfg);
    let n_benign = ((cfg.benign_fraction * cfg.samples_per_month as f64).round() as usize)
        .clamp(1, cfg.samples_per_month);
    let n_mal = cfg.samples_per_month - n_benign;
    let mut months = Vec::with_capacity(cfg.months as usize);
    for t in 0..cfg.months {
        let mut rng = seed::rng(cfg.seed, &[3, t as u64]);
        let born: Vec<u32> = (1..=cfg.n_families)
            .filter(|&f| cfg.birth_month(f) <= t)
            .collect();
        let protos = &traj[t as usize];
        let mut labels: Vec<u32> = vec![0; n_benign];
        labels.extend((0..n_mal).map(|_| born[rng.random_range(0..born.len())]));
        labels.shuffle(&mut rng);
        let month = labels
            .into_iter()
            .enumerate()
            .map(|(k, family)| Sample {
                id: format!("m{t:03}-{k:05}"),
                features: protos[family as usize].draw(cfg.p_hot, cfg.p_cold, &mut rng),
                y: u8::from(family > 0),
                family,
                month: t,
            })
            .collect();
        months.push(month);
    }
    MonthlyStream::new(cfg.dim, 0, months)
}

/// Draws `count` fresh samples from a prototype. Used to inject controlled
/// probes (new families, drifted variants) into experiments.
pub fn draw_from_prototype(
    proto: &Prototype,
    count: usize,
    y: u8,
    family: u32,
    month: u32,
    id_prefix: &str,
    p_hot: f64,
    p_cold: f64,
    rng: &mut seed::Rng,
) -> Vec<Sample> {
    (0..count)
        .map(|k| Sample {
            id: format!("{id_prefix}{k:05}"),
            features: proto.draw(p_hot, p_cold, rng),
            y,
            family,
            month,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Five (or `n_splits`) seeded stratified train/validation splits.
///
/// Every (label, family) group keeps its share of the validation set within
/// one sample; the total validation size is `round(valid_fraction * |pool|)`.
pub fn random_splits(
    pool: &LabeledPool,
    n_splits: usize,
    valid_fraction: f64,
    seed_value: u64,
) -> Result<Vec<(LabeledPool, LabeledPool)>> {
    if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
        return Err(Error::config("valid_fraction must be in (0, 1)"));
    }
    let mut groups: BTreeMap<(u8, u32), Vec<usize>> = BTreeMap::new();
    for (i, s) in pool.samples().iter().enumerate() {
        groups.entry((s.y, s.family)).or_default().push(i);
    }
    // Largest-remainder apportionment of the validation slots to groups.
    let n = pool.len();
    let total = (valid_fraction * n as f64).round() as usize;
    let mut alloc: Vec<(usize, f64)> = groups
        .values()
        .map(|g| {
            let exact = g.len() as f64 * total as f64 / n.max(1) as f64;
            (exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = alloc.iter().map(|a| a.0).sum();
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&a, &b| alloc[b].1.total_cmp(&alloc[a].1).then(a.cmp(&b)));
    for &g in order.iter().take(total - assigned) {
        alloc[g].0 += 1;
    }

    let mut out = Vec::with_capacity(n_splits);
    for split in 0..n_splits {
        let mut rng = seed::rng(seed_value, &[4, split as u64]);
        let mut is_valid = vec![false; n];
        for (g, members) in groups.values().enumerate() {
            let mut m = members.clone();
            m.shuffle(&mut rng);
            for &i in &m[..alloc[g].0] {
                is_valid[i] = true;
            }
        }
        let mut train = LabeledPool::new();
        let mut valid = LabeledPool::new();
        for (i, (s, p)) in pool.samples().iter().zip(pool.provenance()).enumerate() {
            let target = if is_valid[i] { &mut valid } else { &mut train };
            target.push(s.clone(), *p)?;
        }
        out.push((train, valid));
    }
    Ok(out)
}

/// Splits a stream into an initial training pool and validation/test streams.
/// Ranges are half-open month ranges; non-empty ranges must be ordered
/// train < valid < test.
pub fn temporal_split(
    stream: &MonthlyStream,
    train: Range<u32>,
    valid: Range<u32>,
    test: Range<u32>,
) -> Result<(LabeledPool, MonthlyStream, MonthlyStream)> {
    let ranges = [&train, &valid, &test];
    let non_empty: Vec<&&Range<u32>> = ranges.iter().filter(|r| !r.is_empty()).collect();
    for w in non_empty.windows(2) {
        if w[0].end > w[1].start {
            return Err(Error::config(format!(
                "month ranges {:?} and {:?} overlap or are out of order",
                w[0], w[1]
            )));
        }
    }
    let pool = LabeledPool::from_initial(
        train
            .clone()
            .flat_map(|m| stream.month(m).iter().cloned())
            .collect(),
    )?;
    Ok((pool, stream.slice(valid), stream.slice(test)))
}
