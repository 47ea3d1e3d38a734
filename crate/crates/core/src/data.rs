//! Synthetic Gaussian-mixture tasks, client partitioning and the pool CSV format.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{Batch, Matrix};
use crate::rng::{stream, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Private,
    Generated,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Private => "private",
            Origin::Generated => "generated",
        })
    }
}

impl FromStr for Origin {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "private" => Ok(Origin::Private),
            "generated" => Ok(Origin::Generated),
            other => Err(format!("unknown origin `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
    pub domain: usize,
    pub origin: Origin,
    pub uid: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledPool {
    samples: Vec<Sample>,
}

impl LabeledPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a pool, rejecting duplicate uids.
    pub fn from_samples(samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !seen.insert(s.uid) {
                return Err(Error::invalid(format!("duplicate uid {} in pool", s.uid)));
            }
        }
        Ok(LabeledPool { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }

    pub fn uids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.uid).collect()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.features.len())
    }

    pub fn label_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Samples whose uid is in `uids`, in `uids` order.
    pub fn select(&self, uids: &[u64]) -> Result<LabeledPool> {
        let index: std::collections::HashMap<u64, usize> =
            self.samples.iter().enumerate().map(|(i, s)| (s.uid, i)).collect();
        let samples = uids
            .iter()
            .map(|u| {
                index
                    .get(u)
                    .map(|&i| self.samples[i].clone())
                    .ok_or_else(|| Error::invalid(format!("uid {u} not in pool")))
            })
            .collect::<Result<Vec<_>>>()?;
        LabeledPool::from_samples(samples)
    }

    /// Union of two pools with disjoint uids.
    pub fn merged(&self, other: &LabeledPool) -> Result<LabeledPool> {
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        LabeledPool::from_samples(samples)
    }

    pub fn to_batch(&self) -> Result<Batch> {
        self.batch_of(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Batch from the samples at positions `idx`.
    pub fn batch_of(&self, idx: &[usize]) -> Result<Batch> {
        let d = self
            .feature_dim()
            .ok_or_else(|| Error::invalid("cannot batch an empty pool"))?;
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = &self.samples[i];
            if s.features.len() != d {
                return Err(Error::shape(format!("sample uid {} has width {}", s.uid, s.features.len())));
            }
            data.extend_from_slice(&s.features);
            labels.push(s.label);
        }
        Batch::new(Matrix::from_vec(idx.len(), d, data)?, labels)
    }

    /// Mean feature vector; `None` when empty.
    pub fn mean_features(&self) -> Option<Vec<f64>> {
        let d = self.feature_dim()?;
        let mut mean = vec![0.0; d];
        for s in &self.samples {
            for (m, x) in mean.iter_mut().zip(&s.features) {
                *m += x;
            }
        }
        let n = self.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Some(mean)
    }
}

/// Parameters from which a [`SyntheticTaskSpec`] is materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskParams {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub num_domains: usize,
    /// Std of the class centers around the origin.
    pub class_separation: f64,
    /// Std of the per-domain offsets added to every class center.
    pub domain_shift: f64,
    pub within_std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Norm of the generator offset; its direction is drawn at random.
    pub generator_gap: f64,
    pub generator_diversity: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            num_classes: 10,
            feature_dim: 20,
            num_domains: 1,
            class_separation: 1.0,
            domain_shift: 0.0,
            within_std: 1.0,
            train_per_class: 200,
            test_per_class: 100,
            generator_gap: 0.0,
            generator_diversity: 1.0,
        }
    }
}

impl TaskParams {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool, &str); 7] = [
            ("task.num_classes", self.num_classes >= 2, "must be >= 2"),
            ("task.feature_dim", self.feature_dim >= 1, "must be >= 1"),
            ("task.num_domains", self.num_domains >= 1, "must be >= 1"),
            ("task.within_std", self.within_std > 0.0 && self.within_std.is_finite(), "must be > 0"),
            ("task.class_separation", self.class_separation >= 0.0, "must be >= 0"),
            ("task.domain_shift", self.domain_shift >= 0.0, "must be >= 0"),
            ("task.generator_diversity", self.generator_diversity >= 0.0, "must be >= 0"),
        ];
        for (key, ok, msg) in checks {
            if !ok {
                return Err(Error::config(key, msg));
            }
        }
        if !(self.generator_gap >= 0.0) {
            return Err(Error::config("task.generator_gap", "must be >= 0"));
        }
        Ok(())
    }

    /// Draws class centers, domain offsets and the generator offset.
    pub fn materialize(&self, rng: &mut Rng) -> Result<SyntheticTaskSpec> {
        self.validate()?;
        let (c, dd, d) = (self.num_classes, self.num_domains, self.feature_dim);
        let centers: Vec<f64> = (0..c * d).map(|_| self.class_separation * normal(rng)).collect();
        let offsets: Vec<f64> = (0..dd * d).map(|_| self.domain_shift * normal(rng)).collect();
        let mut means = Vec::with_capacity(c * dd * d);
        for class in 0..c {
            for domain in 0..dd {
                for j in 0..d {
                    means.push(centers[class * d + j] + offsets[domain * d + j]);
                }
            }
        }
        let direction: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let generator_gap = direction.iter().map(|v| self.generator_gap * v / norm).collect();
        let spec = SyntheticTaskSpec {
            num_classes: c,
            feature_dim: d,
            num_domains: dd,
            means,
            within_std: self.within_std,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            generator_gap,
            generator_diversity: self.generator_diversity,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Class-domain Gaussian mixture describing the "world", plus the generator's
/// offset and width relative to it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub num_domains: usize,
    /// `C x D x d`, class-major.
    pub means: Vec<f64>,
    pub within_std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub generator_gap: Vec<f64>,
    pub generator_diversity: f64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let (c, dd, d) = (self.num_classes, self.num_domains, self.feature_dim);
        if c < 2 || d < 1 || dd < 1 {
            return Err(Error::invalid("task needs C >= 2, d >= 1, D >= 1"));
        }
        if !(self.within_std > 0.0) || !(self.generator_diversity >= 0.0) {
            return Err(Error::invalid("task needs within_std > 0 and generator_diversity >= 0"));
        }
        if self.means.len() != c * dd * d {
            return Err(Error::shape(format!("means has {} values, expected {}", self.means.len(), c * dd * d)));
        }
        if self.generator_gap.len() != d {
            return Err(Error::shape("generator gap must have feature_dim entries"));
        }
        Ok(())
    }

    pub fn mean(&self, class: usize, domain: usize) -> &[f64] {
        let d = self.feature_dim;
        let start = (class * self.num_domains + domain) * d;
        &self.means[start..start + d]
    }
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn draw_pool(spec: &SyntheticTaskSpec, per_class: usize, rng: &mut Rng) -> LabeledPool {
    let mut samples = Vec::with_capacity(per_class * spec.num_classes);
    for class in 0..spec.num_classes {
        for _ in 0..per_class {
            let domain = rng.random_range(0..spec.num_domains);
            let features = spec
                .mean(class, domain)
                .iter()
                .map(|m| m + spec.within_std * normal(rng))
                .collect();
            samples.push(Sample {
                features,
                label: class,
                domain,
                origin: Origin::Private,
                uid: samples.len() as u64,
            });
        }
    }
    LabeledPool { samples }
}

/// Draws the global train and test pools. Uids are insertion indices.
pub fn build_task(spec: &SyntheticTaskSpec, rng: &mut Rng) -> Result<(LabeledPool, LabeledPool)> {
    spec.validate()?;
    let train = draw_pool(spec, spec.train_per_class, rng);
    let test = draw_pool(spec, spec.test_per_class, rng);
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMode {
    Label,
    Feature,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub beta: f64,
    pub mode: PartitionMode,
    pub seed: u64,
}

impl PartitionSpec {
    fn validate(&self) -> Result<()> {
        if self.num_clients < 1 {
            return Err(Error::config("partition.num_clients", "must be >= 1"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("partition.beta", "must be a finite value > 0"));
        }
        Ok(())
    }
}

const PARTITION_RETRIES: usize = 100;

/// One draw from a symmetric Dirichlet(beta) over `k` outcomes.
pub fn dirichlet(k: usize, beta: f64, rng: &mut Rng) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta > 0");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|g| g / sum).collect();
        }
    }
}

/// Integer split of `total` by `weights` using largest remainders,
/// ties to the lowest index. Always sums to `total`.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if !(sum > 0.0) {
        return largest_remainder(total, &vec![1.0; weights.len()]);
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Splits `uids` across `clients` by one Dirichlet draw, appending to `out`.
fn split_class(uids: &[u64], clients: &[usize], beta: f64, rng: &mut Rng, out: &mut [Vec<u64>]) {
    let props = dirichlet(clients.len(), beta, rng);
    let counts = largest_remainder(uids.len(), &props);
    let mut start = 0;
    for (&client, &n) in clients.iter().zip(&counts) {
        out[client].extend_from_slice(&uids[start..start + n]);
        start += n;
    }
}

fn uids_by_class(train: &LabeledPool, num_classes: usize, domain: Option<usize>) -> Vec<Vec<u64>> {
    let mut by_class = vec![Vec::new(); num_classes];
    for s in train.iter().filter(|s| domain.is_none_or(|d| s.domain == d)) {
        by_class[s.label].push(s.uid);
    }
    by_class
}

fn class_count(train: &LabeledPool) -> usize {
    train.iter().map(|s| s.label + 1).max().unwrap_or(0)
}

/// Label-skew partition: per class, proportions over clients from Dirichlet(beta).
/// Redraws the whole assignment while some client would be empty.
pub fn partition_dirichlet(train: &LabeledPool, ps: &PartitionSpec) -> Result<Vec<Vec<u64>>> {
    ps.validate()?;
    if ps.mode != PartitionMode::Label {
        return Err(Error::invalid("partition_dirichlet requires label mode"));
    }
    let k = ps.num_clients;
    if k == 1 {
        return Ok(vec![train.uids()]);
    }
    let by_class = uids_by_class(train, class_count(train), None);
    let clients: Vec<usize> = (0..k).collect();
    let mut rng = stream(ps.seed, Stream::Partition, 0);
    for _ in 0..PARTITION_RETRIES {
        let mut out = vec![Vec::new(); k];
        for uids in &by_class {
            split_class(uids, &clients, ps.beta, &mut rng, &mut out);
        }
        if out.iter().all(|c| !c.is_empty()) {
            return Ok(out);
        }
    }
    Err(Error::Partition(format!(
        "some client stayed empty after {PARTITION_RETRIES} redraws; use a larger beta or fewer clients"
    )))
}

/// Feature-skew partition: each domain's samples go to its own group of
/// `clients_per_domain` clients, split within the group by label Dirichlet.
pub fn partition_feature_domains(
    train: &LabeledPool,
    ps: &PartitionSpec,
    clients_per_domain: usize,
) -> Result<Vec<Vec<u64>>> {
    ps.validate()?;
    if ps.mode != PartitionMode::Feature {
        return Err(Error::invalid("partition_feature_domains requires feature mode"));
    }
    let num_domains = train.iter().map(|s| s.domain + 1).max().unwrap_or(1);
    if clients_per_domain == 0 || ps.num_clients % clients_per_domain != 0 {
        return Err(Error::config(
            "partition.clients_per_domain",
            format!("{} clients cannot be split into groups of {clients_per_domain}", ps.num_clients),
        ));
    }
    if ps.num_clients != num_domains * clients_per_domain {
        return Err(Error::config(
            "partition.num_clients",
            format!(
                "{} clients is not {num_domains} domains x {clients_per_domain} clients per domain",
                ps.num_clients
            ),
        ));
    }
    let num_classes = class_count(train);
    let groups: Vec<(Vec<usize>, Vec<Vec<u64>>)> = (0..num_domains)
        .map(|dom| {
            let clients = (dom * clients_per_domain..(dom + 1) * clients_per_domain).collect();
            (clients, uids_by_class(train, num_classes, Some(dom)))
        })
        .collect();
    let mut rng = stream(ps.seed, Stream::Partition, 0);
    for _ in 0..PARTITION_RETRIES {
        let mut out = vec![Vec::new(); ps.num_clients];
        for (clients, by_class) in &groups {
            for uids in by_class {
                split_class(uids, clients, ps.beta, &mut rng, &mut out);
            }
        }
        if out.iter().all(|c| !c.is_empty()) {
            return Ok(out);
        }
    }
    Err(Error::Partition(format!(
        "some client stayed empty after {PARTITION_RETRIES} redraws; use a larger beta or fewer clients"
    )))
}

const POOL_HEADER_PREFIX: [&str; 4] = ["uid", "label", "domain", "origin"];

/// Writes a pool as CSV: `uid,label,domain,origin,f0,...,f{d-1}`.
pub fn write_pool(pool: &LabeledPool, feature_dim: usize, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(csv_io)?;
    let mut header: Vec<String> = POOL_HEADER_PREFIX.iter().map(|s| s.to_string()).collect();
    header.extend((0..feature_dim).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_io)?;
    for s in pool.iter() {
        if s.features.len() != feature_dim {
            return Err(Error::shape(format!("sample uid {} has width {}", s.uid, s.features.len())));
        }
        let mut row = vec![s.uid.to_string(), s.label.to_string(), s.domain.to_string(), s.origin.to_string()];
        row.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

/// Reads a pool CSV, keeping the origin column. Labels must be `< num_classes`.
pub fn read_pool(path: &Path, num_classes: usize) -> Result<LabeledPool> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(csv_io)?;
    let mut records = r.records();
    let header = match records.next() {
        Some(rec) => rec.map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?,
        None => return Err(Error::Parse { line: 1, msg: "missing header".into() }),
    };
    let fields: Vec<&str> = header.iter().collect();
    let width = fields.len().saturating_sub(POOL_HEADER_PREFIX.len());
    let expected_features = (0..width).map(|j| format!("f{j}"));
    if fields.len() <= POOL_HEADER_PREFIX.len()
        || fields[..4] != POOL_HEADER_PREFIX
        || !fields[4..].iter().zip(expected_features).all(|(a, b)| *a == b)
    {
        return Err(Error::Parse {
            line: 1,
            msg: format!("bad header `{}`", fields.join(",")),
        });
    }
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for rec in records {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |msg: String| Error::Parse { line, msg };
        if rec.len() != fields.len() {
            return Err(bad(format!("expected {} fields, found {}", fields.len(), rec.len())));
        }
        let uid: u64 = rec[0].parse().map_err(|_| bad(format!("bad uid `{}`", &rec[0])))?;
        let label: usize = rec[1].parse().map_err(|_| bad(format!("bad label `{}`", &rec[1])))?;
        if label >= num_classes {
            return Err(bad(format!("label {label} out of range for {num_classes} classes")));
        }
        let domain: usize = rec[2].parse().map_err(|_| bad(format!("bad domain `{}`", &rec[2])))?;
        let origin: Origin = rec[3].parse().map_err(bad)?;
        let features = rec
            .iter()
            .skip(4)
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(bad(format!("non-numeric feature `{f}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if !seen.insert(uid) {
            return Err(bad(format!("duplicate uid {uid}")));
        }
        samples.push(Sample { features, label, domain, origin, uid });
    }
    Ok(LabeledPool { samples })
}

/// Imports an externally produced pool; every sample is tagged `generated`.
pub fn load_external_pool(path: &Path, num_classes: usize) -> Result<LabeledPool> {
    let mut pool = read_pool(path, num_classes)?;
    for s in &mut pool.samples {
        s.origin = Origin::Generated;
    }
    Ok(pool)
}
