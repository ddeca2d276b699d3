//! Datasets, synthetic generators, CSV ingestion, and the four node
//! partitioning schemes (random, label-sorted, replicated, and hybrid).

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelKind, Sample};
use crate::rng::{rng_for, SimRng, Stream};

/// Number of pseudo-label clusters derived for data without discrete labels.
pub const PSEUDO_LABEL_CLUSTERS: usize = 4;

/// How the `y` column of a dataset should be read when grouping by label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelKind {
    /// `y` is a class id (±1 for the SVM, blob id for k-means data).
    Discrete,
    /// `y` is a real-valued target.
    Continuous,
    /// No label column; `y` is zero.
    Absent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub labels: LabelKind,
    /// Generating coefficients for synthetic regression data.
    pub truth: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, labels: LabelKind) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::config("dataset must contain at least one sample"))?;
        let d = first.dim();
        if d == 0 {
            return Err(Error::config("feature dimension must be at least 1"));
        }
        if let Some(bad) = samples.iter().find(|s| s.dim() != d) {
            return Err(Error::Dimension {
                expected: d,
                got: bad.dim(),
            });
        }
        Ok(Self {
            samples,
            labels,
            truth: None,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].dim()
    }

    /// Distinct labels in ascending order. Empty unless labels are discrete.
    pub fn label_set(&self) -> Vec<i64> {
        if self.labels != LabelKind::Discrete {
            return Vec::new();
        }
        self.samples
            .iter()
            .map(|s| label_key(s.y))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Deterministic 80/20-style split; `train_fraction` of the shuffled
    /// samples go to the first set.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::field("data.train_fraction", "must be in (0, 1)"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng_for(seed, Stream::Split, 0));
        let n_train = ((self.len() as f64) * train_fraction).round() as usize;
        if n_train == 0 || n_train == self.len() {
            return Err(Error::config("dataset too small to split into train and test"));
        }
        let pick = |ix: &[usize]| Dataset {
            samples: ix.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: self.labels,
            truth: self.truth.clone(),
        };
        Ok((pick(&idx[..n_train]), pick(&idx[n_train..])))
    }
}

fn label_key(y: f64) -> i64 {
    y.round() as i64
}

/// One node's local dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct NodePartition {
    pub node_id: usize,
    pub samples: Vec<Sample>,
}

impl NodePartition {
    pub fn new(node_id: usize, samples: Vec<Sample>) -> Self {
        Self { node_id, samples }
    }

    /// `D_i`
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Parameters of the synthetic generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: ModelKind,
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
    /// SVM: distance of each class centre from the hyperplane through the
    /// origin; the clouds overlap when `spread` is comparable.
    pub margin: f64,
    /// SVM/k-means: per-coordinate spread of the Gaussian clouds.
    pub spread: f64,
    /// SVM: distance of both clouds from the origin along a direction
    /// orthogonal to the separating normal. A common offset makes one-class
    /// subsets pull the model away from the separating direction.
    pub offset: f64,
    /// Regression: standard deviation of the additive noise.
    pub noise: f64,
    /// k-means: number of blobs.
    pub blobs: usize,
}

impl SyntheticSpec {
    pub fn new(kind: ModelKind, n: usize, dim: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            dim,
            seed,
            margin: 2.0,
            spread: 1.0,
            offset: 2.0,
            noise: 0.1,
            blobs: 4,
        }
    }
}

/// Generates a synthetic dataset with default shape parameters.
pub fn generate_synthetic(kind: ModelKind, n: usize, dim: usize, seed: u64) -> Result<Dataset> {
    generate(&SyntheticSpec::new(kind, n, dim, seed))
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n < 2 {
        return Err(Error::field("data.samples", "need at least 2 samples"));
    }
    if spec.dim < 1 {
        return Err(Error::field("data.dim", "need at least 1 feature"));
    }
    if !(spec.spread >= 0.0) || !(spec.noise >= 0.0) || !(spec.margin >= 0.0) || !(spec.offset >= 0.0) {
        return Err(Error::field(
            "data",
            "margin, spread, offset and noise must be non-negative",
        ));
    }
    let mut rng = rng_for(spec.seed, Stream::Data, 0);
    match spec.kind {
        ModelKind::SquaredSvm => Ok(svm_clouds(spec, &mut rng)),
        ModelKind::LinearRegression => Ok(regression(spec, &mut rng)),
        ModelKind::KMeans => {
            if spec.blobs == 0 || spec.blobs > spec.n {
                return Err(Error::field("data.blobs", "must be between 1 and the sample count"));
            }
            Ok(blobs(spec, &mut rng))
        }
    }
}

fn gaussian_vec(rng: &mut SimRng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>()
}

fn unit_vec(rng: &mut SimRng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, dim, 1.0);
        let n = crate::param::norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Two Gaussian clouds labelled ±1 with centres at `±margin` along a random
/// direction `u`, both shifted by `offset` along a direction `v ⊥ u`.
fn svm_clouds(spec: &SyntheticSpec, rng: &mut SimRng) -> Dataset {
    let u = unit_vec(rng, spec.dim);
    let shift: Vec<f64> = if spec.dim > 1 {
        let mut v = unit_vec(rng, spec.dim);
        let along = crate::param::dot(&v, &u);
        for (vk, uk) in v.iter_mut().zip(&u) {
            *vk -= along * uk;
        }
        let n = crate::param::norm(&v);
        v.into_iter().map(|x| spec.offset * x / n).collect()
    } else {
        vec![0.0]
    };
    let samples = (0..spec.n)
        .map(|j| {
            let y = if j % 2 == 0 { 1.0 } else { -1.0 };
            let mut x = gaussian_vec(rng, spec.dim, spec.spread);
            let along: f64 = crate::param::dot(&x, &u);
            let g: f64 = StandardNormal.sample(rng);
            let target = y * (spec.margin + spec.spread * g);
            for ((xk, uk), sk) in x.iter_mut().zip(&u).zip(&shift) {
                *xk += (target - along) * uk + sk;
            }
            Sample::new(x, y)
        })
        .collect();
    Dataset {
        samples,
        labels: LabelKind::Discrete,
        truth: Some(u),
    }
}

/// `y = aᵀx + e` with `e` a Gaussian truncated to three standard deviations.
fn regression(spec: &SyntheticSpec, rng: &mut SimRng) -> Dataset {
    let a = gaussian_vec(rng, spec.dim, 1.0);
    let samples = (0..spec.n)
        .map(|_| {
            let x = gaussian_vec(rng, spec.dim, 1.0);
            let e = if spec.noise > 0.0 {
                let normal = Normal::new(0.0, spec.noise).expect("noise is non-negative");
                loop {
                    let e: f64 = normal.sample(rng);
                    if e.abs() <= 3.0 * spec.noise {
                        break e;
                    }
                }
            } else {
                0.0
            };
            let y = crate::param::dot(&a, &x) + e;
            Sample::new(x, y)
        })
        .collect();
    Dataset {
        samples,
        labels: LabelKind::Continuous,
        truth: Some(a),
    }
}

/// Well-separated Gaussian blobs; the blob id is stored in `y`.
fn blobs(spec: &SyntheticSpec, rng: &mut SimRng) -> Dataset {
    let min_gap = 6.0 * spec.spread.max(1e-3);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.blobs);
    let mut attempts = 0;
    while centers.len() < spec.blobs {
        let scale = min_gap * (1.0 + attempts as f64 / 100.0);
        let c = gaussian_vec(rng, spec.dim, scale);
        attempts += 1;
        if centers.iter().all(|o| dist(o, &c) >= min_gap) {
            centers.push(c);
        }
    }
    let samples = (0..spec.n)
        .map(|j| {
            let b = j % spec.blobs;
            let x = centers[b]
                .iter()
                .map(|c| c + spec.spread * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect::<Vec<_>>();
            Sample::new(x, b as f64)
        })
        .collect();
    Dataset {
        samples,
        labels: LabelKind::Discrete,
        truth: None,
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Data-to-node distribution scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Case {
    /// Each sample goes to a uniformly random node.
    Random = 1,
    /// Label-sorted contiguous blocks; every node holds a single label when
    /// there are at least as many nodes as labels.
    ByLabel = 2,
    /// Every node holds the full dataset.
    Replicated = 3,
    /// First half of the labels spread randomly over the first half of the
    /// nodes; the rest by label over the second half.
    Hybrid = 4,
}

impl Case {
    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Case::Random),
            2 => Ok(Case::ByLabel),
            3 => Ok(Case::Replicated),
            4 => Ok(Case::Hybrid),
            _ => Err(Error::field("case", "must be 1, 2, 3, or 4")),
        }
    }

    pub fn index(self) -> u8 {
        self as u8
    }
}

/// Group ids used by Cases 2 and 4: the discrete labels when present,
/// otherwise pseudo-labels from a seeded k-means pre-clustering.
pub fn grouping_labels(ds: &Dataset, seed: u64) -> Vec<i64> {
    match ds.labels {
        LabelKind::Discrete => ds.samples.iter().map(|s| label_key(s.y)).collect(),
        LabelKind::Continuous | LabelKind::Absent => {
            let k = PSEUDO_LABEL_CLUSTERS.min(ds.len());
            let points: Vec<&[f64]> = ds.samples.iter().map(|s| s.x.as_slice()).collect();
            lloyd(&points, k, seed, 100).into_iter().map(|c| c as i64).collect()
        }
    }
}

/// Plain Lloyd iteration with seeded random initial centers. Returns the
/// cluster index of every point.
pub fn lloyd(points: &[&[f64]], k: usize, seed: u64, max_iter: usize) -> Vec<usize> {
    let n = points.len();
    if n == 0 || k == 0 {
        return vec![0; n];
    }
    let d = points[0].len();
    let mut rng = rng_for(seed, Stream::PseudoLabels, 0);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut centers: Vec<Vec<f64>> = order[..k.min(n)].iter().map(|&i| points[i].to_vec()).collect();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = centers
                .iter()
                .enumerate()
                .map(|(c, ctr)| (c, dist(ctr, p)))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc })
                .0;
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for ((ctr, s), &c) in centers.iter_mut().zip(sums).zip(&counts) {
            if c > 0 {
                *ctr = s.into_iter().map(|v| v / c as f64).collect();
            }
        }
    }
    assign
}

/// Distributes `ds` over `n_nodes` nodes according to `case`.
pub fn partition(ds: &Dataset, n_nodes: usize, case: Case, seed: u64) -> Result<Vec<NodePartition>> {
    let labels = grouping_labels(ds, seed);
    partition_with_labels(ds, &labels, n_nodes, case, seed)
}

/// As [`partition`], with caller-supplied group labels (one per sample).
pub fn partition_with_labels(
    ds: &Dataset,
    labels: &[i64],
    n_nodes: usize,
    case: Case,
    seed: u64,
) -> Result<Vec<NodePartition>> {
    if n_nodes == 0 {
        return Err(Error::field("nodes", "need at least one node"));
    }
    if labels.len() != ds.len() {
        return Err(Error::Dimension {
            expected: ds.len(),
            got: labels.len(),
        });
    }
    let mut rng = rng_for(seed, Stream::Partition, 0);
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    match case {
        Case::Random => assign_random(&all, 0..n_nodes, &mut buckets, &mut rng),
        Case::ByLabel => assign_by_label(&all, labels, 0..n_nodes, &mut buckets)?,
        Case::Replicated => {
            for b in &mut buckets {
                b.extend_from_slice(&all);
            }
        }
        Case::Hybrid => {
            let distinct: Vec<i64> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
            if n_nodes < 2 || distinct.len() < 2 {
                return Err(Error::Partition(
                    "case 4 needs at least two nodes and two distinct labels".into(),
                ));
            }
            let first_labels: BTreeSet<i64> = distinct[..distinct.len() / 2].iter().copied().collect();
            let half = n_nodes / 2;
            let (first, rest): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| first_labels.contains(&labels[i]));
            assign_random(&first, 0..half, &mut buckets, &mut rng);
            assign_by_label(&rest, labels, half..n_nodes, &mut buckets)?;
        }
    }
    if let Some(empty) = buckets.iter().position(|b| b.is_empty()) {
        return Err(Error::Partition(format!("node {empty} would receive no samples")));
    }
    Ok(buckets
        .into_iter()
        .enumerate()
        .map(|(node, idx)| NodePartition::new(node, idx.into_iter().map(|i| ds.samples[i].clone()).collect()))
        .collect())
}

fn assign_random(samples: &[usize], nodes: std::ops::Range<usize>, buckets: &mut [Vec<usize>], rng: &mut SimRng) {
    for &i in samples {
        let node = rng.random_range(nodes.clone());
        buckets[node].push(i);
    }
}

/// Contiguous label blocks. With more labels than nodes, node `k` receives
/// labels `[k L / N, (k+1) L / N)`; otherwise label `j` spans nodes
/// `[j N / L, (j+1) N / L)` and its samples are split evenly among them.
fn assign_by_label(
    samples: &[usize],
    labels: &[i64],
    nodes: std::ops::Range<usize>,
    buckets: &mut [Vec<usize>],
) -> Result<()> {
    let distinct: Vec<i64> = samples
        .iter()
        .map(|&i| labels[i])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = nodes.len();
    let l = distinct.len();
    if l == 0 {
        return Err(Error::Partition("no labelled samples to distribute".into()));
    }
    let by_label = |lab: i64| samples.iter().copied().filter(move |&i| labels[i] == lab);
    if l >= n {
        for k in 0..n {
            for &lab in &distinct[k * l / n..(k + 1) * l / n] {
                buckets[nodes.start + k].extend(by_label(lab));
            }
        }
    } else {
        for (j, &lab) in distinct.iter().enumerate() {
            let span = (j * n / l)..((j + 1) * n / l);
            let members: Vec<usize> = by_label(lab).collect();
            let m = span.len();
            for (c, node) in span.enumerate() {
                let chunk = &members[c * members.len() / m..(c + 1) * members.len() / m];
                buckets[nodes.start + node].extend_from_slice(chunk);
            }
        }
    }
    Ok(())
}

/// Column layout of an input CSV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsvSchema {
    pub dim: usize,
    pub labels: LabelKind,
    pub header: bool,
}

/// Reads `dim` feature columns plus an optional trailing label column.
/// Errors name the 1-based line number of the offending row.
pub fn load_csv(path: impl AsRef<Path>, schema: CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(input: R, schema: CsvSchema) -> Result<Dataset> {
    if schema.dim == 0 {
        return Err(Error::field("data.dim", "must be at least 1"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let width = schema.dim + usize::from(schema.labels != LabelKind::Absent);
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let fallback = i + 1 + usize::from(schema.header);
        let record = record.map_err(|e| Error::Csv {
            row: e.position().map_or(fallback, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let row = record.position().map_or(fallback, |p| p.line() as usize);
        if record.len() != width {
            return Err(Error::Csv {
                row,
                msg: format!("expected {width} columns, found {}", record.len()),
            });
        }
        let values = record
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Csv {
                        row,
                        msg: format!("`{f}` is not a finite real number"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        let (x, y) = if schema.labels == LabelKind::Absent {
            (values, 0.0)
        } else {
            (values[..schema.dim].to_vec(), values[schema.dim])
        };
        samples.push(Sample::new(x, y));
    }
    Dataset::new(samples, schema.labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted(mut v: Vec<Vec<u64>>) -> Vec<Vec<u64>> {
        v.sort();
        v
    }

    fn keys(samples: &[Sample]) -> Vec<Vec<u64>> {
        samples
            .iter()
            .map(|s| s.x.iter().chain([&s.y]).map(|v| v.to_bits()).collect())
            .collect()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(ModelKind::SquaredSvm, 100, 2, 7).unwrap();
        let b = generate_synthetic(ModelKind::SquaredSvm, 100, 2, 7).unwrap();
        assert_eq!(keys(&a.samples), keys(&b.samples));
        let c = generate_synthetic(ModelKind::SquaredSvm, 100, 2, 8).unwrap();
        assert_ne!(keys(&a.samples), keys(&c.samples));
    }

    #[test]
    fn svm_clouds_centre_on_the_margin_and_share_the_offset() {
        let spec = SyntheticSpec::new(ModelKind::SquaredSvm, 4000, 5, 3);
        let ds = generate(&spec).unwrap();
        let u = ds.truth.clone().unwrap();
        for y in [-1.0, 1.0] {
            let along: Vec<f64> = ds
                .samples
                .iter()
                .filter(|s| s.y == y)
                .map(|s| crate::param::dot(&u, &s.x))
                .collect();
            let m = along.iter().sum::<f64>() / along.len() as f64;
            assert!((m - y * spec.margin).abs() < 0.1, "{m}");
        }
        // mean of all samples is the shared offset, orthogonal to u
        let mut mean = vec![0.0; 5];
        for s in &ds.samples {
            for (a, x) in mean.iter_mut().zip(&s.x) {
                *a += x / ds.len() as f64;
            }
        }
        assert!(crate::param::dot(&mean, &u).abs() < 0.1);
        assert!((crate::param::norm(&mean) - spec.offset).abs() < 0.15);
        assert_eq!(ds.label_set(), vec![-1, 1]);
    }

    #[test]
    fn regression_noise_within_three_sigma() {
        let spec = SyntheticSpec::new(ModelKind::LinearRegression, 10, 1, 11);
        let ds = generate(&spec).unwrap();
        let a = ds.truth.clone().unwrap();
        for s in &ds.samples {
            assert!((s.y - crate::param::dot(&a, &s.x)).abs() <= 3.0 * spec.noise);
        }
        assert!(ds.label_set().is_empty());
    }

    #[test]
    fn kmeans_blob_labels() {
        let ds = generate_synthetic(ModelKind::KMeans, 40, 2, 1).unwrap();
        assert_eq!(ds.label_set().len(), 4);
    }

    #[test]
    fn generation_rejects_bad_sizes() {
        assert!(generate_synthetic(ModelKind::SquaredSvm, 1, 2, 0).is_err());
        assert!(generate_synthetic(ModelKind::SquaredSvm, 10, 0, 0).is_err());
    }

    #[test]
    fn replicated_case_copies_everything() {
        let ds = generate_synthetic(ModelKind::SquaredSvm, 30, 2, 1).unwrap();
        let parts = partition(&ds, 5, Case::Replicated, 0).unwrap();
        assert_eq!(parts.len(), 5);
        for p in &parts {
            assert_eq!(p.samples, ds.samples);
        }
    }

    #[test]
    fn by_label_two_labels_two_nodes() {
        let ds = generate_synthetic(ModelKind::SquaredSvm, 30, 2, 1).unwrap();
        let parts = partition(&ds, 2, Case::ByLabel, 0).unwrap();
        assert!(parts[0].samples.iter().all(|s| s.y == -1.0));
        assert!(parts[1].samples.iter().all(|s| s.y == 1.0));
    }

    #[test]
    fn by_label_more_nodes_than_labels_keeps_nodes_pure() {
        let ds = generate_synthetic(ModelKind::SquaredSvm, 100, 2, 1).unwrap();
        let parts = partition(&ds, 5, Case::ByLabel, 0).unwrap();
        for p in &parts {
            assert!(!p.is_empty());
            let first = p.samples[0].y;
            assert!(p.samples.iter().all(|s| s.y == first));
        }
        assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), 100);
    }

    #[test]
    fn by_label_more_labels_than_nodes_bounded() {
        let ds = generate(&SyntheticSpec {
            blobs: 7,
            ..SyntheticSpec::new(ModelKind::KMeans, 70, 2, 3)
        })
        .unwrap();
        let parts = partition(&ds, 3, Case::ByLabel, 0).unwrap();
        for p in &parts {
            let n: BTreeSet<i64> = p.samples.iter().map(|s| s.y as i64).collect();
            assert!(n.len() <= 3);
        }
    }

    #[test]
    fn random_case_conserves_samples() {
        let ds = generate_synthetic(ModelKind::SquaredSvm, 100, 2, 5).unwrap();
        let parts = partition(&ds, 5, Case::Random, 9).unwrap();
        assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), 100);
        let union: Vec<Sample> = parts.iter().flat_map(|p| p.samples.clone()).collect();
        assert_eq!(sorted(keys(&union)), sorted(keys(&ds.samples)));
        let again = partition(&ds, 5, Case::Random, 9).unwrap();
        assert_eq!(parts, again);
    }

    #[test]
    fn hybrid_case_layout() {
        let ds = generate_synthetic(ModelKind::SquaredSvm, 200, 2, 5).unwrap();
        let parts = partition(&ds, 5, Case::Hybrid, 1).unwrap();
        // label -1 randomly over nodes 0..2, label +1 by label over nodes 2..5
        for p in &parts[..2] {
            assert!(p.samples.iter().all(|s| s.y == -1.0));
        }
        for p in &parts[2..] {
            assert!(p.samples.iter().all(|s| s.y == 1.0));
        }
        assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), 200);
        assert!(partition(&ds, 1, Case::Hybrid, 1).is_err());
    }

    #[test]
    fn too_many_nodes_is_a_partition_error() {
        let ds = generate_synthetic(ModelKind::SquaredSvm, 4, 2, 5).unwrap();
        assert!(matches!(partition(&ds, 10, Case::ByLabel, 0), Err(Error::Partition(_))));
        assert!(partition(&ds, 0, Case::Random, 0).is_err());
    }

    #[test]
    fn regression_uses_pseudo_labels() {
        let ds = generate_synthetic(ModelKind::LinearRegression, 200, 3, 5).unwrap();
        let labels = grouping_labels(&ds, 4);
        let distinct: BTreeSet<i64> = labels.iter().copied().collect();
        assert!(distinct.len() > 1 && distinct.len() <= PSEUDO_LABEL_CLUSTERS);
        let parts = partition(&ds, 4, Case::ByLabel, 4).unwrap();
        assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), 200);
    }

    #[test]
    fn csv_rows_and_header() {
        let text = "1.0,2.0,1\n3.0,4.0,-1\n5.0,6.0,1\n";
        let schema = CsvSchema {
            dim: 2,
            labels: LabelKind::Discrete,
            header: false,
        };
        let ds = read_csv(text.as_bytes(), schema).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.samples[1], Sample::new(vec![3.0, 4.0], -1.0));

        let with_header = format!("a,b,label\n{text}");
        let ds = read_csv(with_header.as_bytes(), CsvSchema { header: true, ..schema }).unwrap();
        assert_eq!(ds.len(), 3);
    }

    #[test]
    fn csv_errors_name_the_row() {
        let schema = CsvSchema {
            dim: 2,
            labels: LabelKind::Discrete,
            header: false,
        };
        let err = read_csv("1,2,1\n1,x,1\n3,4,1\n".as_bytes(), schema).unwrap_err();
        assert!(matches!(err, Error::Csv { row: 2, .. }), "{err}");
        let err = read_csv("1,2,1\n1,2\n".as_bytes(), schema).unwrap_err();
        assert!(matches!(err, Error::Csv { row: 2, .. }), "{err}");
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let ds = generate_synthetic(ModelKind::SquaredSvm, 50, 2, 5).unwrap();
        let (tr, te) = ds.split(0.8, 3).unwrap();
        assert_eq!(tr.len(), 40);
        assert_eq!(te.len(), 10);
        let (tr2, _) = ds.split(0.8, 3).unwrap();
        assert_eq!(tr, tr2);
    }
}
