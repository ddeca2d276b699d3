//! Per-sample losses and analytic gradients, plus the local (per-node) and
//! global (size-weighted) aggregates built from them.

use serde::{Deserialize, Serialize};

use crate::data::NodePartition;
use crate::error::{Error, Result};
use crate::param::{dot, ParamVector};

/// One training sample. `y` is a ±1 class for the SVM, the regression
/// target, or an auxiliary group id for k-means (where it is never read by
/// the loss).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    SquaredSvm,
    LinearRegression,
    KMeans,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::SquaredSvm => "svm",
            ModelKind::LinearRegression => "regression",
            ModelKind::KMeans => "kmeans",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svm" | "squared-svm" => Ok(ModelKind::SquaredSvm),
            "regression" | "linear-regression" => Ok(ModelKind::LinearRegression),
            "kmeans" | "k-means" => Ok(ModelKind::KMeans),
            other => Err(Error::config(format!("unknown model kind `{other}`"))),
        }
    }
}

/// A loss model with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LossModel {
    /// `λ/2 ‖w‖² + ½ max{0, 1 − y wᵀx}²`
    SquaredSvm { lambda: f64 },
    /// `½ (y − wᵀx)²`
    LinearRegression,
    /// `½ min_l ‖x − w_(l)‖²` with `w` the concatenation of `clusters` centers.
    KMeans { clusters: usize },
}

impl LossModel {
    pub fn svm(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::field("model.lambda", "must be a positive finite number"));
        }
        Ok(LossModel::SquaredSvm { lambda })
    }

    pub fn kmeans(clusters: usize) -> Result<Self> {
        if clusters == 0 {
            return Err(Error::field("model.clusters", "must be at least 1"));
        }
        Ok(LossModel::KMeans { clusters })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            LossModel::SquaredSvm { .. } => ModelKind::SquaredSvm,
            LossModel::LinearRegression => ModelKind::LinearRegression,
            LossModel::KMeans { .. } => ModelKind::KMeans,
        }
    }

    /// Parameter dimension for features of dimension `feature_dim`.
    pub fn param_dim(&self, feature_dim: usize) -> usize {
        match self {
            LossModel::KMeans { clusters } => clusters * feature_dim,
            _ => feature_dim,
        }
    }

    fn feature_dim(&self, param_len: usize) -> usize {
        match self {
            LossModel::KMeans { clusters } => param_len / clusters,
            _ => param_len,
        }
    }

    fn check(&self, w: &[f64], s: &Sample) -> Result<()> {
        let expected = self.param_dim(s.dim());
        if s.dim() == 0 || w.len() != expected {
            return Err(Error::Dimension { expected, got: w.len() });
        }
        Ok(())
    }

    /// Index of the nearest center; ties go to the lowest index.
    fn nearest_center(w: &[f64], x: &[f64], clusters: usize) -> (usize, f64) {
        let d = x.len();
        let mut best = (0, f64::INFINITY);
        for l in 0..clusters {
            let center = &w[l * d..(l + 1) * d];
            let dist: f64 = center.iter().zip(x).map(|(c, v)| (v - c) * (v - c)).sum();
            if dist < best.1 {
                best = (l, dist);
            }
        }
        best
    }

    fn loss_unchecked(&self, w: &[f64], s: &Sample) -> f64 {
        match *self {
            LossModel::SquaredSvm { lambda } => {
                let hinge = (1.0 - s.y * dot(w, &s.x)).max(0.0);
                0.5 * lambda * dot(w, w) + 0.5 * hinge * hinge
            }
            LossModel::LinearRegression => {
                let r = s.y - dot(w, &s.x);
                0.5 * r * r
            }
            LossModel::KMeans { clusters } => 0.5 * Self::nearest_center(w, &s.x, clusters).1,
        }
    }

    /// `out += scale * ∇f(w)`
    fn add_gradient(&self, w: &[f64], s: &Sample, scale: f64, out: &mut [f64]) {
        match *self {
            LossModel::SquaredSvm { lambda } => {
                let hinge = (1.0 - s.y * dot(w, &s.x)).max(0.0);
                let coef = -s.y * hinge;
                for ((o, wk), xk) in out.iter_mut().zip(w).zip(&s.x) {
                    *o += scale * (lambda * wk + coef * xk);
                }
            }
            LossModel::LinearRegression => {
                let coef = -(s.y - dot(w, &s.x));
                for (o, xk) in out.iter_mut().zip(&s.x) {
                    *o += scale * coef * xk;
                }
            }
            LossModel::KMeans { clusters } => {
                let d = s.x.len();
                let (l, _) = Self::nearest_center(w, &s.x, clusters);
                let block = l * d..(l + 1) * d;
                for ((o, c), xk) in out[block.clone()].iter_mut().zip(&w[block]).zip(&s.x) {
                    *o += scale * (c - xk);
                }
            }
        }
    }

    pub fn sample_loss(&self, w: &[f64], s: &Sample) -> Result<f64> {
        self.check(w, s)?;
        Ok(self.loss_unchecked(w, s))
    }

    pub fn sample_gradient(&self, w: &[f64], s: &Sample) -> Result<ParamVector> {
        self.check(w, s)?;
        let mut g = ParamVector::zeros(w.len());
        self.add_gradient(w, s, 1.0, &mut g);
        Ok(g)
    }

    fn check_subset(&self, w: &[f64], samples: &[Sample], idx: Option<&[usize]>) -> Result<usize> {
        let first = samples
            .first()
            .ok_or_else(|| Error::config("loss over an empty sample set (D_i must be at least 1)"))?;
        self.check(w, first)?;
        let d = self.feature_dim(w.len());
        if let Some(bad) = samples.iter().find(|s| s.dim() != d) {
            return Err(Error::Dimension {
                expected: d,
                got: bad.dim(),
            });
        }
        match idx {
            None => Ok(samples.len()),
            Some([]) => Err(Error::config("empty mini-batch")),
            Some(idx) => {
                if let Some(&i) = idx.iter().find(|&&i| i >= samples.len()) {
                    return Err(Error::config(format!("batch index {i} out of range")));
                }
                Ok(idx.len())
            }
        }
    }

    /// Mean loss over `samples`, or over `samples[idx]` for a mini-batch.
    pub fn subset_loss(&self, w: &[f64], samples: &[Sample], idx: Option<&[usize]>) -> Result<f64> {
        let n = self.check_subset(w, samples, idx)?;
        let sum: f64 = match idx {
            None => samples.iter().map(|s| self.loss_unchecked(w, s)).sum(),
            Some(idx) => idx.iter().map(|&i| self.loss_unchecked(w, &samples[i])).sum(),
        };
        Ok(sum / n as f64)
    }

    /// Mean gradient over `samples`, or over `samples[idx]` for a mini-batch.
    pub fn subset_gradient(&self, w: &[f64], samples: &[Sample], idx: Option<&[usize]>) -> Result<ParamVector> {
        let n = self.check_subset(w, samples, idx)?;
        let scale = 1.0 / n as f64;
        let mut g = ParamVector::zeros(w.len());
        match idx {
            None => samples.iter().for_each(|s| self.add_gradient(w, s, scale, &mut g)),
            Some(idx) => idx
                .iter()
                .for_each(|&i| self.add_gradient(w, &samples[i], scale, &mut g)),
        }
        Ok(g)
    }

    /// `F_i(w)`: mean sample loss over one node's data.
    pub fn local_loss(&self, w: &[f64], part: &NodePartition) -> Result<f64> {
        self.subset_loss(w, &part.samples, None)
    }

    /// `∇F_i(w)`: mean sample gradient over one node's data.
    pub fn local_gradient(&self, w: &[f64], part: &NodePartition) -> Result<ParamVector> {
        self.subset_gradient(w, &part.samples, None)
    }

    /// `F(w) = Σ D_i F_i(w) / D`.
    pub fn global_loss(&self, w: &[f64], parts: &[NodePartition]) -> Result<f64> {
        if parts.is_empty() {
            return Err(Error::config("global loss needs at least one partition"));
        }
        let mut weighted = 0.0;
        let mut total = 0usize;
        for p in parts {
            weighted += p.len() as f64 * self.local_loss(w, p)?;
            total += p.len();
        }
        Ok(weighted / total as f64)
    }

    /// Smoothness constant of the mean loss over `samples` where it is known
    /// in closed form (linear regression: largest eigenvalue of the sample
    /// second-moment matrix).
    pub fn smoothness_bound(&self, samples: &[Sample]) -> Option<f64> {
        match self {
            LossModel::LinearRegression if !samples.is_empty() => Some(largest_eigenvalue_second_moment(samples)),
            _ => None,
        }
    }
}

/// Largest eigenvalue of `(1/n) Σ x xᵀ` by power iteration.
fn largest_eigenvalue_second_moment(samples: &[Sample]) -> f64 {
    let d = samples[0].dim();
    let n = samples.len() as f64;
    let mut m = vec![0.0; d * d];
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                m[i * d + j] += s.x[i] * s.x[j] / n;
            }
        }
    }
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let mv: Vec<f64> = (0..d).map(|i| dot(&m[i * d..(i + 1) * d], &v)).collect();
        let nrm = crate::param::norm(&mv);
        if nrm == 0.0 {
            return 0.0;
        }
        let next = dot(&mv, &v);
        v = mv.iter().map(|x| x / nrm).collect();
        if (next - lambda).abs() <= 1e-14 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    // Rayleigh quotient of the final iterate.
    let mv: Vec<f64> = (0..d).map(|i| dot(&m[i * d..(i + 1) * d], &v)).collect();
    dot(&mv, &v).max(lambda)
}
