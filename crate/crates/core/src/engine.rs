//! Distributed gradient descent core: local updates on each node, weighted
//! global aggregation, mini-batch scheduling, and the fixed-period training
//! loop that tracks the best aggregated model `w^f`.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::NodePartition;
use crate::error::{Error, Result};
use crate::models::LossModel;
use crate::param::{weighted_mean, ParamVector};
use crate::rng::{derive_seed, rng_for, SimRng, Stream};

/// Full-batch (DGD) or mini-batch (SGD) gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Dgd,
    Sgd { batch_size: usize },
}

/// Initial model parameter `w(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zero,
    Gaussian { std: f64 },
}

impl Init {
    pub fn build(self, dim: usize, seed: u64) -> ParamVector {
        match self {
            Init::Zero => ParamVector::zeros(dim),
            Init::Gaussian { std } => {
                use rand_distr::{Distribution, StandardNormal};
                let mut rng = rng_for(seed, Stream::Init, 0);
                (0..dim)
                    .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect::<Vec<f64>>()
                    .into()
            }
        }
    }
}

/// Mini-batch schedule of one node.
///
/// A fresh batch is drawn (uniformly, without replacement) for every local
/// iteration, except that the first iteration after a global aggregation
/// reuses the batch of the last iteration before it. No batch is used more
/// than twice, so with an aggregation after every step each batch is used
/// exactly twice.
#[derive(Debug, Clone)]
pub struct MiniBatchSampler {
    rng: SimRng,
    batch_size: usize,
    population: usize,
    current: Vec<usize>,
    batch_id: u64,
    uses: u32,
    clamped: bool,
}

impl MiniBatchSampler {
    /// Batches larger than the local dataset are clamped to its size.
    pub fn new(seed: u64, batch_size: usize, population: usize) -> Self {
        let clamped = batch_size > population;
        Self {
            rng: rng_for(seed, Stream::MiniBatch, 0),
            batch_size: batch_size.min(population).max(1),
            population,
            current: Vec::new(),
            batch_id: 0,
            uses: 0,
            clamped,
        }
    }

    /// Batch for the next local iteration. `after_aggregation` is true for
    /// the first iteration following a global aggregation (or initialisation).
    pub fn next_batch(&mut self, after_aggregation: bool) -> &[usize] {
        if !(after_aggregation && self.batch_id > 0 && self.uses < 2) {
            let mut idx = index::sample(&mut self.rng, self.population, self.batch_size).into_vec();
            idx.sort_unstable();
            self.current = idx;
            self.batch_id += 1;
            self.uses = 0;
        }
        self.uses += 1;
        &self.current
    }

    pub fn current(&self) -> Option<&[usize]> {
        (self.batch_id > 0).then_some(self.current.as_slice())
    }

    /// 1-based id of the current batch; 0 before the first draw.
    pub fn batch_id(&self) -> u64 {
        self.batch_id
    }

    pub fn clamped(&self) -> bool {
        self.clamped
    }
}

/// Per-node training state: `w_i(t)` and `w̃_i(t)`.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: usize,
    /// `w_i(t)`: result of the latest local update.
    pub w: ParamVector,
    /// `w̃_i(t)`: starting point of the next local update.
    pub w_tilde: ParamVector,
    pub sampler: Option<MiniBatchSampler>,
}

impl NodeState {
    /// Every node in a run is given the same mini-batch seed.
    pub fn new(id: usize, w0: ParamVector, mode: Mode, part: &NodePartition, batch_seed: u64) -> Self {
        let sampler = match mode {
            Mode::Dgd => None,
            Mode::Sgd { batch_size } => Some(MiniBatchSampler::new(batch_seed, batch_size, part.len())),
        };
        Self {
            id,
            w: w0.clone(),
            w_tilde: w0,
            sampler,
        }
    }

    /// Indices of the batch used by the most recent local update; `None`
    /// means the full local dataset (DGD, or SGD before any update).
    pub fn batch(&self) -> Option<&[usize]> {
        self.sampler.as_ref().and_then(|s| s.current())
    }

    /// `w_i(t) = w̃_i(t−1) − η ∇F_i(w̃_i(t−1))`, then `w̃_i(t) ← w_i(t)`.
    pub fn local_update(
        &mut self,
        part: &NodePartition,
        model: &LossModel,
        eta: f64,
        t: u64,
        after_aggregation: bool,
    ) -> Result<()> {
        if !(eta > 0.0) {
            return Err(Error::field("control.eta", "step size must be positive"));
        }
        let batch = self.sampler.as_mut().map(|s| s.next_batch(after_aggregation).to_vec());
        let grad = model.subset_gradient(&self.w_tilde, &part.samples, batch.as_deref())?;
        let mut next = self.w_tilde.clone();
        next.axpy(-eta, &grad);
        if !next.is_finite() {
            return Err(Error::NumericalDivergence { t });
        }
        self.w_tilde = next.clone();
        self.w = next;
        Ok(())
    }

    /// Loss of `w` on the current batch (the whole partition in DGD).
    pub fn batch_loss(&self, model: &LossModel, part: &NodePartition, w: &[f64]) -> Result<f64> {
        model.subset_loss(w, &part.samples, self.batch())
    }

    /// Gradient at `w` on the current batch (the whole partition in DGD).
    pub fn batch_gradient(&self, model: &LossModel, part: &NodePartition, w: &[f64]) -> Result<ParamVector> {
        model.subset_gradient(w, &part.samples, self.batch())
    }
}

/// Runs one local update on every node; node computations are independent
/// so the parallel path gives bit-identical results.
pub fn local_update_all(
    nodes: &mut [NodeState],
    parts: &[NodePartition],
    model: &LossModel,
    eta: f64,
    t: u64,
    after_aggregation: bool,
    parallel: bool,
) -> Result<()> {
    if parallel {
        nodes
            .par_iter_mut()
            .zip(parts.par_iter())
            .try_for_each(|(n, p)| n.local_update(p, model, eta, t, after_aggregation))
    } else {
        nodes
            .iter_mut()
            .zip(parts)
            .try_for_each(|(n, p)| n.local_update(p, model, eta, t, after_aggregation))
    }
}

/// `w(t) = Σ D_i w_i(t) / D`; every node's `w̃_i` is set to the result.
pub fn global_aggregate(nodes: &mut [NodeState], sizes: &[usize]) -> Result<ParamVector> {
    if nodes.len() != sizes.len() {
        return Err(Error::Dimension {
            expected: nodes.len(),
            got: sizes.len(),
        });
    }
    if sizes.contains(&0) {
        return Err(Error::config("aggregation weights must be positive"));
    }
    let vectors: Vec<&[f64]> = nodes.iter().map(|n| n.w.as_slice()).collect();
    let weights: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    let w = weighted_mean(&vectors, &weights)?;
    for n in nodes.iter_mut() {
        n.w_tilde = w.clone();
    }
    Ok(w)
}

/// Aggregator-side state of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    /// `w(t)` at the latest aggregation.
    pub w: ParamVector,
    /// Best aggregated parameter so far.
    pub w_f: ParamVector,
    /// `F(w^f)`
    pub f_w_f: f64,
    pub t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedTauConfig {
    pub tau: u32,
    pub iterations: u64,
    pub eta: f64,
    pub mode: Mode,
    pub init: Init,
    pub seed: u64,
    pub parallel: bool,
}

/// Model and global loss right after one aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationPoint {
    pub t: u64,
    pub w: ParamVector,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedTauRun {
    pub state: GlobalState,
    pub trace: Vec<AggregationPoint>,
}

pub fn partition_sizes(parts: &[NodePartition]) -> Vec<usize> {
    parts.iter().map(|p| p.len()).collect()
}

pub(crate) fn feature_dim(parts: &[NodePartition]) -> Result<usize> {
    parts
        .iter()
        .find_map(|p| p.samples.first())
        .map(|s| s.dim())
        .ok_or_else(|| Error::config("no training samples"))
}

/// Distributed gradient descent with an aggregation every `tau` iterations
/// for `iterations` iterations. A trailing partial block still ends with an
/// aggregation. Losses are full-data global losses.
pub fn run_fixed_tau(cfg: &FixedTauConfig, parts: &[NodePartition], model: &LossModel) -> Result<FixedTauRun> {
    if cfg.tau == 0 {
        return Err(Error::field("tau", "must be at least 1"));
    }
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config("every node needs at least one sample"));
    }
    let dim = model.param_dim(feature_dim(parts)?);
    let w0 = cfg.init.build(dim, cfg.seed);
    let batch_seed = derive_seed(cfg.seed, Stream::MiniBatch, 0);
    let mut nodes: Vec<NodeState> = parts
        .iter()
        .enumerate()
        .map(|(i, p)| NodeState::new(i, w0.clone(), cfg.mode, p, batch_seed))
        .collect();
    let sizes = partition_sizes(parts);
    let f0 = model.global_loss(&w0, parts)?;
    let mut state = GlobalState {
        w: w0.clone(),
        w_f: w0,
        f_w_f: f0,
        t: 0,
    };
    let mut trace = Vec::new();
    let tau = u64::from(cfg.tau);
    let mut last_agg = 0;
    for t in 1..=cfg.iterations {
        local_update_all(&mut nodes, parts, model, cfg.eta, t, t - 1 == last_agg, cfg.parallel)?;
        if t % tau == 0 || t == cfg.iterations {
            let w = global_aggregate(&mut nodes, &sizes)?;
            let loss = model.global_loss(&w, parts)?;
            if loss < state.f_w_f {
                state.f_w_f = loss;
                state.w_f = w.clone();
            }
            state.w = w.clone();
            trace.push(AggregationPoint { t, w, loss });
            last_agg = t;
        }
        state.t = t;
    }
    Ok(FixedTauRun { state, trace })
}
