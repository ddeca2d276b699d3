//! Comparison methods: centralized gradient descent on pooled data, the
//! fixed-period protocol, and asynchronous distributed gradient descent.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::control::{run_protocol, ProtocolConfig, ProtocolOutcome, TauPolicy};
use crate::data::NodePartition;
use crate::engine::{feature_dim, partition_sizes, Init, MiniBatchSampler, Mode};
use crate::error::{Error, Result};
use crate::models::{LossModel, Sample};
use crate::param::ParamVector;
use crate::resources::{draw_consumption, CostEstimator, CostMeter, ResourceSpec, StepKind};
use crate::rng::{derive_seed, rng_for, Stream};

/// Settings shared by the centralized and asynchronous baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub eta: f64,
    pub mode: Mode,
    pub init: Init,
    pub seed: u64,
}

/// A step of a baseline run.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineStep {
    pub t: u64,
    pub consumed: Vec<f64>,
    pub step_cost: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRun {
    /// Last parameter `w(T)`; the baselines do not track `w^f`.
    pub w: ParamVector,
    pub t: u64,
    pub consumed: Vec<f64>,
    pub steps: Vec<BaselineStep>,
    /// Number of gradients applied per node (async only).
    pub pushes: Vec<u64>,
    pub batch_clamped: bool,
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::field("control.eta", "step size must be positive"));
    }
    Ok(())
}

/// Gradient-descent iterates `w(0), …, w(steps)` on `samples`; the
/// reference trajectory distributed runs are compared against.
pub fn centralized_trajectory(
    model: &LossModel,
    samples: &[Sample],
    w0: &ParamVector,
    eta: f64,
    steps: u64,
) -> Result<Vec<ParamVector>> {
    check_eta(eta)?;
    let mut out = Vec::with_capacity(steps as usize + 1);
    let mut w = w0.clone();
    out.push(w.clone());
    for t in 1..=steps {
        let g = model.subset_gradient(&w, samples, None)?;
        w.axpy(-eta, &g);
        if !w.is_finite() {
            return Err(Error::NumericalDivergence { t });
        }
        out.push(w.clone());
    }
    Ok(out)
}

/// Gradient descent on the pooled dataset until the next step would exceed
/// the budget. Step costs come from the `central` distributions.
pub fn run_centralized(
    cfg: &BaselineConfig,
    pooled: &[Sample],
    model: &LossModel,
    resources: &ResourceSpec,
    meter: &mut dyn CostMeter,
) -> Result<BaselineRun> {
    check_eta(cfg.eta)?;
    resources.validate()?;
    let first = pooled.first().ok_or_else(|| Error::config("no training samples"))?;
    let mut w = cfg.init.build(model.param_dim(first.dim()), cfg.seed);
    let mut sampler = match cfg.mode {
        Mode::Dgd => None,
        Mode::Sgd { batch_size } => Some(MiniBatchSampler::new(
            derive_seed(cfg.seed, Stream::MiniBatch, 0),
            batch_size,
            pooled.len(),
        )),
    };
    let budgets = resources.budgets();
    let mut consumed = vec![0.0; budgets.len()];
    let mut est = CostEstimator::default();
    let mut steps = Vec::new();
    let mut t = 0;
    loop {
        if let Some(c) = est.get() {
            if consumed.iter().zip(c).zip(&budgets).any(|((s, c), r)| s + c > *r) {
                break;
            }
        }
        let start = Instant::now();
        let batch = sampler.as_mut().map(|s| s.next_batch(false).to_vec());
        let g = model.subset_gradient(&w, pooled, batch.as_deref())?;
        w.axpy(-cfg.eta, &g);
        t += 1;
        if !w.is_finite() {
            return Err(Error::NumericalDivergence { t });
        }
        let cost = meter.central_step(start.elapsed());
        for (s, c) in consumed.iter_mut().zip(&cost) {
            *s += c;
        }
        est.observe(&cost);
        steps.push(BaselineStep {
            t,
            consumed: consumed.clone(),
            step_cost: cost,
        });
    }
    Ok(BaselineRun {
        w,
        t,
        consumed,
        steps,
        pushes: Vec::new(),
        batch_clamped: sampler.is_some_and(|s| s.clamped()),
    })
}

/// The adaptive protocol with estimation and τ recomputation removed; the
/// policy in `cfg` is replaced by `Fixed(tau)`.
pub fn run_fixed_tau_baseline(
    tau: u32,
    cfg: &ProtocolConfig,
    parts: &[NodePartition],
    model: &LossModel,
    resources: &ResourceSpec,
    meter: &mut dyn CostMeter,
) -> Result<ProtocolOutcome> {
    let cfg = ProtocolConfig {
        policy: TauPolicy::Fixed(tau),
        ..*cfg
    };
    run_protocol(&cfg, parts, model, resources, meter)
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    node: usize,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed: BinaryHeap pops the earliest time, then the lowest node id
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.node.cmp(&self.node))
    }
}

/// Asynchronous distributed gradient descent as a discrete-event simulation.
///
/// Each node repeatedly pulls the current model, computes a gradient on its
/// local data and pushes it back; the aggregator applies every push on
/// arrival as `w ← w − η·N·(D_i/D)·g_i`. A cycle lasts half an aggregation
/// draw (pull), a local-update draw and another half aggregation draw
/// (push), all scaled by the node's speed factor. Only the first resource
/// type is treated as a clock; the run ends when the next push would arrive
/// after its budget.
pub fn run_async(
    cfg: &BaselineConfig,
    parts: &[NodePartition],
    model: &LossModel,
    resources: &ResourceSpec,
) -> Result<BaselineRun> {
    check_eta(cfg.eta)?;
    resources.validate()?;
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config("every node needs at least one sample"));
    }
    let n = parts.len();
    let sizes = partition_sizes(parts);
    let total: usize = sizes.iter().sum();
    let dim = model.param_dim(feature_dim(parts)?);
    let mut w = cfg.init.build(dim, cfg.seed);
    let batch_seed = derive_seed(cfg.seed, Stream::MiniBatch, 0);
    let mut samplers: Vec<Option<MiniBatchSampler>> = parts
        .iter()
        .map(|p| match cfg.mode {
            Mode::Dgd => None,
            Mode::Sgd { batch_size } => Some(MiniBatchSampler::new(batch_seed, batch_size, p.len())),
        })
        .collect();
    let clock = resources.types[0].budget;
    let mut rng = rng_for(cfg.seed, Stream::Async, 0);
    let mut cycle = |i: usize| {
        let c = draw_consumption(resources, StepKind::Local, &mut rng)[0];
        let b = draw_consumption(resources, StepKind::Global, &mut rng)[0];
        (c + b) * resources.node_scale(i)
    };

    let mut snapshots: Vec<ParamVector> = vec![w.clone(); n];
    let mut queue = BinaryHeap::new();
    for i in 0..n {
        let d = cycle(i);
        if d <= clock {
            queue.push(Event { time: d, node: i });
        }
    }
    let mut pushes = vec![0u64; n];
    let mut steps = Vec::new();
    let mut now = 0.0;
    let mut t = 0;
    while let Some(Event { time, node }) = queue.pop() {
        let i = node;
        let batch = samplers[i].as_mut().map(|s| s.next_batch(false).to_vec());
        let g = model.subset_gradient(&snapshots[i], &parts[i].samples, batch.as_deref())?;
        let scale = cfg.eta * n as f64 * sizes[i] as f64 / total as f64;
        w.axpy(-scale, &g);
        t += 1;
        if !w.is_finite() {
            return Err(Error::NumericalDivergence { t });
        }
        pushes[i] += 1;
        steps.push(BaselineStep {
            t,
            consumed: vec![time],
            step_cost: vec![time - now],
        });
        now = time;
        snapshots[i] = w.clone();
        let next = time + cycle(i);
        if next <= clock {
            queue.push(Event { time: next, node: i });
        }
    }
    Ok(BaselineRun {
        w,
        t,
        consumed: vec![now],
        steps,
        pushes,
        batch_clamped: samplers.iter().flatten().any(|s| s.clamped()),
    })
}
